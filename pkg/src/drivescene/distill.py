"""Toy-scale knowledge distillation with low-rank adapters.

The teacher and student are small next-token models over a synthetic
order-2 grammar: the two previous tokens are embedded, concatenated, passed
through one tanh layer and projected onto the vocabulary.  Everything is
plain numpy with hand-written gradients.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DivergenceDetected, ShapeMismatch, SupportMismatch

BOS = 0
CONTEXT = 2
MAX_VOCAB = 64
MAX_SEQ = 16


# ---------------------------------------------------------------------------
# distributions and losses

def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    m = z.max(axis=axis, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=axis, keepdims=True))


@dataclass(frozen=True, eq=False)
class TokenDistribution:
    probabilities: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("a distribution is a non-empty vector")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("probabilities must be finite and non-negative")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        object.__setattr__(self, "probabilities", p)

    def __len__(self) -> int:
        return self.probabilities.size

    def __eq__(self, other) -> bool:
        return isinstance(other, TokenDistribution) and np.array_equal(self.probabilities, other.probabilities)


def kl_divergence(p: TokenDistribution, q: TokenDistribution) -> float:
    """D_KL(P || Q) in nats; terms with P(i) = 0 contribute nothing."""
    if len(p) != len(q):
        raise ShapeMismatch(f"vocabulary sizes differ: {len(p)} vs {len(q)}")
    P, Q = p.probabilities, q.probabilities
    mask = P > 0
    if np.any(Q[mask] == 0):
        raise SupportMismatch("P puts mass where Q has none")
    return float(max(0.0, np.sum(P[mask] * (np.log(P[mask]) - np.log(Q[mask])))))


def cross_entropy(logits: np.ndarray, label: int) -> float:
    return float(-log_softmax(logits)[label])


def hybrid_loss(
    student_logits: np.ndarray,
    teacher_logits: np.ndarray,
    hard_label: int,
    alpha: float = 0.5,
    temperature: float = 2.0,
) -> float:
    """alpha * T^2 * KL(teacher_T || student_T) + (1 - alpha) * CE(student, label)."""
    loss, _ = hybrid_loss_and_grad(
        np.asarray(student_logits, dtype=np.float64)[None, :],
        np.asarray(teacher_logits, dtype=np.float64)[None, :],
        np.array([hard_label]),
        alpha,
        temperature,
        reduction="sum",
    )
    return loss


def hybrid_loss_and_grad(
    student_logits: np.ndarray,
    teacher_logits: np.ndarray,
    labels: np.ndarray,
    alpha: float,
    temperature: float,
    reduction: str = "mean",
) -> tuple[float, np.ndarray]:
    """Batched hybrid loss and its gradient with respect to the student logits.

    d/dz = alpha * T * (softmax(z/T) - softmax(t/T)) + (1 - alpha) * (softmax(z) - onehot)
    """
    if student_logits.shape != teacher_logits.shape:
        raise ShapeMismatch(f"{student_logits.shape} vs {teacher_logits.shape}")
    if not 0.0 <= alpha <= 1.0 or temperature <= 0:
        raise ValueError("alpha must be in [0, 1] and temperature positive")
    n, v = student_logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,) or np.any(labels < 0) or np.any(labels >= v):
        raise ValueError("labels must be valid indices, one per row")
    T = temperature
    log_q = log_softmax(student_logits / T)
    log_p = log_softmax(teacher_logits / T)
    p = np.exp(log_p)
    kl = np.sum(p * (log_p - log_q), axis=1)
    log_s = log_softmax(student_logits)
    ce = -log_s[np.arange(n), labels]
    per_row = alpha * T * T * kl + (1.0 - alpha) * ce
    onehot = np.zeros_like(student_logits)
    onehot[np.arange(n), labels] = 1.0
    grad = alpha * T * (np.exp(log_q) - p) + (1.0 - alpha) * (np.exp(log_s) - onehot)
    if reduction == "mean":
        return float(per_row.mean()), grad / n
    return float(per_row.sum()), grad


# ---------------------------------------------------------------------------
# toy model and adapters

@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 24
    d_embed: int = 12
    d_hidden: int = 48

    def __post_init__(self):
        if not 2 <= self.vocab <= MAX_VOCAB:
            raise ValueError(f"vocab must be in [2, {MAX_VOCAB}]")
        if self.d_embed < 1 or self.d_hidden < 1:
            raise ValueError("layer sizes must be positive")


ADAPTABLE = ("W1", "W2")


@dataclass(eq=False)
class ToyModelParams:
    """E: vocab x d_embed; W1: d_hidden x 2*d_embed; W2: vocab x d_hidden."""

    E: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    NAMES = ("E", "W1", "b1", "W2", "b2")

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int) -> ToyModelParams:
        rng = np.random.default_rng(seed)
        d_in = CONTEXT * cfg.d_embed
        return cls(
            E=rng.normal(0.0, 1.0, (cfg.vocab, cfg.d_embed)),
            W1=rng.normal(0.0, 1.0 / math.sqrt(d_in), (cfg.d_hidden, d_in)),
            b1=np.zeros(cfg.d_hidden),
            W2=rng.normal(0.0, 1.0 / math.sqrt(cfg.d_hidden), (cfg.vocab, cfg.d_hidden)),
            b2=np.zeros(cfg.vocab),
        )

    @property
    def vocab(self) -> int:
        return self.E.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in self.NAMES}

    def copy(self) -> ToyModelParams:
        return ToyModelParams(**{n: a.copy() for n, a in self.arrays().items()})

    def param_count(self) -> int:
        return sum(a.size for a in self.arrays().values())

    def equal(self, other: ToyModelParams) -> bool:
        return all(np.array_equal(a, getattr(other, n)) for n, a in self.arrays().items())


@dataclass(eq=False)
class LowRankAdapter:
    """Delta = (alpha / r) * B @ A for a d_out x d_in matrix."""

    A: np.ndarray
    B: np.ndarray
    alpha: float

    def __post_init__(self):
        r = self.A.shape[0]
        if self.B.shape[1] != r or r < 1:
            raise ShapeMismatch(f"A {self.A.shape} and B {self.B.shape} disagree on rank")
        if r > min(self.B.shape[0], self.A.shape[1]):
            raise ValueError(f"rank {r} exceeds min(d_out, d_in)")

    @classmethod
    def init(cls, d_out: int, d_in: int, rank: int, alpha: float, rng: np.random.Generator, std: float = 0.01) -> LowRankAdapter:
        return cls(rng.normal(0.0, std, (rank, d_in)), np.zeros((d_out, rank)), alpha)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scaling * (self.B @ self.A)

    def param_count(self) -> int:
        return self.A.size + self.B.size

    def copy(self) -> LowRankAdapter:
        return LowRankAdapter(self.A.copy(), self.B.copy(), self.alpha)


def lora_effective(W0: np.ndarray, adapter: LowRankAdapter | None) -> np.ndarray:
    if adapter is None:
        return W0
    if adapter.B.shape[0] != W0.shape[0] or adapter.A.shape[1] != W0.shape[1]:
        raise ShapeMismatch(f"adapter {adapter.B.shape[0]}x{adapter.A.shape[1]} vs weight {W0.shape}")
    if not np.any(adapter.B) or not np.any(adapter.A):
        return W0
    return W0 + adapter.delta()


def fit_adapter(delta: np.ndarray, rank: int, alpha: float | None = None) -> LowRankAdapter:
    """Best rank-``rank`` adapter for ``delta`` in Frobenius norm (truncated SVD)."""
    d_out, d_in = delta.shape
    if not 1 <= rank <= min(d_out, d_in):
        raise ValueError("rank must be in [1, min(d_out, d_in)]")
    alpha = float(rank) if alpha is None else alpha
    U, S, Vt = np.linalg.svd(delta, full_matrices=False)
    root = np.sqrt(S[:rank] / (alpha / rank))
    return LowRankAdapter(root[:, None] * Vt[:rank], U[:, :rank] * root[None, :], alpha)


def adapter_param_count(adapters: Mapping[str, LowRankAdapter]) -> int:
    return sum(a.rank * (a.B.shape[0] + a.A.shape[1]) for a in adapters.values())


def init_adapters(
    params: ToyModelParams, rank: int, alpha: float, seed: int, targets: Sequence[str] = ADAPTABLE
) -> dict[str, LowRankAdapter]:
    rng = np.random.default_rng(seed)
    out = {}
    for name in targets:
        if name not in ADAPTABLE:
            raise ValueError(f"cannot adapt {name!r}; choose from {ADAPTABLE}")
        W = getattr(params, name)
        out[name] = LowRankAdapter.init(W.shape[0], W.shape[1], min(rank, *W.shape), alpha, rng)
    return out


@dataclass(frozen=True)
class TrainingPair:
    x: tuple[int, ...]
    y: tuple[int, ...]

    def __post_init__(self):
        if len(self.y) < 1:
            raise ValueError("target must hold at least one token")
        if len(self.x) + len(self.y) > MAX_SEQ:
            raise ValueError(f"sequence longer than {MAX_SEQ}")


def positions(corpus: Sequence[TrainingPair]) -> tuple[np.ndarray, np.ndarray]:
    """(contexts, targets): one row per predicted token, contexts BOS-padded."""
    ctx, tgt = [], []
    for pair in corpus:
        seq = [BOS] * CONTEXT + list(pair.x)
        for tok in pair.y:
            ctx.append(seq[-CONTEXT:])
            tgt.append(tok)
            seq.append(tok)
    return (
        np.array(ctx, dtype=np.int64).reshape(-1, CONTEXT),
        np.array(tgt, dtype=np.int64),
    )


def check_tokens(corpus: Sequence[TrainingPair], vocab: int) -> None:
    for pair in corpus:
        for t in pair.x + pair.y:
            if not 0 <= t < vocab:
                raise ValueError(f"token {t} outside vocabulary of size {vocab}")


def forward(
    params: ToyModelParams, ctx: np.ndarray, adapters: Mapping[str, LowRankAdapter] | None = None
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    adapters = adapters or {}
    W1 = lora_effective(params.W1, adapters.get("W1"))
    W2 = lora_effective(params.W2, adapters.get("W2"))
    x = params.E[ctx].reshape(len(ctx), -1)
    h = np.tanh(x @ W1.T + params.b1)
    logits = h @ W2.T + params.b2
    return logits, {"x": x, "h": h, "W1": W1, "W2": W2}


def backward(
    params: ToyModelParams,
    ctx: np.ndarray,
    cache: Mapping[str, np.ndarray],
    dlogits: np.ndarray,
    adapters: Mapping[str, LowRankAdapter] | None = None,
) -> dict[str, np.ndarray]:
    """Gradients for every base array and, when present, ``A:<name>``/``B:<name>``."""
    adapters = adapters or {}
    x, h = cache["x"], cache["h"]
    grads = {"W2": dlogits.T @ h, "b2": dlogits.sum(axis=0)}
    dh = dlogits @ cache["W2"]
    dpre = dh * (1.0 - h * h)
    grads["W1"] = dpre.T @ x
    grads["b1"] = dpre.sum(axis=0)
    dx = (dpre @ cache["W1"]).reshape(len(ctx), CONTEXT, -1)
    dE = np.zeros_like(params.E)
    np.add.at(dE, ctx, dx)
    grads["E"] = dE
    for name, ad in adapters.items():
        G = grads[name]
        grads[f"A:{name}"] = ad.scaling * (ad.B.T @ G)
        grads[f"B:{name}"] = ad.scaling * (G @ ad.A.T)
    return grads


def eval_ce(params: ToyModelParams, corpus: Sequence[TrainingPair], adapters=None) -> float:
    ctx, tgt = positions(corpus)
    if len(tgt) == 0:
        return float("nan")
    logits, _ = forward(params, ctx, adapters)
    return float(-log_softmax(logits)[np.arange(len(tgt)), tgt].mean())


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        for k in sorted(params):
            g = grads[k]
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            params[k][...] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _check_finite(step: int, loss: float) -> None:
    if not math.isfinite(loss):
        raise DivergenceDetected(step, loss)


def train_base(
    params: ToyModelParams,
    corpus: Sequence[TrainingPair],
    steps: int,
    lr: float = 0.01,
    seed: int = 0,
    batch_size: int = 64,
) -> tuple[ToyModelParams, list[float]]:
    """Full-parameter training on hard labels (used to build teachers)."""
    check_tokens(corpus, params.vocab)
    ctx, tgt = positions(corpus)
    trained = params.copy()
    arrays = trained.arrays()
    opt = Adam(lr)
    rng = np.random.default_rng(seed)
    losses = []
    for step in range(steps):
        idx = rng.integers(0, len(tgt), size=min(batch_size, len(tgt)))
        logits, cache = forward(trained, ctx[idx])
        loss, dlog = hybrid_loss_and_grad(logits, logits, tgt[idx], 0.0, 1.0)
        _check_finite(step, loss)
        losses.append(loss)
        opt.step(arrays, backward(trained, ctx[idx], cache, dlog))
    return trained, losses


def train_adapter(
    student: ToyModelParams,
    adapters: Mapping[str, LowRankAdapter],
    teacher_logits: np.ndarray | None,
    corpus: Sequence[TrainingPair],
    alpha: float = 0.5,
    temperature: float = 2.0,
    steps: int = 500,
    lr: float = 0.01,
    seed: int = 0,
    batch_size: int = 64,
) -> tuple[dict[str, LowRankAdapter], list[float]]:
    """Update only the adapter factors; the base weights are never touched.

    ``teacher_logits`` holds one row per corpus position (see
    :func:`distill_dataset`); it may be None when ``alpha`` is 0.
    """
    check_tokens(corpus, student.vocab)
    ctx, tgt = positions(corpus)
    if teacher_logits is None:
        if alpha != 0.0:
            raise ValueError("teacher logits required when alpha > 0")
        teacher_logits = np.zeros((len(tgt), student.vocab))
    if teacher_logits.shape != (len(tgt), student.vocab):
        raise ShapeMismatch(f"teacher logits {teacher_logits.shape}, expected {(len(tgt), student.vocab)}")
    trained = {k: a.copy() for k, a in adapters.items()}
    factors = {}
    for name, ad in trained.items():
        factors[f"A:{name}"] = ad.A
        factors[f"B:{name}"] = ad.B
    opt = Adam(lr)
    rng = np.random.default_rng(seed)
    losses = []
    for step in range(steps):
        idx = rng.integers(0, len(tgt), size=min(batch_size, len(tgt)))
        logits, cache = forward(student, ctx[idx], trained)
        loss, dlog = hybrid_loss_and_grad(logits, teacher_logits[idx], tgt[idx], alpha, temperature)
        _check_finite(step, loss)
        losses.append(loss)
        grads = backward(student, ctx[idx], cache, dlog, trained)
        opt.step(factors, {k: grads[k] for k in factors})
    return trained, losses


# ---------------------------------------------------------------------------
# synthetic grammar

@dataclass(frozen=True, eq=False)
class Grammar:
    """Order-2 Markov source: P(next | prev2, prev1), token 0 doubles as BOS."""

    table: np.ndarray

    @classmethod
    def random(cls, vocab: int, seed: int, concentration: float = 0.3) -> Grammar:
        rng = np.random.default_rng(seed)
        table = rng.dirichlet(np.full(vocab - 1, concentration), size=(vocab, vocab))
        # BOS is never emitted
        return cls(np.concatenate([np.zeros((vocab, vocab, 1)), table], axis=2))

    @property
    def vocab(self) -> int:
        return self.table.shape[0]

    def sample(self, n: int, length: int, seed: int, prompt_len: int = 2) -> list[TrainingPair]:
        if not 1 <= prompt_len < length <= MAX_SEQ:
            raise ValueError("need 1 <= prompt_len < length <= 16")
        rng = np.random.default_rng(seed)
        out = []
        cum = np.cumsum(self.table, axis=2)
        for _ in range(n):
            seq = [BOS, BOS]
            for _ in range(length):
                u = rng.random()
                row = cum[seq[-2], seq[-1]]
                seq.append(int(min(np.searchsorted(row, u, side="right"), self.vocab - 1)))
            toks = tuple(seq[2:])
            out.append(TrainingPair(toks[:prompt_len], toks[prompt_len:]))
        return out

    def entropy_rate(self, corpus: Sequence[TrainingPair]) -> float:
        """Mean true-model CE on a corpus (the floor any model can reach)."""
        ctx, tgt = positions(corpus)
        p = self.table[ctx[:, 0], ctx[:, 1], tgt]
        return float(-np.log(p).mean())


# ---------------------------------------------------------------------------
# soft-label store

@dataclass(eq=False)
class SoftLabelStore:
    """Teacher logits per predicted position, plus per-item row offsets."""

    logits: np.ndarray
    offsets: np.ndarray

    def __len__(self) -> int:
        return self.logits.shape[0]

    def item(self, i: int) -> np.ndarray:
        return self.logits[self.offsets[i] : self.offsets[i + 1]]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SoftLabelStore)
            and np.array_equal(self.logits, other.logits)
            and np.array_equal(self.offsets, other.offsets)
        )

    def save(self, path: str | Path) -> Path:
        """Binary arrays (uint32 ndim, uint32 dims, little-endian data) + ``.json`` index."""
        path = Path(path)
        index = {"format": "drivescene-soft-labels", "version": 1, "arrays": []}
        with open(path, "wb") as fh:
            for name, arr, dtype in (("logits", self.logits, "<f8"), ("offsets", self.offsets, "<i8")):
                data = np.ascontiguousarray(arr, dtype=dtype)
                entry = {"name": name, "offset": fh.tell(), "shape": list(data.shape), "dtype": dtype}
                fh.write(struct.pack("<I", data.ndim))
                fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
                fh.write(data.tobytes())
                index["arrays"].append(entry)
        index_path = path.with_suffix(path.suffix + ".json")
        index_path.write_text(json.dumps(index, sort_keys=True, indent=1) + "\n")
        return index_path

    @classmethod
    def load(cls, path: str | Path) -> SoftLabelStore:
        path = Path(path)
        index = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        raw = path.read_bytes()
        arrays = {}
        for entry in index["arrays"]:
            pos = entry["offset"]
            (ndim,) = struct.unpack_from("<I", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 4)
            if list(shape) != entry["shape"]:
                raise ValueError(f"shape prefix {shape} disagrees with index {entry['shape']}")
            start = pos + 4 + 4 * ndim
            count = int(np.prod(shape)) if shape else 1
            arrays[entry["name"]] = np.frombuffer(raw, dtype=entry["dtype"], count=count, offset=start).reshape(shape).copy()
        return cls(arrays["logits"], arrays["offsets"])


def distill_dataset(teacher: ToyModelParams, corpus: Sequence[TrainingPair]) -> SoftLabelStore:
    ctx, _ = positions(corpus)
    offsets = np.concatenate([[0], np.cumsum([len(p.y) for p in corpus])]).astype(np.int64)
    if len(ctx) == 0:
        return SoftLabelStore(np.zeros((0, teacher.vocab)), offsets)
    logits, _ = forward(teacher, ctx)
    return SoftLabelStore(logits, offsets)


def write_loss_csv(path: str | Path, losses: Iterable[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])


# ---------------------------------------------------------------------------
# paired-seed experiment

@dataclass(frozen=True)
class DistillConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    seq_len: int = 12
    prompt_len: int = 2
    teacher_corpus: int = 2000
    teacher_steps: int = 3000
    student_corpus: int = 200
    heldout_corpus: int = 500
    steps: int = 1000
    lr: float = 0.01
    batch_size: int = 64
    rank: int = 4
    lora_alpha: float = 8.0
    targets: tuple[str, ...] = ADAPTABLE
    alpha: float = 0.5
    temperature: float = 2.0

    @classmethod
    def from_dict(cls, d: Mapping) -> DistillConfig:
        kw = dict(d)
        if "model" in kw:
            kw["model"] = ModelConfig(**kw["model"])
        if "targets" in kw:
            kw["targets"] = tuple(kw["targets"])
        return cls(**kw)


@dataclass
class DistillResult:
    seed: int
    teacher_ce: float
    initial_ce: float
    kd_ce: float
    hard_ce: float
    kd_losses: list[float]
    hard_losses: list[float]
    trainable: int
    frozen: int

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "teacher_ce": self.teacher_ce,
            "initial_ce": self.initial_ce,
            "kd_ce": self.kd_ce,
            "hard_ce": self.hard_ce,
            "trainable_params": self.trainable,
            "frozen_params": self.frozen,
        }


def run_paired_seed(cfg: DistillConfig, seed: int) -> DistillResult:
    """Train a teacher on plentiful data, then two adapter students on a small
    corpus: one with the hybrid loss, one on hard labels only."""
    grammar = Grammar.random(cfg.model.vocab, seed)
    big = grammar.sample(cfg.teacher_corpus, cfg.seq_len, seed + 1, cfg.prompt_len)
    small = grammar.sample(cfg.student_corpus, cfg.seq_len, seed + 2, cfg.prompt_len)
    held = grammar.sample(cfg.heldout_corpus, cfg.seq_len, seed + 3, cfg.prompt_len)
    teacher, _ = train_base(ToyModelParams.init(cfg.model, seed + 4), big, cfg.teacher_steps, cfg.lr, seed + 5, cfg.batch_size)
    store = distill_dataset(teacher, small)
    student = ToyModelParams.init(cfg.model, seed + 6)
    adapters = init_adapters(student, cfg.rank, cfg.lora_alpha, seed + 7, cfg.targets)
    kd, kd_losses = train_adapter(student, adapters, store.logits, small, cfg.alpha, cfg.temperature, cfg.steps, cfg.lr, seed + 8, cfg.batch_size)
    hard, hard_losses = train_adapter(student, adapters, None, small, 0.0, cfg.temperature, cfg.steps, cfg.lr, seed + 8, cfg.batch_size)
    return DistillResult(
        seed=seed,
        teacher_ce=eval_ce(teacher, held),
        initial_ce=eval_ce(student, held, adapters),
        kd_ce=eval_ce(student, held, kd),
        hard_ce=eval_ce(student, held, hard),
        kd_losses=kd_losses,
        hard_losses=hard_losses,
        trainable=adapter_param_count(adapters),
        frozen=student.param_count(),
    )
