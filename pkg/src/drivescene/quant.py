"""Group-wise weight quantization: round-to-nearest and activation-aware scaling.

Weights are ``d_out x d_in`` and act on inputs as ``W @ x``.  Groups run
along the input dimension; a trailing partial group is handled as if
zero-padded.
"""
from __future__ import annotations

import csv
import json
import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import EmptyBatch, ShapeMismatch, ZeroStatsChannel

STATS_FLOOR = 1e-8
SUPPORTED_BITS = (2, 3, 4, 8)
DEFAULT_ALPHA_GRID = tuple(round(0.05 * i, 2) for i in range(21))


@dataclass(frozen=True)
class ActivationStats:
    mean_abs: np.ndarray
    samples: int

    @property
    def channels(self) -> int:
        return self.mean_abs.size


def collect_stats(X: np.ndarray) -> ActivationStats:
    """Per-input-channel mean absolute activation over a calibration batch (rows = samples)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyBatch("calibration batch must hold at least one sample")
    return ActivationStats(np.abs(X).mean(axis=0), X.shape[0])


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4
    group_size: int = 32
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHA_GRID
    symmetric: bool = True

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ValueError(f"bits must be one of {SUPPORTED_BITS}")
        if self.group_size < 1:
            raise ValueError("group_size must be positive")
        grid = tuple(float(a) for a in self.alpha_grid)
        if 0.0 not in grid or any(not 0.0 <= a <= 1.0 for a in grid):
            raise ValueError("alpha_grid must lie in [0, 1] and contain 0")
        object.__setattr__(self, "alpha_grid", tuple(sorted(set(grid))))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @classmethod
    def from_dict(cls, d) -> QuantConfig:
        kw = dict(d)
        if "alpha_grid" in kw:
            kw["alpha_grid"] = tuple(kw["alpha_grid"])
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """Integer codes with per-(row, group) scales and per-input-channel
    equalization scales.  Asymmetric tensors also carry zero points and
    unsigned codes in [0, 2^b - 1]."""

    codes: np.ndarray
    scales: np.ndarray
    channel_scales: np.ndarray
    bits: int
    group_size: int
    zero_points: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    @property
    def symmetric(self) -> bool:
        return self.zero_points is None

    def _expand(self, per_group: np.ndarray) -> np.ndarray:
        return np.repeat(per_group, self.group_size, axis=1)[:, : self.shape[1]]

    def dequantize_scaled(self) -> np.ndarray:
        """Dequantized weights in the equalized (column-scaled) basis."""
        codes = self.codes.astype(np.float64)
        if self.zero_points is not None:
            codes = codes - self._expand(self.zero_points)
        return codes * self._expand(self.scales)

    def dequantize(self) -> np.ndarray:
        return self.dequantize_scaled() / self.channel_scales[None, :]

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        zp_eq = (self.zero_points is None and other.zero_points is None) or (
            self.zero_points is not None
            and other.zero_points is not None
            and np.array_equal(self.zero_points, other.zero_points)
        )
        return (
            self.bits == other.bits
            and self.group_size == other.group_size
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.scales, other.scales)
            and np.array_equal(self.channel_scales, other.channel_scales)
            and zp_eq
        )


def _groups(W: np.ndarray, g: int) -> np.ndarray:
    d_out, d_in = W.shape
    n = -(-d_in // g)
    padded = np.zeros((d_out, n * g))
    padded[:, :d_in] = W
    return padded.reshape(d_out, n, g)


def rtn_quantize(W: np.ndarray, cfg: QuantConfig = QuantConfig(), channel_scales: np.ndarray | None = None) -> QuantizedTensor:
    """Round-to-nearest per group.  ``channel_scales`` is recorded as-is; the
    caller is responsible for having applied it to ``W``."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ShapeMismatch("weights must be a matrix")
    d_out, d_in = W.shape
    G = _groups(W, cfg.group_size)
    cs = np.ones(d_in) if channel_scales is None else channel_scales
    if cfg.symmetric:
        amax = np.abs(G).max(axis=2)
        scales = np.where(amax > 0, amax / cfg.qmax, 1.0)
        codes = np.clip(np.rint(G / scales[..., None]), -cfg.qmax, cfg.qmax)
        zp = None
    else:
        levels = 2 ** cfg.bits - 1
        lo = np.minimum(G.min(axis=2), 0.0)
        hi = np.maximum(G.max(axis=2), 0.0)
        span = hi - lo
        scales = np.where(span > 0, span / levels, 1.0)
        zp = np.rint(-lo / scales)
        codes = np.clip(np.rint(G / scales[..., None]) + zp[..., None], 0, levels)
    codes = codes.reshape(d_out, -1)[:, :d_in].astype(np.int16)
    return QuantizedTensor(codes, scales, cs.astype(np.float64), cfg.bits, cfg.group_size, zp)


class ReconstructionError(NamedTuple):
    absolute: float
    relative: float


def reconstruction_error(W: np.ndarray, Q: QuantizedTensor, X: np.ndarray) -> ReconstructionError:
    """||W_hat X^T - W X^T||_F and its ratio to ||W X^T||_F (0 when that is 0)."""
    W = np.asarray(W, dtype=np.float64)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if W.shape != Q.shape or X.shape[1] != W.shape[1]:
        raise ShapeMismatch(f"W {W.shape}, Q {Q.shape}, X {X.shape}")
    ref = W @ X.T
    err = float(np.linalg.norm(Q.dequantize() @ X.T - ref))
    denom = float(np.linalg.norm(ref))
    return ReconstructionError(err, err / denom if denom > 0 else 0.0)


def equalization_scales(stats: ActivationStats, alpha: float) -> np.ndarray:
    m = np.maximum(stats.mean_abs, STATS_FLOOR)
    s = m ** alpha
    return s / math.exp(float(np.mean(np.log(s))))


class AWQResult(NamedTuple):
    tensor: QuantizedTensor
    alpha: float
    error: float
    errors: dict


def awq_quantize(
    W: np.ndarray, stats: ActivationStats, cfg: QuantConfig, X: np.ndarray
) -> AWQResult:
    """Grid search over s_j = stats_j^alpha (geometric mean 1) minimizing
    calibration output error; the smaller alpha wins ties."""
    W = np.asarray(W, dtype=np.float64)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if stats.channels != W.shape[1] or X.shape[1] != W.shape[1]:
        raise ShapeMismatch(f"stats {stats.channels} / X {X.shape} vs W {W.shape}")
    if np.any(stats.mean_abs == 0):
        warnings.warn(
            f"{int(np.sum(stats.mean_abs == 0))} channel(s) with zero activation; floored at {STATS_FLOOR}",
            ZeroStatsChannel,
            stacklevel=2,
        )
    best: tuple[float, float, QuantizedTensor] | None = None
    errors = {}
    for alpha in cfg.alpha_grid:
        s = equalization_scales(stats, alpha)
        q = rtn_quantize(W * s[None, :], cfg, channel_scales=s)
        err = reconstruction_error(W, q, X).absolute
        errors[alpha] = err
        if best is None or err < best[0]:
            best = (err, alpha, q)
    return AWQResult(best[2], best[1], best[0], errors)


# ---------------------------------------------------------------------------
# file format: b"DSQT" | u32 header length | JSON header | packed codes | float64 arrays

MAGIC = b"DSQT"


def pack_codes(codes: np.ndarray, bits: int, offset: int) -> bytes:
    u = (codes.astype(np.int64).ravel() + offset).astype(np.uint64)
    if u.size and (u.max() >= 2 ** bits):
        raise ValueError("code outside the representable range")
    bitmat = ((u[:, None] >> np.arange(bits, dtype=np.uint64)) & 1).astype(np.uint8)
    return np.packbits(bitmat.ravel(), bitorder="little").tobytes()


def unpack_codes(data: bytes, bits: int, count: int, offset: int) -> np.ndarray:
    flat = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")[: count * bits]
    u = (flat.reshape(count, bits).astype(np.int64) << np.arange(bits)).sum(axis=1)
    return u - offset


def save_quantized(Q: QuantizedTensor, path: str | Path) -> None:
    offset = 0 if not Q.symmetric else 2 ** (Q.bits - 1) - 1
    packed = pack_codes(Q.codes, Q.bits, offset)
    header = {
        "shape": list(Q.shape),
        "bits": Q.bits,
        "group_size": Q.group_size,
        "symmetric": Q.symmetric,
        "code_offset": offset,
        "packed_bytes": len(packed),
        "scales_shape": list(Q.scales.shape),
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(hb)) + hb + packed)
        fh.write(Q.scales.astype("<f8").tobytes())
        fh.write(Q.channel_scales.astype("<f8").tobytes())
        if Q.zero_points is not None:
            fh.write(Q.zero_points.astype("<f8").tobytes())


def load_quantized(path: str | Path) -> QuantizedTensor:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError("not a quantized tensor file")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8 : 8 + hlen])
    pos = 8 + hlen
    d_out, d_in = header["shape"]
    codes = unpack_codes(raw[pos : pos + header["packed_bytes"]], header["bits"], d_out * d_in, header["code_offset"])
    pos += header["packed_bytes"]
    sshape = tuple(header["scales_shape"])
    n = int(np.prod(sshape))

    def take(count, shape):
        nonlocal pos
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
        return arr

    scales = take(n, sshape)
    channel = take(d_in, (d_in,))
    zp = None if header["symmetric"] else take(n, sshape)
    return QuantizedTensor(codes.reshape(d_out, d_in).astype(np.int16), scales, channel, header["bits"], header["group_size"], zp)


# ---------------------------------------------------------------------------
# benchmark

def heavy_tailed_instance(
    seed: int, d_out: int = 64, d_in: int = 128, samples: int = 256, outliers: int = 4
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian weights and activations whose channel magnitudes are
    log-normal with a few dominant outlier channels."""
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, 1.0, (d_out, d_in))
    mags = rng.lognormal(0.0, 0.5, d_in)
    mags[rng.choice(d_in, size=outliers, replace=False)] *= rng.uniform(20.0, 60.0, outliers)
    X = rng.standard_t(3, (samples, d_in)) * mags[None, :]
    return W, X


@dataclass
class BenchmarkRow:
    instance: int
    rtn_error: float
    awq_error: float
    alpha: float


def run_benchmark(instances: int, seed: int = 0, cfg: QuantConfig = QuantConfig(), **shape) -> list[BenchmarkRow]:
    rows = []
    for i in range(instances):
        W, X = heavy_tailed_instance(seed + i, **shape)
        rtn = reconstruction_error(W, rtn_quantize(W, cfg), X).absolute
        res = awq_quantize(W, collect_stats(X), cfg, X)
        rows.append(BenchmarkRow(i, rtn, res.error, res.alpha))
    return rows


def write_benchmark_csv(path: str | Path, rows: Iterable[BenchmarkRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance", "rtn_error", "awq_error", "alpha"])
        for r in rows:
            w.writerow([r.instance, repr(r.rtn_error), repr(r.awq_error), repr(r.alpha)])
