"""Pipeline configuration and the per-subcommand runners behind the CLI.

Every run writes into its own directory under ``out``:
``<command>-<config hash>-seed<seed>`` (suffixed ``-2``, ``-3``... when it
already exists).  Data artifacts are deterministic for a given seed and
config; ``run.json`` carries the metadata, timestamps and artifact digests.
"""
from __future__ import annotations

import hashlib
import json
import os
import platform
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from . import __version__
from .core import (
    DatasetManifest,
    LabelSource,
    ManifestEntry,
    Origin,
    SceneLabel,
    Split,
    dumps,
    iter_jsonl,
    parse_label_text,
    read_frames,
    read_labels,
    write_frames,
    write_jsonl,
    write_labels,
    write_manifest,
)
from .errors import ConfigError, LabelParseError, ParseError, StageError

ENDPOINT_ENV = "DRIVESCENE_ENDPOINT"
SECTIONS = ("paths", "mining", "synth", "prompt_opt", "distill", "quant", "eval")
# fields that never change data artifacts and so stay out of the config hash
UNHASHED = ("out", "endpoint", "workers")


@dataclass
class PipelineConfig:
    seed: int = 0
    workers: int = 4
    out: str = "runs"
    endpoint: str | None = None
    model: str = "vlm"
    paths: dict[str, Any] = field(default_factory=dict)
    mining: dict[str, Any] = field(default_factory=dict)
    synth: dict[str, Any] = field(default_factory=dict)
    prompt_opt: dict[str, Any] = field(default_factory=dict)
    distill: dict[str, Any] = field(default_factory=dict)
    quant: dict[str, Any] = field(default_factory=dict)
    eval: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> PipelineConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown configuration key")
        cfg = cls(**{k: v for k, v in d.items()})
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed", "must be an integer")
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ConfigError("workers", "must be a positive integer")
        for name in SECTIONS:
            if not isinstance(getattr(self, name), dict):
                raise ConfigError(name, "must be a JSON object")

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def digest(self) -> str:
        body = {k: v for k, v in self.to_dict().items() if k not in UNHASHED}
        return hashlib.sha256(dumps(body).encode()).hexdigest()


def load_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> PipelineConfig:
    """Read a JSON config, then apply the environment and flag overrides."""
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError("config", f"file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config", "top level must be a JSON object")
    if os.environ.get(ENDPOINT_ENV):
        data["endpoint"] = os.environ[ENDPOINT_ENV]
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if "." in key:
            section, sub = key.split(".", 1)
            data.setdefault(section, {})
            data[section][sub] = value
        else:
            data[key] = value
    return PipelineConfig.from_dict(data)


def _section(cfg_cls, data: Mapping[str, Any], path: str):
    try:
        if hasattr(cfg_cls, "from_dict"):
            return cfg_cls.from_dict(data)
        return cfg_cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def _require_path(cfg: PipelineConfig, key: str) -> Path:
    value = cfg.paths.get(key)
    if not value:
        raise ConfigError(f"paths.{key}", "required for this command")
    p = Path(value)
    if not p.exists():
        raise ConfigError(f"paths.{key}", f"not found: {p}")
    return p


def _optional_path(cfg: PipelineConfig, key: str) -> Path | None:
    return _require_path(cfg, key) if cfg.paths.get(key) else None


# ---------------------------------------------------------------------------
# run directory and metadata

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """A run-scoped output directory plus its metadata."""

    METADATA = "run.json"
    last: Run | None = None

    def __init__(self, command: str, cfg: PipelineConfig):
        self.command = command
        self.cfg = cfg
        base = Path(cfg.out) / f"{command}-{cfg.digest()[:12]}-seed{cfg.seed}"
        path, k = base, 1
        while path.exists():
            k += 1
            path = base.with_name(f"{base.name}-{k}")
        path.mkdir(parents=True)
        self.dir = path
        self.started = time.time()
        self.extra: dict[str, Any] = {}
        Run.last = self

    def path(self, name: str) -> Path:
        p = self.dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_json(self, name: str, obj: Any) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        return p

    def digests(self) -> dict[str, str]:
        out = {}
        for p in sorted(self.dir.rglob("*")):
            if p.is_file() and p.name != self.METADATA:
                out[p.relative_to(self.dir).as_posix()] = sha256_file(p)
        return out

    def finish(self, status: str = "ok", error: str | None = None) -> dict[str, Any]:
        meta = {
            "command": self.command,
            "status": status,
            "seed": self.cfg.seed,
            "config_hash": self.cfg.digest(),
            "config": self.cfg.to_dict(),
            "versions": {
                "drivescene": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
            },
            "started_at": self.started,
            "finished_at": time.time(),
            "artifacts": self.digests(),
            **self.extra,
        }
        if error:
            meta["error"] = error
        self.write_json(self.METADATA, meta)
        return meta


def _stage(name: str, fn: Callable, *args, **kw):
    """Run one stage; module errors are re-raised tagged with the stage."""
    try:
        return fn(*args, **kw)
    except (ConfigError, StageError):
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def _client(cfg: PipelineConfig, required: bool = True):
    from .inference import InferenceClient

    if not cfg.endpoint:
        if required:
            raise ConfigError("endpoint", f"required (flag, config or ${ENDPOINT_ENV})")
        return None
    return InferenceClient(cfg.endpoint, max_in_flight=cfg.workers)


def _parse_or_empty(text: str, **kw) -> SceneLabel:
    try:
        return parse_label_text(text, **kw)
    except LabelParseError:
        return SceneLabel(confidence=0.0, source=kw.get("source", LabelSource.VLM), flags=frozenset({"unparsed"}))


def _library(cfg: PipelineConfig):
    from .prompts import default_library, load_library

    p = _optional_path(cfg, "library")
    return load_library(p) if p else default_library()


# ---------------------------------------------------------------------------
# mine

def run_mine(cfg: PipelineConfig) -> Run:
    from .mining import (
        ConsistencyRule,
        DEFAULT_RULES,
        FusionPolicy,
        WindowConfig,
        mine_sequences,
        simulate_drive,
        split_sequences,
    )
    from .prompts import compose_prompt, derive_scene_tags

    m = cfg.mining
    window = _section(WindowConfig, m.get("window", {}), "mining.window")
    policy = _section(FusionPolicy, m.get("fusion", {}), "mining.fusion")
    if "rules" in m:
        try:
            rules = tuple(ConsistencyRule(**r) for r in m["rules"])
        except (TypeError, ValueError) as exc:
            raise ConfigError("mining.rules", str(exc)) from None
    else:
        rules = DEFAULT_RULES
    vlm_conf = float(m.get("vlm_confidence", 0.9))
    simulate = m.get("simulate")

    run_dir = None
    truth = corrupted = None
    if simulate:
        try:
            n = int(simulate.get("frames", 500))
            rate = float(simulate.get("corruption", 0.05))
            truth = SceneLabel.from_dict(simulate.get("truth", {"recommended_speed_kmh": 60.0, "traffic_light": "green"}))
        except (TypeError, ValueError) as exc:
            raise ConfigError("mining.simulate", str(exc)) from None
        frames, vlm, expert, corrupted = simulate_drive(n, truth, rate, cfg.seed)
        run_dir = Run("mine", cfg)
        write_frames(run_dir.path("inputs/frames.jsonl"), frames)
        write_labels(run_dir.path("inputs/vlm.jsonl"), vlm)
        write_labels(run_dir.path("inputs/expert.jsonl"), expert)
    else:
        frames_p = _require_path(cfg, "frames")
        expert_p = _require_path(cfg, "expert_labels")
        vlm_p = _optional_path(cfg, "vlm_labels")
        if vlm_p is None and not cfg.endpoint:
            raise ConfigError("paths.vlm_labels", "required unless an inference endpoint is configured")
        library = _library(cfg) if vlm_p is None else None
        frames = read_frames(frames_p)
        expert = read_labels(expert_p)
        run_dir = Run("mine", cfg)
        if vlm_p is not None:
            vlm = read_labels(vlm_p)
        else:
            from .inference import InferenceRequest

            # pass 1: tags from the expert stream; pass 2: composed prompt
            reqs = []
            for f in frames:
                tags = derive_scene_tags(expert[f.frame_id]) if f.frame_id in expert else frozenset()
                reqs.append(InferenceRequest(compose_prompt(tags, library), f.image_ref, cfg.model, f.frame_id))
            with _client(cfg) as client:
                responses = _stage("vlm_inference", client.infer_many, reqs)
            vlm = {
                r.request_id: _parse_or_empty(r.text, source=LabelSource.VLM, confidence=vlm_conf)
                for r in responses
            }
            write_jsonl(
                run_dir.path("vlm_responses.jsonl"),
                ({"frame_id": q.request_id, "image_ref": q.image_ref, "prompt": q.prompt, "text": r.text} for q, r in zip(reqs, responses)),
            )

    sequences = [(seq, vlm, expert) for seq in split_sequences(frames)]
    mined, stats = _stage("mining", mine_sequences, sequences, window, rules, policy, cfg.workers)
    rows, entries = [], []
    for seq in mined:
        for lf in seq:
            if lf.fused is not None:
                rows.append({"frame_id": lf.frame.frame_id, "image_ref": lf.frame.image_ref, "label": lf.fused.to_dict()})
                entries.append(ManifestEntry(lf.frame.image_ref, lf.fused, Origin.REAL))
    write_jsonl(run_dir.path("mined.jsonl"), rows)
    write_manifest(DatasetManifest(m.get("dataset", "mined"), Split.TRAIN, entries), run_dir.path("manifest.jsonl"))
    stats_d = stats.to_dict()
    if corrupted is not None:
        fused_by_id = {lf.frame.frame_id: lf.fused for seq in mined for lf in seq}
        key = (truth.traffic_light, truth.obstacles_cones, truth.crossroad)
        restored = sum(
            1
            for fid in corrupted
            if fused_by_id[fid] is not None
            and (fused_by_id[fid].traffic_light, fused_by_id[fid].obstacles_cones, fused_by_id[fid].crossroad) == key
        )
        stats_d.update(corrupted=len(corrupted), restored=restored, restored_fraction=restored / len(corrupted) if corrupted else 1.0)
    run_dir.write_json("stats.json", stats_d)
    run_dir.extra["stage_order"] = list(stats.stage_order)
    return run_dir


# ---------------------------------------------------------------------------
# synthesize

def run_synth(cfg: PipelineConfig) -> Run:
    from .synth import (
        GenerationConfig,
        ImagePair,
        emit_labels,
        filter_pairs,
        generate_scenes,
        save_spec,
    )

    s = cfg.synth
    pairs_p = _optional_path(cfg, "pairs")
    if pairs_p is not None:
        pairs = []
        for lineno, row in iter_jsonl(pairs_p):
            try:
                label = SceneLabel.from_dict(row["label"]) if row.get("label") else None
                pairs.append(ImagePair(row["caption"], row["signature"], label))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad pair row: {exc}", lineno) from None
        run_dir = Run("synthesize", cfg)
        kept, stats = filter_pairs(pairs, float(s.get("jaccard_threshold", 0.9)))
        write_jsonl(
            run_dir.path("pairs.jsonl"),
            ({"caption": p.caption, "signature": p.signature, "label": p.label.to_dict() if p.label else None} for p in kept),
        )
        run_dir.write_json("filter_stats.json", stats.to_dict())
        return run_dir

    gen = _section(GenerationConfig, s.get("generation", {}), "synth.generation")
    count = int(s.get("count", 100))
    if count < 0:
        raise ConfigError("synth.count", "must be non-negative")
    try:
        gen.check_feasible()
    except Exception as exc:
        raise ConfigError("synth.generation", str(exc)) from None
    run_dir = Run("synthesize", cfg)
    specs = _stage("generate", generate_scenes, gen, [cfg.seed + i for i in range(count)], cfg.workers)
    rows, entries = [], []
    for i, spec in enumerate(specs):
        name = f"scene-{i:05d}"
        save_spec(spec, run_dir.path(f"specs/{name}.json"))
        label, text = emit_labels(spec)
        ref = f"rendered/{name}.png"
        rows.append({"image_ref": ref, "spec": f"specs/{name}.json", "label": label.to_dict(), "text": text})
        entries.append(ManifestEntry(ref, label, Origin.RENDERED))
    write_jsonl(run_dir.path("labels.jsonl"), rows)
    write_manifest(DatasetManifest(s.get("dataset", "rendered"), Split.TRAIN, entries), run_dir.path("manifest.jsonl"))
    return run_dir


# ---------------------------------------------------------------------------
# prompt-opt

def _read_eval_items(path: Path):
    from .prompts import EvalItem, make_tags

    items = []
    for lineno, row in iter_jsonl(path):
        try:
            ref = SceneLabel.from_dict(row["label"]) if "label" in row else parse_label_text(row["text"])
            tags = make_tags(row["tags"]) if "tags" in row else None
            items.append(EvalItem(row["image_ref"], ref, tags))
        except (KeyError, TypeError, ValueError, LabelParseError) as exc:
            raise ParseError(f"bad eval row: {exc}", lineno) from None
    return items


def run_prompt_opt(cfg: PipelineConfig) -> Run:
    from .inference import label_fn
    from .prompts import average_scorer, optimize_library, save_library

    items = _read_eval_items(_require_path(cfg, "eval_set"))
    library = _library(cfg)
    p = cfg.prompt_opt
    budget = int(p.get("budget", 50))
    if budget < 1:
        raise ConfigError("prompt_opt.budget", "must be >= 1")
    client = _client(cfg)
    run_dir = Run("prompt-opt", cfg)
    with client:
        scorer = average_scorer(label_fn(client, cfg.model), max_workers=cfg.workers)
        best, trace = _stage(
            "optimize", optimize_library, library, items, scorer, budget, cfg.seed, float(p.get("epsilon", 1e-4))
        )
    save_library(best, run_dir.path("library.json"))
    trace.write(run_dir.path("trace.jsonl"))
    run_dir.write_json(
        "summary.json",
        {
            "initial_score": trace.initial_score,
            "final_score": trace.final_score,
            "rounds": len(trace.entries),
            "accepted": sum(e.accepted for e in trace.entries),
            "library_version": best.version,
        },
    )
    return run_dir


# ---------------------------------------------------------------------------
# distill

def run_distill(cfg: PipelineConfig) -> Run:
    from .distill import DistillConfig, Grammar, distill_dataset, run_paired_seed, train_base, ToyModelParams, write_loss_csv

    d = dict(cfg.distill)
    n_seeds = int(d.pop("seeds", 1))
    if n_seeds < 1:
        raise ConfigError("distill.seeds", "must be >= 1")
    dcfg = _section(DistillConfig, d, "distill")
    run_dir = Run("distill", cfg)
    results = []
    for seed in range(cfg.seed, cfg.seed + n_seeds):
        r = _stage("distill", run_paired_seed, dcfg, seed)
        write_loss_csv(run_dir.path(f"seed{seed}/loss_kd.csv"), r.kd_losses)
        write_loss_csv(run_dir.path(f"seed{seed}/loss_hard.csv"), r.hard_losses)
        results.append(r.summary())
    # soft labels of the first seed's teacher on its student corpus
    grammar = Grammar.random(dcfg.model.vocab, cfg.seed)
    big = grammar.sample(dcfg.teacher_corpus, dcfg.seq_len, cfg.seed + 1, dcfg.prompt_len)
    small = grammar.sample(dcfg.student_corpus, dcfg.seq_len, cfg.seed + 2, dcfg.prompt_len)
    teacher, _ = train_base(ToyModelParams.init(dcfg.model, cfg.seed + 4), big, dcfg.teacher_steps, dcfg.lr, cfg.seed + 5, dcfg.batch_size)
    distill_dataset(teacher, small).save(run_dir.path("soft_labels.bin"))
    run_dir.write_json(
        "results.json",
        {"seeds": results, "kd_not_worse": sum(r["kd_ce"] <= r["hard_ce"] for r in results), "total": len(results)},
    )
    return run_dir


# ---------------------------------------------------------------------------
# quantize

def run_quant(cfg: PipelineConfig) -> Run:
    from .quant import (
        QuantConfig,
        awq_quantize,
        collect_stats,
        reconstruction_error,
        rtn_quantize,
        run_benchmark,
        save_quantized,
        write_benchmark_csv,
    )

    q = dict(cfg.quant)
    instances = int(q.pop("instances", 100))
    shape = q.pop("shape", {})
    qcfg = _section(QuantConfig, q, "quant")
    w_p = _optional_path(cfg, "weights")
    if w_p is not None:
        x_p = _require_path(cfg, "calibration")
        try:
            W, X = np.load(w_p), np.load(x_p)
        except ValueError as exc:
            raise ConfigError("paths.weights", str(exc)) from None
        run_dir = Run("quantize", cfg)
        res = _stage("awq", awq_quantize, W, collect_stats(X), qcfg, X)
        rtn = reconstruction_error(W, rtn_quantize(W, qcfg), X)
        awq = reconstruction_error(W, res.tensor, X)
        save_quantized(res.tensor, run_dir.path("quantized.bin"))
        run_dir.write_json(
            "result.json",
            {
                "alpha": res.alpha,
                "awq_error": awq.absolute,
                "awq_relative": awq.relative,
                "rtn_error": rtn.absolute,
                "rtn_relative": rtn.relative,
            },
        )
        return run_dir
    run_dir = Run("quantize", cfg)
    rows = _stage("benchmark", run_benchmark, instances, cfg.seed, qcfg, **shape)
    write_benchmark_csv(run_dir.path("benchmark.csv"), rows)
    run_dir.write_json(
        "summary.json",
        {
            "instances": len(rows),
            "awq_strictly_better": sum(r.awq_error < r.rtn_error for r in rows),
            "awq_not_worse": sum(r.awq_error <= r.rtn_error for r in rows),
        },
    )
    return run_dir


# ---------------------------------------------------------------------------
# evaluate / report

def run_eval(cfg: PipelineConfig) -> Run:
    from .evaluation import row_label, build_report, join_on_image_ref, labels_to_tasks, render_table
    from .inference import InferenceRequest
    from .prompts import compose_prompt, make_tags

    refs_p = _require_path(cfg, "refs")
    preds_p = _optional_path(cfg, "preds")
    if preds_p is not None:
        run_dir = Run("evaluate", cfg)
        preds, refs, missing = join_on_image_ref(refs_p, preds_p)
        model_id = cfg.eval.get("model_id", preds_p.name)
    else:
        library = _library(cfg)
        rows = [row for _, row in iter_jsonl(refs_p)]
        for i, row in enumerate(rows, 1):
            if "image_ref" not in row:
                raise ParseError("reference row without image_ref", i)
        refs = [row_label(r) for r in rows]
        client = _client(cfg)
        run_dir = Run("evaluate", cfg)
        reqs = [
            InferenceRequest(compose_prompt(make_tags(r.get("tags", ())), library), r["image_ref"], cfg.model, f"{i:06d}")
            for i, r in enumerate(rows)
        ]
        with client:
            responses = _stage("inference", client.infer_many, reqs)
        preds = [_parse_or_empty(r.text) for r in responses]
        write_jsonl(
            run_dir.path("predictions.jsonl"),
            ({"image_ref": q.image_ref, "text": r.text} for q, r in zip(reqs, responses)),
        )
        missing = 0
        model_id = cfg.eval.get("model_id", cfg.model)
    provenance = {"dataset": cfg.eval.get("dataset", refs_p.name), "model_id": model_id, "missing_predictions": missing}
    report = _stage("report", build_report, labels_to_tasks(preds, refs), provenance)
    run_dir.write_json("report.json", report.to_dict())
    run_dir.path("table.txt").write_text(render_table([report], [model_id]) + "\n", encoding="utf-8")
    run_dir.extra["average"] = report.average
    return run_dir


def run_report(cfg: PipelineConfig) -> Run:
    from .evaluation import EvalReport, render_table

    paths = cfg.eval.get("reports") or []
    if not paths:
        raise ConfigError("eval.reports", "at least one report.json is required")
    reports = []
    for p in paths:
        try:
            reports.append(EvalReport.from_dict(json.loads(Path(p).read_text(encoding="utf-8"))))
        except FileNotFoundError:
            raise ConfigError("eval.reports", f"not found: {p}") from None
        except (KeyError, ValueError) as exc:
            raise ConfigError("eval.reports", f"{p}: {exc}") from None
    names = cfg.eval.get("names") or [r.provenance.get("model_id", f"run{i}") for i, r in enumerate(reports)]
    if len(names) != len(reports):
        raise ConfigError("eval.names", "one name per report is required")
    run_dir = Run("report", cfg)
    table = render_table(reports, names)
    run_dir.path("table.txt").write_text(table + "\n", encoding="utf-8")
    run_dir.extra["table"] = table
    return run_dir


RUNNERS: dict[str, Callable[[PipelineConfig], Run]] = {
    "mine": run_mine,
    "synthesize": run_synth,
    "prompt-opt": run_prompt_opt,
    "distill": run_distill,
    "quantize": run_quant,
    "evaluate": run_eval,
    "report": run_report,
}
