"""Per-task metrics and the four-task evaluation report.

Recommended speed is scored with sMAPE and R^2; traffic lights, obstacles and
crossroad with precision / recall / F1.  The report ``average`` is the mean of
the speed R^2 and the three F1 scores over the tasks that are present.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Hashable, Mapping, NamedTuple, Sequence

from .core import SceneLabel, iter_jsonl, parse_label_text
from .errors import DegenerateVariance, LabelParseError, LengthMismatch, NoTasks, ParseError

TASKS = ("recommended_speed", "traffic_lights", "obstacles", "crossroad")
TASK_TITLES = {
    "recommended_speed": "Recommended Speed",
    "traffic_lights": "Traffic Lights",
    "obstacles": "Obstacles",
    "crossroad": "Crossroad",
}
TASK_METRICS = {
    "recommended_speed": ("smape", "r2"),
    "traffic_lights": ("precision", "recall", "f1"),
    "obstacles": ("precision", "recall", "f1"),
    "crossroad": ("precision", "recall", "f1"),
}
METRIC_TITLES = {"smape": "sMAPE", "r2": "R2", "precision": "P", "recall": "R", "f1": "F1"}
AVERAGE_METRIC = {"recommended_speed": "r2", "traffic_lights": "f1", "obstacles": "f1", "crossroad": "f1"}


def _check_lengths(preds: Sequence, refs: Sequence) -> None:
    if len(preds) != len(refs):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(refs)} references")
    if len(preds) == 0:
        raise LengthMismatch("no prediction/reference pairs")


def smape(preds: Sequence[float], refs: Sequence[float]) -> float:
    """Symmetric MAPE in [0, 2]; a pair where both values are 0 contributes 0."""
    _check_lengths(preds, refs)
    total = 0.0
    for p, y in zip(preds, refs):
        denom = (abs(y) + abs(p)) / 2.0
        if denom > 0:
            total += abs(p - y) / denom
    return total / len(preds)


def _r_squared(preds: Sequence[float], refs: Sequence[float]) -> tuple[float, bool]:
    _check_lengths(preds, refs)
    if len(refs) < 2:
        raise LengthMismatch("R^2 needs at least two pairs")
    mean = math.fsum(refs) / len(refs)
    ss_tot = math.fsum((y - mean) ** 2 for y in refs)
    ss_res = math.fsum((y - p) ** 2 for p, y in zip(preds, refs))
    if ss_tot == 0:
        return (1.0, False) if ss_res == 0 else (-math.inf, True)
    return 1.0 - ss_res / ss_tot, False


def r_squared(preds: Sequence[float], refs: Sequence[float]) -> float:
    """Coefficient of determination.

    With constant references the value is 1 for an exact fit and ``-inf``
    otherwise; the latter also emits a :class:`DegenerateVariance` warning.
    """
    value, degenerate = _r_squared(preds, refs)
    if degenerate:
        warnings.warn("reference values have zero variance", DegenerateVariance, stacklevel=2)
    return value


class PRF(NamedTuple):
    precision: float
    recall: float
    f1: float
    flags: frozenset[str] = frozenset()


def _binary_prf(preds: Sequence[Hashable], refs: Sequence[Hashable], positive: Hashable) -> PRF:
    tp = fp = fn = 0
    for p, y in zip(preds, refs):
        if p == positive and y == positive:
            tp += 1
        elif p == positive:
            fp += 1
        elif y == positive:
            fn += 1
    flags = set()
    if tp + fp == 0:
        precision = 1.0
        flags.add("no_predicted_positives")
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall = 1.0
        flags.add("no_reference_positives")
    else:
        recall = tp / (tp + fn)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return PRF(precision, recall, f1, frozenset(flags))


def prf1(
    preds: Sequence[Hashable],
    refs: Sequence[Hashable],
    positive_class: Hashable | None = None,
) -> PRF:
    """Precision, recall and F1.

    With ``positive_class`` the binary scores for that class are returned.
    Without it, scores are macro-averaged over the classes present in
    ``refs``.
    """
    _check_lengths(preds, refs)
    if positive_class is not None:
        return _binary_prf(preds, refs, positive_class)
    classes = sorted(set(refs), key=repr)
    per_class = [_binary_prf(preds, refs, c) for c in classes]
    n = len(per_class)
    flags = frozenset().union(*(r.flags for r in per_class))
    return PRF(
        math.fsum(r.precision for r in per_class) / n,
        math.fsum(r.recall for r in per_class) / n,
        math.fsum(r.f1 for r in per_class) / n,
        flags,
    )


@dataclass(frozen=True)
class TaskPredictions:
    task: str
    preds: tuple
    refs: tuple

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        object.__setattr__(self, "preds", tuple(self.preds))
        object.__setattr__(self, "refs", tuple(self.refs))
        _check_lengths(self.preds, self.refs)

    def metrics(self) -> tuple[dict[str, float | None], set[str]]:
        flags: set[str] = set()
        if self.task == "recommended_speed":
            preds = [float(p) for p in self.preds]
            refs = [float(y) for y in self.refs]
            out: dict[str, float | None] = {"smape": smape(preds, refs)}
            if len(refs) >= 2:
                r2, degenerate = _r_squared(preds, refs)
                if degenerate:
                    flags.add("recommended_speed.r2:degenerate_variance")
                    r2 = None
            else:
                flags.add("recommended_speed.r2:too_few_pairs")
                r2 = None
            out["r2"] = r2
            return out, flags
        positive = None if self.task == "traffic_lights" else True
        res = prf1(self.preds, self.refs, positive)
        flags.update(f"{self.task}:{f}" for f in res.flags)
        return {"precision": res.precision, "recall": res.recall, "f1": res.f1}, flags


@dataclass(frozen=True)
class EvalReport:
    metrics: Mapping[str, Mapping[str, float | None]]
    average: float
    provenance: Mapping[str, Any] = field(default_factory=dict)
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "metrics": {t: dict(m) for t, m in self.metrics.items()},
            "average": self.average,
            "provenance": dict(self.provenance),
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> EvalReport:
        return cls(
            metrics={t: dict(m) for t, m in d["metrics"].items()},
            average=float(d["average"]),
            provenance=dict(d.get("provenance", {})),
            flags=tuple(d.get("flags", ())),
        )

    def recompute_average(self) -> float:
        return report_average(self.metrics)


def report_average(metrics: Mapping[str, Mapping[str, float | None]]) -> float:
    values = []
    for task in TASKS:
        if task in metrics:
            v = metrics[task].get(AVERAGE_METRIC[task])
            if v is not None and math.isfinite(v):
                values.append(v)
    if not values:
        raise NoTasks("no finite headline metric among the present tasks")
    return math.fsum(values) / len(values)


def build_report(
    tasks: Mapping[str, TaskPredictions | Mapping[str, float] | None],
    provenance: Mapping[str, Any] | None = None,
) -> EvalReport:
    """Assemble a report from per-task predictions or precomputed metrics.

    A task mapped to ``None`` (or missing) is treated as absent.
    """
    metrics: dict[str, dict[str, float | None]] = {}
    flags: set[str] = set()
    for task, value in tasks.items():
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        if value is None:
            continue
        if isinstance(value, TaskPredictions):
            m, f = value.metrics()
            flags |= f
        else:
            m = {k: (None if v is None else float(v)) for k, v in value.items()}
        metrics[task] = m
    if not metrics:
        raise NoTasks("no tasks present")
    ordered = {t: metrics[t] for t in TASKS if t in metrics}
    return EvalReport(ordered, report_average(ordered), dict(provenance or {}), tuple(sorted(flags)))


def labels_to_tasks(
    preds: Sequence[SceneLabel], refs: Sequence[SceneLabel]
) -> dict[str, TaskPredictions | None]:
    """Turn aligned label lists into per-task predictions.

    Speed pairs are formed where the reference has a speed; a missing
    predicted speed counts as 0 km/h.
    """
    _check_lengths(preds, refs)
    speed_pairs = [
        (p.recommended_speed_kmh or 0.0, y.recommended_speed_kmh)
        for p, y in zip(preds, refs)
        if y.recommended_speed_kmh is not None
    ]
    tasks: dict[str, TaskPredictions | None] = {}
    if speed_pairs:
        sp, sr = zip(*speed_pairs)
        tasks["recommended_speed"] = TaskPredictions("recommended_speed", sp, sr)
    else:
        tasks["recommended_speed"] = None
    tasks["traffic_lights"] = TaskPredictions(
        "traffic_lights",
        [p.traffic_light.value for p in preds],
        [y.traffic_light.value for y in refs],
    )
    tasks["obstacles"] = TaskPredictions(
        "obstacles", [p.obstacles_cones for p in preds], [y.obstacles_cones for y in refs]
    )
    tasks["crossroad"] = TaskPredictions(
        "crossroad", [p.crossroad for p in preds], [y.crossroad for y in refs]
    )
    return tasks


def row_label(row: Mapping[str, Any]) -> SceneLabel:
    if "label" in row:
        return SceneLabel.from_dict(row["label"])
    try:
        return parse_label_text(row["text"])
    except LabelParseError:
        return SceneLabel()


def join_on_image_ref(
    refs_path: str | Path, preds_path: str | Path
) -> tuple[list[SceneLabel], list[SceneLabel], int]:
    """Load reference and prediction JSONL files joined on ``image_ref``.

    Returns aligned (preds, refs) in reference-file order and the number of
    references without a prediction (scored as an empty label).
    """
    preds_by_ref: dict[str, SceneLabel] = {}
    for lineno, row in iter_jsonl(preds_path):
        if "image_ref" not in row:
            raise ParseError("prediction row without image_ref", lineno)
        preds_by_ref[row["image_ref"]] = row_label(row)
    preds, refs, missing = [], [], 0
    for lineno, row in iter_jsonl(refs_path):
        if "image_ref" not in row:
            raise ParseError("reference row without image_ref", lineno)
        refs.append(row_label(row))
        pred = preds_by_ref.get(row["image_ref"])
        if pred is None:
            missing += 1
            pred = SceneLabel()
        preds.append(pred)
    return preds, refs, missing


def render_table(reports: Sequence[EvalReport], names: Sequence[str] | None = None) -> str:
    """Aligned text table: task/metric rows, one column per report."""
    if names is None:
        names = [str(r.provenance.get("model_id", f"run{i}")) for i, r in enumerate(reports)]
    header = ["", ""] + list(names)
    rows = [header]
    for task in TASKS:
        if not any(task in r.metrics for r in reports):
            continue
        for j, metric in enumerate(TASK_METRICS[task]):
            cells = [TASK_TITLES[task] if j == 0 else "", METRIC_TITLES[metric]]
            for r in reports:
                v = r.metrics.get(task, {}).get(metric)
                cells.append("-" if v is None else f"{v:.3f}")
            rows.append(cells)
    rows.append(["Average", ""] + [f"{r.average:.3f}" for r in reports])
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
    lines = []
    for i, row in enumerate(rows):
        if i > 0 and row[0]:
            lines.append(rule)
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"
