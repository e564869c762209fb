"""Pseudo-label mining over recorded drives.

Per-frame labels from the VLM and from expert detectors are cleaned in a
fixed order:

1. temporal vote: each categorical field is replaced by the strict majority
   of a speed-dependent window centred on the frame;
2. motion consistency: labels that contradict the ego motion are annotated
   (confidence penalty or a ``suspect:<field>`` flag), never rewritten;
3. fusion: the two sources are merged field by field, or the frame is
   dropped when neither side is confident enough.
"""
from __future__ import annotations

import math
import random
import statistics
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

from .core import (
    FrameRecord,
    LabeledFrame,
    LabelSource,
    MotionState,
    SceneLabel,
    TrafficLight,
    validate_sequence,
)
from .errors import AlignmentError, MisalignedWindow

STAGE_ORDER = ("temporal_vote", "motion_consistency", "fusion")
CATEGORICAL_FIELDS = ("traffic_light", "obstacles_cones", "crossroad")
LABEL_FIELDS = ("recommended_speed_kmh", "traffic_light", "obstacles_cones", "crossroad")


@dataclass(frozen=True)
class WindowConfig:
    reference_distance_m: float = 10.0
    min_frames: int = 3
    max_frames: int = 31
    min_speed_mps: float = 1.0

    def __post_init__(self):
        if self.reference_distance_m <= 0 or self.min_speed_mps <= 0:
            raise ValueError("reference_distance_m and min_speed_mps must be positive")
        if self.min_frames < 3 or self.min_frames % 2 == 0 or self.max_frames % 2 == 0:
            raise ValueError("min_frames and max_frames must be odd, min_frames >= 3")
        if self.min_frames > self.max_frames:
            raise ValueError("min_frames must not exceed max_frames")


def window_length(speed_mps: float, fps: float, cfg: WindowConfig = WindowConfig()) -> int:
    """Frames spanning ``cfg.reference_distance_m`` of travel, odd and clamped."""
    if not fps > 0:
        raise ValueError("fps must be positive")
    raw = fps * cfg.reference_distance_m / max(speed_mps, cfg.min_speed_mps)
    n = math.floor(raw + 0.5)
    if n % 2 == 0:
        n += 1
    return min(max(n, cfg.min_frames), cfg.max_frames)


def _strict_majority(values: Sequence[Any]) -> Any | None:
    value, count = Counter(values).most_common(1)[0]
    return value if 2 * count > len(values) else None


def _vote(window: Sequence[SceneLabel], center: int) -> tuple[SceneLabel, tuple[str, ...]]:
    label = window[center]
    changes: dict[str, Any] = {}
    for name in CATEGORICAL_FIELDS:
        winner = _strict_majority([getattr(l, name) for l in window])
        if winner is not None and winner != getattr(label, name):
            changes[name] = winner
    if "obstacles_cones" in changes:
        changes["cone_count"] = None
    speeds = [l.recommended_speed_kmh for l in window if l.recommended_speed_kmh is not None]
    if 2 * len(speeds) > len(window):
        median = float(statistics.median(speeds))
        if median != label.recommended_speed_kmh:
            changes["recommended_speed_kmh"] = median
    replaced = tuple(n for n in CATEGORICAL_FIELDS if n in changes)
    return (replace(label, **changes) if changes else label), replaced


def temporal_vote(window: Sequence[SceneLabel], center_index: int) -> SceneLabel:
    """Replace disagreeing categorical fields of the center label by the window majority.

    Only a strict majority (more than half the window) overrides the center;
    otherwise the center value is kept.  The speed becomes the window median
    when more than half the frames carry one.
    """
    if not 0 <= center_index < len(window):
        raise IndexError("center_index outside window")
    return _vote(window, center_index)[0]


def _window_bounds(i: int, n: int, total: int) -> tuple[int, int]:
    half = n // 2
    return max(0, i - half), min(total, i + half + 1)


# ---------------------------------------------------------------------------
# motion consistency

PENALIZE = "penalize_confidence"
MARK_SUSPECT = "mark_suspect"


@dataclass(frozen=True)
class ConsistencyRule:
    """One motion-consistency rule.

    ``kind`` selects the check:

    * ``motion_conflict`` - ``field == params["value"]`` while every frame of
      the window is in one of ``params["motion_states"]``;
    * ``persistence_distance`` - ``field`` stays set over a run covering more
      than ``params["max_distance_m"]`` of travel;
    * ``isolated`` - ``field`` is set for a run of at most ``params["max_run"]``
      frames.
    """

    name: str
    field: str
    kind: str
    action: str
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.field not in LABEL_FIELDS:
            raise ValueError(f"rule {self.name}: unknown label field {self.field!r}")
        if self.kind not in ("motion_conflict", "persistence_distance", "isolated"):
            raise ValueError(f"rule {self.name}: unknown kind {self.kind!r}")
        if self.action not in (PENALIZE, MARK_SUSPECT):
            raise ValueError(f"rule {self.name}: unknown action {self.action!r}")


DEFAULT_RULES: tuple[ConsistencyRule, ...] = (
    ConsistencyRule(
        "red_while_moving",
        "traffic_light",
        "motion_conflict",
        PENALIZE,
        {
            "value": TrafficLight.RED,
            "motion_states": (MotionState.CRUISING, MotionState.ACCELERATING),
            "factor": 0.5,
        },
    ),
    ConsistencyRule(
        "endless_crossroad", "crossroad", "persistence_distance", MARK_SUSPECT, {"max_distance_m": 200.0}
    ),
    ConsistencyRule("cone_spike", "obstacles_cones", "isolated", MARK_SUSPECT, {"max_run": 1}),
)


def _runs(flags: Sequence[bool]) -> list[tuple[int, int]]:
    runs, start = [], None
    for i, on in enumerate(flags):
        if on and start is None:
            start = i
        elif not on and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(flags)))
    return runs


def _travel_m(frames: Sequence[FrameRecord], start: int, stop: int) -> float:
    dist = 0.0
    for a, b in zip(frames[start:stop - 1], frames[start + 1:stop]):
        dist += (b.timestamp_ms - a.timestamp_ms) / 1000.0 * (a.ego_speed_mps + b.ego_speed_mps) / 2
    return dist


def _apply_action(label: SceneLabel, rule: ConsistencyRule) -> SceneLabel:
    if rule.action == PENALIZE:
        factor = float(rule.params.get("factor", 0.5))
        return replace(label, confidence=label.confidence * factor).with_flag(f"penalized:{rule.name}")
    return label.with_flag(f"suspect:{rule.field}")


def check_motion_consistency(
    labels: Sequence[SceneLabel],
    frames: Sequence[FrameRecord],
    rules: Sequence[ConsistencyRule] = DEFAULT_RULES,
    window_sizes: Sequence[int] | None = None,
) -> list[SceneLabel]:
    """Annotate labels that contradict the ego vehicle's motion.

    Labels and frames must be aligned.  ``window_sizes[i]`` gives the window
    used by ``motion_conflict`` rules around frame ``i``; by default the whole
    input is one window.
    """
    if len(labels) != len(frames):
        raise MisalignedWindow(f"{len(labels)} labels vs {len(frames)} frames")
    if window_sizes is not None and len(window_sizes) != len(labels):
        raise MisalignedWindow("window_sizes must align with labels")
    total = len(labels)
    out = list(labels)
    for rule in rules:
        values = [getattr(l, rule.field) for l in labels]
        if rule.kind == "motion_conflict":
            target = rule.params["value"]
            states = {MotionState(s) for s in rule.params["motion_states"]}
            moving = [f.motion_state in states for f in frames]
            for i in range(total):
                if values[i] != target:
                    continue
                lo, hi = (0, total) if window_sizes is None else _window_bounds(i, window_sizes[i], total)
                if all(moving[lo:hi]):
                    out[i] = _apply_action(out[i], rule)
        elif rule.kind == "persistence_distance":
            limit = float(rule.params["max_distance_m"])
            for start, stop in _runs([bool(v) for v in values]):
                if _travel_m(frames, start, stop) > limit:
                    for i in range(start, stop):
                        out[i] = _apply_action(out[i], rule)
        else:
            max_run = int(rule.params.get("max_run", 1))
            if total <= max_run:
                continue
            for start, stop in _runs([bool(v) for v in values]):
                if stop - start <= max_run:
                    for i in range(start, stop):
                        out[i] = _apply_action(out[i], rule)
    return out


# ---------------------------------------------------------------------------
# fusion

@dataclass(frozen=True)
class FusionPolicy:
    expert_threshold: float = 0.7
    vlm_threshold: float = 0.5
    ownership: Mapping[str, str] = field(
        default_factory=lambda: {
            "traffic_light": "expert",
            "obstacles_cones": "expert",
            "recommended_speed_kmh": "vlm",
            "crossroad": "vlm",
        }
    )
    suspect_factor: float = 0.5

    def __post_init__(self):
        for name in ("expert_threshold", "vlm_threshold", "suspect_factor"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        for f, owner in self.ownership.items():
            if f not in LABEL_FIELDS or owner not in ("expert", "vlm"):
                raise ValueError(f"bad ownership entry {f!r}: {owner!r}")


def _field_confidence(label: SceneLabel, name: str, policy: FusionPolicy) -> float:
    conf = label.confidence
    if f"suspect:{name}" in label.flags:
        conf *= policy.suspect_factor
    return conf


def fuse_labels(
    vlm: SceneLabel, expert: SceneLabel, policy: FusionPolicy = FusionPolicy()
) -> SceneLabel | None:
    """Merge a VLM label with an expert label; ``None`` means the frame is dropped.

    Agreeing fields keep the shared value.  On disagreement the owning source
    wins if its confidence clears its threshold, then the other source, and
    otherwise the frame is dropped.  The fused confidence is the lowest
    per-field confidence that backed a decision.
    """
    values: dict[str, Any] = {}
    backing: list[float] = []
    for name in LABEL_FIELDS:
        v_val, e_val = getattr(vlm, name), getattr(expert, name)
        cv = _field_confidence(vlm, name, policy)
        ce = _field_confidence(expert, name, policy)
        if v_val == e_val:
            values[name] = v_val
            backing.append(max(cv, ce))
            continue
        order = [("expert", e_val, ce, policy.expert_threshold), ("vlm", v_val, cv, policy.vlm_threshold)]
        if policy.ownership.get(name, "vlm") == "vlm":
            order.reverse()
        for _, val, conf, threshold in order:
            if conf >= threshold:
                values[name] = val
                backing.append(conf)
                break
        else:
            return None
    if values["obstacles_cones"]:
        counts = [l.cone_count for l in (expert, vlm) if l.obstacles_cones and l.cone_count is not None]
        values["cone_count"] = counts[0] if counts else None
    return SceneLabel(
        recommended_speed_kmh=values["recommended_speed_kmh"],
        traffic_light=values["traffic_light"],
        obstacles_cones=values["obstacles_cones"],
        cone_count=values.get("cone_count"),
        crossroad=values["crossroad"],
        confidence=min(backing),
        source=LabelSource.FUSED,
        flags=vlm.flags | expert.flags,
    )


# ---------------------------------------------------------------------------
# sequence pipeline

@dataclass
class MiningStats:
    total: int = 0
    kept: int = 0
    dropped: int = 0
    replaced: int = 0
    replaced_fields: dict[str, int] = field(default_factory=dict)
    suspect: int = 0
    penalized: int = 0
    stage_order: tuple[str, ...] = STAGE_ORDER

    def to_dict(self) -> dict[str, Any]:
        return {
            "total": self.total,
            "kept": self.kept,
            "dropped": self.dropped,
            "replaced": self.replaced,
            "replaced_fields": dict(sorted(self.replaced_fields.items())),
            "suspect": self.suspect,
            "penalized": self.penalized,
            "stage_order": list(self.stage_order),
        }

    def merge(self, other: MiningStats) -> MiningStats:
        fields = Counter(self.replaced_fields)
        fields.update(other.replaced_fields)
        return MiningStats(
            self.total + other.total,
            self.kept + other.kept,
            self.dropped + other.dropped,
            self.replaced + other.replaced,
            dict(fields),
            self.suspect + other.suspect,
            self.penalized + other.penalized,
        )


def _smooth(labels: list[SceneLabel], sizes: list[int], stats: MiningStats) -> list[SceneLabel]:
    out = []
    fields: Counter = Counter(stats.replaced_fields)
    for i, n in enumerate(sizes):
        lo, hi = _window_bounds(i, n, len(labels))
        voted, replaced = _vote(labels[lo:hi], i - lo)
        if replaced:
            stats.replaced += 1
            fields.update(replaced)
        out.append(voted)
    stats.replaced_fields = dict(fields)
    return out


def mine_sequence(
    frames: Sequence[FrameRecord],
    vlm_labels: Mapping[str, SceneLabel],
    expert_labels: Mapping[str, SceneLabel],
    cfg: WindowConfig = WindowConfig(),
    rules: Sequence[ConsistencyRule] = DEFAULT_RULES,
    policy: FusionPolicy = FusionPolicy(),
) -> tuple[list[LabeledFrame], MiningStats]:
    """Run vote, consistency and fusion over one recorded sequence.

    Both label streams are smoothed independently before fusion.  Output
    order follows ``frames``.
    """
    missing = [
        f.frame_id for f in frames if f.frame_id not in vlm_labels or f.frame_id not in expert_labels
    ]
    if missing:
        raise AlignmentError(missing)
    validate_sequence(frames)
    frames = list(frames)
    stats = MiningStats(total=len(frames))
    sizes = [window_length(f.ego_speed_mps, f.camera_fps, cfg) for f in frames]

    streams = {}
    for source, mapping in ((LabelSource.VLM, vlm_labels), (LabelSource.EXPERT, expert_labels)):
        raw = [mapping[f.frame_id] for f in frames]
        voted = _smooth(raw, sizes, stats)
        streams[source] = check_motion_consistency(voted, frames, rules, sizes)

    out = []
    for i, frame in enumerate(frames):
        vlm, expert = streams[LabelSource.VLM][i], streams[LabelSource.EXPERT][i]
        for l in (vlm, expert):
            if any(f.startswith("suspect:") for f in l.flags):
                stats.suspect += 1
            if any(f.startswith("penalized:") for f in l.flags):
                stats.penalized += 1
        labels = {LabelSource.VLM: vlm, LabelSource.EXPERT: expert}
        fused = fuse_labels(vlm, expert, policy)
        if fused is None:
            stats.dropped += 1
        else:
            stats.kept += 1
            labels[LabelSource.FUSED] = fused
        out.append(LabeledFrame(frame, labels))
    return out, stats


def mine_sequences(
    sequences: Sequence[tuple[Sequence[FrameRecord], Mapping[str, SceneLabel], Mapping[str, SceneLabel]]],
    cfg: WindowConfig = WindowConfig(),
    rules: Sequence[ConsistencyRule] = DEFAULT_RULES,
    policy: FusionPolicy = FusionPolicy(),
    workers: int = 1,
) -> tuple[list[list[LabeledFrame]], MiningStats]:
    """Mine independent sequences on a worker pool; results keep input order."""
    def run(seq):
        return mine_sequence(seq[0], seq[1], seq[2], cfg, rules, policy)

    if workers <= 1:
        results = [run(s) for s in sequences]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, sequences))
    stats = MiningStats()
    for _, s in results:
        stats = stats.merge(s)
    return [r[0] for r in results], stats


def split_sequences(frames: Sequence[FrameRecord], max_gap_ms: int = 1000) -> list[list[FrameRecord]]:
    """Cut a frame stream into sequences wherever the time gap exceeds ``max_gap_ms``
    or timestamps go backwards."""
    seqs: list[list[FrameRecord]] = []
    for f in frames:
        if seqs and 0 < f.timestamp_ms - seqs[-1][-1].timestamp_ms <= max_gap_ms:
            seqs[-1].append(f)
        else:
            seqs.append([f])
    return seqs


# ---------------------------------------------------------------------------
# synthetic drives for tests and demos

def _corrupt(label: SceneLabel, rng: random.Random) -> SceneLabel:
    name = rng.choice(CATEGORICAL_FIELDS)
    if name == "traffic_light":
        choices = [t for t in TrafficLight if t is not label.traffic_light]
        return replace(label, traffic_light=rng.choice(choices))
    if name == "obstacles_cones":
        return replace(label, obstacles_cones=not label.obstacles_cones, cone_count=None)
    return replace(label, crossroad=not label.crossroad)


def simulate_drive(
    n_frames: int,
    truth: SceneLabel,
    corruption_rate: float,
    seed: int,
    *,
    speed_mps: float = 20.0,
    fps: float = 10.0,
    vlm_confidence: float = 0.9,
    expert_confidence: float = 0.9,
    prefix: str = "f",
) -> tuple[list[FrameRecord], dict[str, SceneLabel], dict[str, SceneLabel], set[str]]:
    """A constant-truth drive with a fraction of each label stream corrupted.

    Returns frames, VLM labels, expert labels and the ids of corrupted frames.
    Exactly ``round(corruption_rate * n_frames)`` frames of each stream get
    one categorical field flipped.
    """
    rng = random.Random(seed)
    dt = 1000.0 / fps
    frames = [
        FrameRecord(
            frame_id=f"{prefix}{i:06d}",
            timestamp_ms=int(round(i * dt)),
            ego_speed_mps=speed_mps,
            motion_state=MotionState.CRUISING if speed_mps >= 0.3 else MotionState.STOPPED,
            image_ref=f"drive/{prefix}{i:06d}.jpg",
            camera_fps=fps,
        )
        for i in range(n_frames)
    ]
    k = int(round(corruption_rate * n_frames))
    corrupted: set[str] = set()
    streams = []
    for source, conf in ((LabelSource.VLM, vlm_confidence), (LabelSource.EXPERT, expert_confidence)):
        base = replace(truth, source=source, confidence=conf)
        labels = {f.frame_id: base for f in frames}
        for i in sorted(rng.sample(range(n_frames), k)):
            fid = frames[i].frame_id
            labels[fid] = _corrupt(base, rng)
            corrupted.add(fid)
        streams.append(labels)
    return frames, streams[0], streams[1], corrupted
