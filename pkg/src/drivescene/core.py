"""Domain types, the four-section label text grammar, and JSON-lines I/O.

Label text follows the layout produced for rendered scenes::

    Recommended Speed: 40 km/h. Traffic Lights: Red light ahead, please stop
    and wait. Obstacles: Traffic cones are present, please maneuver around
    them carefully. Intersection: An intersection is ahead, please slow down
    and proceed with caution.

Parsing is tolerant (keys are case-insensitive, unknown sections are skipped,
``Crossroad:`` is accepted for ``Intersection:``); serialization is canonical.
"""
from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

from .errors import (
    CountMismatch,
    DuplicateImageRef,
    EmptyText,
    MalformedNumeric,
    ParseError,
)

MAX_SPEED_KMH = 150.0
STOPPED_SPEED_MPS = 0.3


def kmh_to_mps(v: float) -> float:
    return v / 3.6


def mps_to_kmh(v: float) -> float:
    return v * 3.6


class MotionState(str, Enum):
    STOPPED = "stopped"
    ACCELERATING = "accelerating"
    CRUISING = "cruising"
    DECELERATING = "decelerating"


class TrafficLight(str, Enum):
    ABSENT = "absent"
    RED = "red"
    YELLOW = "yellow"
    GREEN = "green"


class LabelSource(str, Enum):
    VLM = "vlm"
    EXPERT = "expert"
    FUSED = "fused"
    GROUND_TRUTH = "ground_truth"


class Origin(str, Enum):
    REAL = "real"
    T2I = "t2i"
    RENDERED = "rendered"


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass(frozen=True)
class FrameRecord:
    frame_id: str
    timestamp_ms: int
    ego_speed_mps: float
    motion_state: MotionState
    image_ref: str
    camera_fps: float

    def __post_init__(self):
        object.__setattr__(self, "motion_state", MotionState(self.motion_state))
        if not self.frame_id:
            raise ValueError("frame_id must be non-empty")
        if not (self.ego_speed_mps >= 0 and math.isfinite(self.ego_speed_mps)):
            raise ValueError(f"ego_speed_mps must be finite and >= 0, got {self.ego_speed_mps}")
        if not self.camera_fps > 0:
            raise ValueError(f"camera_fps must be positive, got {self.camera_fps}")
        if self.motion_state is MotionState.STOPPED and self.ego_speed_mps >= STOPPED_SPEED_MPS:
            raise ValueError(
                f"frame {self.frame_id}: stopped but ego speed {self.ego_speed_mps} m/s"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "frame_id": self.frame_id,
            "timestamp_ms": self.timestamp_ms,
            "ego_speed_mps": self.ego_speed_mps,
            "motion_state": self.motion_state.value,
            "image_ref": self.image_ref,
            "camera_fps": self.camera_fps,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> FrameRecord:
        return cls(
            frame_id=str(d["frame_id"]),
            timestamp_ms=int(d["timestamp_ms"]),
            ego_speed_mps=float(d["ego_speed_mps"]),
            motion_state=MotionState(d["motion_state"]),
            image_ref=str(d["image_ref"]),
            camera_fps=float(d["camera_fps"]),
        )


def validate_sequence(frames: Iterable[FrameRecord]) -> None:
    """Raise ValueError unless timestamps strictly increase."""
    prev = None
    for f in frames:
        if prev is not None and f.timestamp_ms <= prev.timestamp_ms:
            raise ValueError(
                f"timestamps must strictly increase: {prev.frame_id}@{prev.timestamp_ms} "
                f"then {f.frame_id}@{f.timestamp_ms}"
            )
        prev = f


@dataclass(frozen=True)
class SceneLabel:
    """Structured label for the four driving tasks.

    ``flags`` carries annotations added by consistency checks (for example
    ``"suspect:crossroad"``); they are not part of the label text.
    """

    recommended_speed_kmh: float | None = None
    traffic_light: TrafficLight = TrafficLight.ABSENT
    obstacles_cones: bool = False
    cone_count: int | None = None
    crossroad: bool = False
    confidence: float = 1.0
    source: LabelSource = LabelSource.VLM
    flags: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "traffic_light", TrafficLight(self.traffic_light))
        object.__setattr__(self, "source", LabelSource(self.source))
        object.__setattr__(self, "flags", frozenset(self.flags))
        speed = self.recommended_speed_kmh
        if speed is not None and not (0.0 <= speed <= MAX_SPEED_KMH):
            raise ValueError(f"recommended_speed_kmh must be in [0, {MAX_SPEED_KMH}], got {speed}")
        if self.cone_count is not None:
            if self.cone_count < 0:
                raise ValueError("cone_count must be >= 0")
            if not self.obstacles_cones:
                raise ValueError("cone_count given but obstacles_cones is false")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")

    def content(self) -> tuple:
        """The task fields only, ignoring confidence, source and flags."""
        return (
            self.recommended_speed_kmh,
            self.traffic_light,
            self.obstacles_cones,
            self.cone_count,
            self.crossroad,
        )

    def with_flag(self, flag: str) -> SceneLabel:
        return replace(self, flags=self.flags | {flag})

    def to_dict(self) -> dict[str, Any]:
        return {
            "recommended_speed_kmh": self.recommended_speed_kmh,
            "traffic_light": self.traffic_light.value,
            "obstacles_cones": self.obstacles_cones,
            "cone_count": self.cone_count,
            "crossroad": self.crossroad,
            "confidence": self.confidence,
            "source": self.source.value,
            "flags": sorted(self.flags),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> SceneLabel:
        speed = d.get("recommended_speed_kmh")
        count = d.get("cone_count")
        return cls(
            recommended_speed_kmh=None if speed is None else float(speed),
            traffic_light=TrafficLight(d.get("traffic_light", "absent")),
            obstacles_cones=bool(d.get("obstacles_cones", False)),
            cone_count=None if count is None else int(count),
            crossroad=bool(d.get("crossroad", False)),
            confidence=float(d.get("confidence", 1.0)),
            source=LabelSource(d.get("source", "vlm")),
            flags=frozenset(d.get("flags", ())),
        )


@dataclass(frozen=True)
class LabeledFrame:
    frame: FrameRecord
    labels: Mapping[LabelSource, SceneLabel]

    def __post_init__(self):
        labels = {LabelSource(k): v for k, v in dict(self.labels).items()}
        if LabelSource.FUSED in labels and len(labels) == 1:
            raise ValueError("fused label requires at least one input label")
        object.__setattr__(self, "labels", labels)

    @property
    def fused(self) -> SceneLabel | None:
        return self.labels.get(LabelSource.FUSED)


# ---------------------------------------------------------------------------
# label text grammar

_SECTION_KEY = re.compile(r"(?:^|(?<=[.!?;\n]))\s*([A-Za-z][A-Za-z ]{0,40}?)\s*:")
_NUMBER = re.compile(r"[-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?")
_INT = re.compile(r"\d+")
_LIGHT_WORD = re.compile(r"\b(red|yellow|green)\b", re.IGNORECASE)
# "none", "No cones ahead", "there is no intersection", "not present"
_NEGATED = re.compile(r"^\W*(?:none|no|nothing|not)\b|\b(?:no|without|not)\b", re.IGNORECASE)

_KEY_ALIASES = {
    "recommended speed": "speed",
    "traffic lights": "light",
    "traffic light": "light",
    "obstacles": "obstacles",
    "obstacle": "obstacles",
    "intersection": "crossroad",
    "intersections": "crossroad",
    "crossroad": "crossroad",
    "crossroads": "crossroad",
}

_LIGHT_TEXT = {
    TrafficLight.RED: "Red light ahead, please stop and wait.",
    TrafficLight.YELLOW: "Yellow light ahead, please prepare to stop.",
    TrafficLight.GREEN: "Green light ahead, please proceed with caution.",
}


def _split_sections(text: str) -> dict[str, str]:
    matches = list(_SECTION_KEY.finditer(text))
    sections: dict[str, str] = {}
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        key = " ".join(m.group(1).lower().split())
        canonical = _KEY_ALIASES.get(key)
        if canonical is not None and canonical not in sections:
            sections[canonical] = text[m.end():end].strip()
    return sections


def parse_label_text(
    text: str,
    *,
    source: LabelSource = LabelSource.VLM,
    confidence: float = 1.0,
) -> SceneLabel:
    """Parse free-form four-section label text into a :class:`SceneLabel`.

    Raises :class:`EmptyText` for blank input and :class:`MalformedNumeric`
    when a speed section holds no usable number.
    """
    if not text or not text.strip():
        raise EmptyText("label text is empty")
    sections = _split_sections(text)

    speed = None
    if "speed" in sections:
        body = sections["speed"]
        m = _NUMBER.search(body)
        if m is None:
            raise MalformedNumeric("Recommended Speed", body)
        speed = float(m.group())
        if not (0.0 <= speed <= MAX_SPEED_KMH) or not math.isfinite(speed):
            raise MalformedNumeric("Recommended Speed", body)

    light = TrafficLight.ABSENT
    if "light" in sections:
        m = _LIGHT_WORD.search(sections["light"])
        if m is not None:
            light = TrafficLight(m.group(1).lower())

    cones, count = False, None
    if "obstacles" in sections:
        body = sections["obstacles"]
        if "cone" in body.lower() and not _NEGATED.search(body):
            cones = True
            m = _INT.search(body)
            count = int(m.group()) if m else None

    crossroad = False
    if "crossroad" in sections:
        low = sections["crossroad"].lower()
        crossroad = ("intersection" in low or "crossroad" in low) and not _NEGATED.search(low)

    return SceneLabel(
        recommended_speed_kmh=speed,
        traffic_light=light,
        obstacles_cones=cones,
        cone_count=count,
        crossroad=crossroad,
        confidence=confidence,
        source=source,
    )


def _format_speed(v: float) -> str:
    if float(v).is_integer():
        return str(int(v))
    return repr(float(v))


def serialize_label(label: SceneLabel) -> str:
    parts = []
    if label.recommended_speed_kmh is not None:
        parts.append(f"Recommended Speed: {_format_speed(label.recommended_speed_kmh)} km/h.")
    parts.append("Traffic Lights: " + _LIGHT_TEXT.get(label.traffic_light, "none."))
    if label.obstacles_cones:
        if label.cone_count is None:
            parts.append(
                "Obstacles: Traffic cones are present, please maneuver around them carefully."
            )
        else:
            parts.append(
                f"Obstacles: {label.cone_count} traffic cones are present, "
                "please maneuver around them carefully."
            )
    else:
        parts.append("Obstacles: none.")
    if label.crossroad:
        parts.append(
            "Intersection: An intersection is ahead, please slow down and proceed with caution."
        )
    else:
        parts.append("Intersection: none.")
    return " ".join(parts)


# ---------------------------------------------------------------------------
# JSON-lines helpers

def dumps(obj: Any) -> str:
    """Stable JSON encoding used for every data artifact."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def write_jsonl(path: str | Path, rows: Iterable[Mapping[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(dumps(row))
            fh.write("\n")


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict[str, Any]]]:
    """Yield ``(line_number, object)``; blank lines are skipped."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None


def read_frames(path: str | Path) -> list[FrameRecord]:
    frames = []
    for lineno, row in iter_jsonl(path):
        try:
            frames.append(FrameRecord.from_dict(row))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad frame record: {exc}", lineno) from None
    return frames


def write_frames(path: str | Path, frames: Iterable[FrameRecord]) -> None:
    write_jsonl(path, (f.to_dict() for f in frames))


def read_labels(path: str | Path) -> dict[str, SceneLabel]:
    """Read a per-source label stream keyed by ``frame_id``.

    Each row holds either a structured ``label`` object or raw ``text``.
    """
    out: dict[str, SceneLabel] = {}
    for lineno, row in iter_jsonl(path):
        try:
            fid = str(row["frame_id"])
            if "label" in row:
                label = SceneLabel.from_dict(row["label"])
            else:
                label = parse_label_text(
                    row["text"],
                    source=LabelSource(row.get("source", "vlm")),
                    confidence=float(row.get("confidence", 1.0)),
                )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad label row: {exc}", lineno) from None
        out[fid] = label
    return out


def write_labels(path: str | Path, labels: Mapping[str, SceneLabel]) -> None:
    write_jsonl(path, ({"frame_id": k, "label": v.to_dict()} for k, v in labels.items()))


# ---------------------------------------------------------------------------
# dataset manifests

@dataclass(frozen=True)
class ManifestEntry:
    image_ref: str
    label: SceneLabel
    origin: Origin

    def __post_init__(self):
        object.__setattr__(self, "origin", Origin(self.origin))


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    split: Split
    entries: tuple[ManifestEntry, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "split", Split(self.split))
        object.__setattr__(self, "entries", tuple(self.entries))
        seen: set[str] = set()
        for e in self.entries:
            if e.image_ref in seen:
                raise DuplicateImageRef(f"duplicate image_ref {e.image_ref!r} in {self.name}")
            seen.add(e.image_ref)

    @property
    def counts(self) -> dict[str, int]:
        tally = Counter(e.origin for e in self.entries)
        return {o.value: tally.get(o, 0) for o in Origin}


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    header = {
        "kind": "manifest",
        "name": manifest.name,
        "split": manifest.split.value,
        "counts": manifest.counts,
    }
    rows = [header]
    rows.extend(
        {"image_ref": e.image_ref, "origin": e.origin.value, "label": e.label.to_dict()}
        for e in manifest.entries
    )
    write_jsonl(path, rows)


def read_manifest(path: str | Path) -> DatasetManifest:
    """Read a manifest and verify that the header counts match the entries."""
    rows = iter_jsonl(path)
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise ParseError("missing manifest header", 1) from None
    if header.get("kind") != "manifest" or "counts" not in header:
        raise ParseError("first line is not a manifest header", lineno)
    entries = []
    seen: dict[str, int] = {}
    for lineno, row in rows:
        try:
            entry = ManifestEntry(
                image_ref=str(row["image_ref"]),
                label=SceneLabel.from_dict(row["label"]),
                origin=Origin(row["origin"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad manifest entry: {exc}", lineno) from None
        if entry.image_ref in seen:
            raise DuplicateImageRef(
                f"line {lineno}: image_ref {entry.image_ref!r} already on line {seen[entry.image_ref]}"
            )
        seen[entry.image_ref] = lineno
        entries.append(entry)
    try:
        manifest = DatasetManifest(name=header["name"], split=Split(header["split"]), entries=entries)
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad manifest header: {exc}", 1) from None
    stored = {o.value: int(header["counts"].get(o.value, 0)) for o in Origin}
    if stored != manifest.counts:
        raise CountMismatch(f"header counts {stored} != entry tallies {manifest.counts}")
    return manifest
