"""Procedural scene specs with ground-truth labels, best-of-N selection and
image/caption pair filtering.

Scenes are a short chain of road segments ahead of the ego vehicle.  A
renderer can consume the JSON form of :class:`SceneSpec`; the labels and
prompt text are derived from the scene spec alone by :func:`emit_labels`.
"""
from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

import numpy as np

from .core import LabelSource, SceneLabel, TrafficLight, dumps, serialize_label
from .errors import InfeasibleConfig, NTooLarge

NODE_KINDS = ("intersection", "straight", "toll")
OBJECT_KINDS = ("cone", "traffic_light", "vehicle", "pedestrian")
WEATHER = ("clear", "rain", "fog", "snow")
TIMES_OF_DAY = ("day", "dusk", "night")

# Multiplicative recommended-speed adjustments, result rounded to 5 km/h.
SPEED_FACTORS = {"rain": 0.8, "fog": 0.7, "snow": 0.7, "cones": 0.75}
SPEED_STEP_KMH = 5.0


@dataclass(frozen=True)
class Junction:
    id: str
    kind: str


@dataclass(frozen=True)
class RoadEdge:
    id: str
    src: str
    dst: str
    length_m: float
    speed_limit_kmh: float
    lanes: int = 1


@dataclass(frozen=True)
class EgoPose:
    edge: str
    offset_m: float
    lane: int


@dataclass(frozen=True)
class SceneObject:
    """An object on the route.

    Traffic lights sit on a junction (``node``) and govern one lane of the
    incoming edge; everything else sits at ``offset_m`` along ``edge``.
    Pedestrians use lane -1 (sidewalk).
    """

    kind: str
    edge: str | None = None
    node: str | None = None
    offset_m: float = 0.0
    lane: int = 0
    state: str = ""
    speed_mps: float = 0.0


@dataclass(frozen=True)
class Environment:
    weather: str = "clear"
    time_of_day: str = "day"


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    nodes: tuple[Junction, ...]
    edges: tuple[RoadEdge, ...]
    ego: EgoPose
    objects: tuple[SceneObject, ...] = ()
    environment: Environment = Environment()
    crossroad_threshold_m: float = 50.0
    version: int = 1

    def __post_init__(self):
        node_kinds = {n.id: n.kind for n in self.nodes}
        edge_ids = {e.id for e in self.edges}
        if self.ego.edge not in edge_ids:
            raise ValueError(f"ego edge {self.ego.edge!r} not in road network")
        for o in self.objects:
            if o.kind not in OBJECT_KINDS:
                raise ValueError(f"unknown object kind {o.kind!r}")
            if o.kind == "traffic_light":
                if node_kinds.get(o.node) != "intersection":
                    raise ValueError("traffic lights attach only to intersection nodes")
            elif o.edge not in edge_ids:
                raise ValueError(f"object on unknown edge {o.edge!r}")

    def edge(self, edge_id: str) -> RoadEdge:
        for e in self.edges:
            if e.id == edge_id:
                return e
        raise KeyError(edge_id)

    def node_kind(self, node_id: str) -> str:
        for n in self.nodes:
            if n.id == node_id:
                return n.kind
        raise KeyError(node_id)

    def route(self) -> list[RoadEdge]:
        """Edges from the ego edge onwards, following src -> dst."""
        by_src = {e.src: e for e in self.edges}
        out = [self.edge(self.ego.edge)]
        seen = {out[0].id}
        while out[-1].dst in by_src and by_src[out[-1].dst].id not in seen:
            out.append(by_src[out[-1].dst])
            seen.add(out[-1].id)
        return out

    def distance_ahead(self, edge_id: str, offset_m: float) -> float | None:
        """Signed route distance from the ego to a point; None if off-route."""
        acc = -self.ego.offset_m
        for e in self.route():
            if e.id == edge_id:
                return acc + offset_m
            acc += e.length_m
        return None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> SceneSpec:
        return cls(
            seed=int(d["seed"]),
            nodes=tuple(Junction(**n) for n in d["nodes"]),
            edges=tuple(RoadEdge(**e) for e in d["edges"]),
            ego=EgoPose(**d["ego"]),
            objects=tuple(SceneObject(**o) for o in d.get("objects", ())),
            environment=Environment(**d.get("environment", {})),
            crossroad_threshold_m=float(d.get("crossroad_threshold_m", 50.0)),
            version=int(d.get("version", 1)),
        )


def save_spec(spec: SceneSpec, path: str | Path) -> None:
    Path(path).write_text(dumps(spec.to_dict()) + "\n", encoding="utf-8")


def load_spec(path: str | Path) -> SceneSpec:
    with open(path, encoding="utf-8") as fh:
        return SceneSpec.from_dict(json.load(fh))


def _check_distribution(name: str, dist: Mapping[str, float], allowed: Sequence[str]) -> None:
    if set(dist) - set(allowed):
        raise ValueError(f"{name}: unknown keys {sorted(set(dist) - set(allowed))}")
    if any(v < 0 for v in dist.values()) or not math.isclose(sum(dist.values()), 1.0, abs_tol=1e-9):
        raise ValueError(f"{name} must be a probability distribution summing to 1")


@dataclass(frozen=True)
class GenerationConfig:
    intersection_bias: float = 0.5
    cone_count: tuple[int, int] = (0, 3)
    cone_range_m: tuple[float, float] = (5.0, 30.0)
    light_states: Mapping[str, float] = field(
        default_factory=lambda: {"red": 0.4, "yellow": 0.1, "green": 0.5}
    )
    light_probability: float = 0.8
    speed_limits: tuple[float, ...] = (30.0, 40.0, 50.0, 60.0, 80.0)
    weather: Mapping[str, float] = field(
        default_factory=lambda: {"clear": 0.6, "rain": 0.2, "fog": 0.1, "snow": 0.1}
    )
    time_of_day: Mapping[str, float] = field(
        default_factory=lambda: {"day": 0.6, "dusk": 0.2, "night": 0.2}
    )
    edge_length_m: tuple[float, float] = (100.0, 300.0)
    segments: int = 3
    max_lanes: int = 3
    crossroad_threshold_m: float = 50.0
    min_gap_m: float = 5.0
    vehicle_count: tuple[int, int] = (0, 3)
    pedestrian_count: tuple[int, int] = (0, 2)
    clearance_m: float = 8.0

    def __post_init__(self):
        if not 0.0 <= self.intersection_bias <= 1.0:
            raise ValueError("intersection_bias must be in [0, 1]")
        if not 0.0 <= self.light_probability <= 1.0:
            raise ValueError("light_probability must be in [0, 1]")
        _check_distribution("light_states", self.light_states, ("red", "yellow", "green"))
        _check_distribution("weather", self.weather, WEATHER)
        _check_distribution("time_of_day", self.time_of_day, TIMES_OF_DAY)
        for name in ("cone_count", "vehicle_count", "pedestrian_count"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} must be an ordered non-negative range")
        lo, hi = self.cone_range_m
        if not 0 < lo <= hi:
            raise ValueError("cone_range_m must be an ordered positive range")
        if not 0 < self.edge_length_m[0] <= self.edge_length_m[1]:
            raise ValueError("edge_length_m must be an ordered positive range")
        if self.segments < 2 or self.max_lanes < 1 or not self.speed_limits:
            raise ValueError("need >= 2 segments, >= 1 lane and a speed-limit set")

    def check_feasible(self) -> None:
        if self.cone_range_m[1] > self.edge_length_m[0]:
            raise InfeasibleConfig(
                f"cone range up to {self.cone_range_m[1]} m exceeds the shortest edge "
                f"({self.edge_length_m[0]} m)"
            )
        if self.crossroad_threshold_m >= self.edge_length_m[0]:
            raise InfeasibleConfig("crossroad threshold must be shorter than the shortest edge")
        if self.min_gap_m > self.crossroad_threshold_m:
            raise InfeasibleConfig("min_gap_m exceeds crossroad threshold")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> GenerationConfig:
        kw = dict(d)
        for name in ("cone_count", "cone_range_m", "edge_length_m", "vehicle_count", "pedestrian_count", "speed_limits"):
            if name in kw:
                kw[name] = tuple(kw[name])
        return cls(**kw)


def _choice(rng: np.random.Generator, dist: Mapping[str, float]) -> str:
    keys = sorted(dist)
    return keys[int(rng.choice(len(keys), p=[dist[k] for k in keys]))]


def generate_layout(cfg: GenerationConfig, seed: int) -> SceneSpec:
    """Static layout: road chain, junction kinds, lights, ego pose, environment.

    With probability ``intersection_bias`` the ego edge ends at an
    intersection within ``crossroad_threshold_m``; otherwise the next
    intersection (if any) lies beyond that threshold.
    """
    cfg.check_feasible()
    rng = np.random.default_rng([seed, 0])
    at_intersection = bool(rng.random() < cfg.intersection_bias)
    kinds = ["straight"]
    kinds.append("intersection" if at_intersection else str(rng.choice(["straight", "toll"])))
    for _ in range(cfg.segments - 1):
        kinds.append(str(rng.choice(NODE_KINDS)))
    nodes = tuple(Junction(f"n{i}", k) for i, k in enumerate(kinds))
    edges = []
    for i in range(cfg.segments):
        edges.append(
            RoadEdge(
                id=f"e{i}",
                src=f"n{i}",
                dst=f"n{i + 1}",
                length_m=float(rng.uniform(*cfg.edge_length_m)),
                speed_limit_kmh=float(rng.choice(cfg.speed_limits)),
                lanes=int(rng.integers(1, cfg.max_lanes + 1)),
            )
        )
    ego_edge = edges[0]
    if at_intersection:
        remaining = float(rng.uniform(cfg.min_gap_m, cfg.crossroad_threshold_m))
    else:
        remaining = float(rng.uniform(cfg.crossroad_threshold_m, ego_edge.length_m))
        remaining = max(remaining, cfg.crossroad_threshold_m + 1e-6)
    ego = EgoPose(ego_edge.id, ego_edge.length_m - remaining, int(rng.integers(0, ego_edge.lanes)))

    lights = []
    for i, node in enumerate(nodes):
        if node.kind != "intersection" or i == 0:
            continue
        if rng.random() >= cfg.light_probability:
            continue
        incoming = edges[i - 1]
        primary = _choice(rng, cfg.light_states)
        for lane in range(incoming.lanes):
            state = _choice(rng, cfg.light_states) if rng.random() < 0.3 else primary
            lights.append(SceneObject("traffic_light", node=node.id, lane=lane, state=state))

    env = Environment(_choice(rng, cfg.weather), _choice(rng, cfg.time_of_day))
    return SceneSpec(
        seed=seed,
        nodes=nodes,
        edges=tuple(edges),
        ego=ego,
        objects=tuple(lights),
        environment=env,
        crossroad_threshold_m=cfg.crossroad_threshold_m,
    )


def _route_position(spec: SceneSpec, ahead_m: float) -> tuple[str, float]:
    acc = spec.ego.offset_m + ahead_m
    route = spec.route()
    for e in route:
        if acc <= e.length_m:
            return e.id, acc
        acc -= e.length_m
    raise InfeasibleConfig(f"point {ahead_m} m ahead lies beyond the generated route")


def _sample_clear_offset(
    rng: np.random.Generator, length: float, avoid: float | None, clearance: float
) -> float:
    # offsets in [0, length] excluding (avoid - clearance, avoid + clearance)
    if avoid is None:
        return float(rng.uniform(0.0, length))
    left = (0.0, max(0.0, avoid - clearance))
    right = (min(length, avoid + clearance), length)
    widths = [left[1] - left[0], right[1] - right[0]]
    total = widths[0] + widths[1]
    if total <= 0:
        raise InfeasibleConfig("edge too short to place an object clear of the ego vehicle")
    u = float(rng.uniform(0.0, total))
    return left[0] + u if u < widths[0] else right[0] + (u - widths[0])


def place_dynamics(spec: SceneSpec, cfg: GenerationConfig, seed: int) -> SceneSpec:
    """Add cones ahead of the ego plus vehicles and pedestrians with
    constant-speed straight trajectories along their edge."""
    rng = np.random.default_rng([seed, 1])
    route = spec.route()
    ahead_total = sum(e.length_m for e in route) - spec.ego.offset_m
    if cfg.cone_range_m[1] > ahead_total:
        raise InfeasibleConfig("cone range exceeds the road ahead of the ego vehicle")
    objects = list(spec.objects)
    for _ in range(int(rng.integers(cfg.cone_count[0], cfg.cone_count[1] + 1))):
        ahead = float(rng.uniform(*cfg.cone_range_m))
        edge_id, offset = _route_position(spec, ahead)
        objects.append(SceneObject("cone", edge=edge_id, offset_m=offset, lane=spec.ego.lane))
    for kind, (lo, hi) in (("vehicle", cfg.vehicle_count), ("pedestrian", cfg.pedestrian_count)):
        for _ in range(int(rng.integers(lo, hi + 1))):
            edge = route[int(rng.integers(0, len(route)))]
            avoid = spec.ego.offset_m if edge.id == spec.ego.edge else None
            offset = _sample_clear_offset(rng, edge.length_m, avoid, cfg.clearance_m)
            if kind == "vehicle":
                lane = int(rng.integers(0, edge.lanes))
                speed = float(rng.uniform(0.5, 1.0)) * edge.speed_limit_kmh / 3.6
            else:
                lane, speed = -1, float(rng.uniform(1.0, 1.6))
            objects.append(SceneObject(kind, edge=edge.id, offset_m=offset, lane=lane, state="moving", speed_mps=speed))
    return replace(spec, objects=tuple(objects), version=spec.version + 1)


def generate_scene(cfg: GenerationConfig, seed: int) -> SceneSpec:
    return place_dynamics(generate_layout(cfg, seed), cfg, seed)


def generate_scenes(cfg: GenerationConfig, seeds: Sequence[int], workers: int = 1) -> list[SceneSpec]:
    """One scene per seed, in seed order.  Seeds are independent."""
    if workers <= 1:
        return [generate_scene(cfg, s) for s in seeds]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: generate_scene(cfg, s), seeds))


def adjusted_speed(
    limit_kmh: float, weather: str, cones: bool, step: float | None = SPEED_STEP_KMH
) -> float:
    """Speed limit scaled by the weather/cone rule table.

    With ``step=None`` the unrounded product is returned; otherwise it is
    rounded half-up to a multiple of ``step``.
    """
    v = limit_kmh * SPEED_FACTORS.get(weather, 1.0)
    if cones:
        v *= SPEED_FACTORS["cones"]
    if step is None:
        return v
    return float(math.floor(v / step + 0.5 + 1e-9) * step)


def next_intersection(spec: SceneSpec) -> tuple[str, float, RoadEdge] | None:
    """(node id, distance ahead, incoming edge) of the first intersection ahead."""
    dist = -spec.ego.offset_m
    for e in spec.route():
        dist += e.length_m
        if spec.node_kind(e.dst) == "intersection":
            return e.dst, dist, e
    return None


def emit_labels(spec: SceneSpec) -> tuple[SceneLabel, str]:
    """Ground-truth label and prompt text for a scene."""
    cones = [o for o in spec.objects if o.kind == "cone"]
    ego_edge = spec.edge(spec.ego.edge)
    speed = adjusted_speed(ego_edge.speed_limit_kmh, spec.environment.weather, bool(cones))
    light = TrafficLight.ABSENT
    crossroad = False
    nxt = next_intersection(spec)
    if nxt is not None:
        node, dist, incoming = nxt
        lane = min(spec.ego.lane, incoming.lanes - 1)
        for o in spec.objects:
            if o.kind == "traffic_light" and o.node == node and o.lane == lane:
                light = TrafficLight(o.state)
                break
        crossroad = dist <= spec.crossroad_threshold_m
    label = SceneLabel(
        recommended_speed_kmh=min(speed, 150.0),
        traffic_light=light,
        obstacles_cones=bool(cones),
        crossroad=crossroad,
        confidence=1.0,
        source=LabelSource.GROUND_TRUTH,
    )
    return label, serialize_label(label)


# ---------------------------------------------------------------------------
# best-of-N selection for a text-to-image self-improvement loop

@dataclass(frozen=True)
class CandidateImage:
    id: str
    caption: str
    score_quality: float
    score_consistency: float

    def __post_init__(self):
        for name in ("score_quality", "score_consistency"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")

    def weighted(self, weights: tuple[float, float]) -> float:
        return weights[0] * self.score_quality + weights[1] * self.score_consistency


def select_best_n(
    candidates: Sequence[CandidateImage], n: int, weights: tuple[float, float] = (0.5, 0.5)
) -> list[CandidateImage]:
    """Top ``n`` by weighted quality/consistency score, ties broken by id."""
    if n > len(candidates):
        raise NTooLarge(f"asked for {n} of {len(candidates)} candidates")
    if n < 0:
        raise ValueError("n must be non-negative")
    if len(weights) != 2 or min(weights) < 0 or not math.isclose(sum(weights), 1.0, abs_tol=1e-9):
        raise ValueError("weights must be two non-negative numbers summing to 1")
    ranked = sorted(candidates, key=lambda c: (-c.weighted(weights), c.id))
    return ranked[:n]


class ImageGenerator(Protocol):
    def generate(self, caption: str, n: int, seed: int) -> list[str]:
        """Return ``n`` image references for ``caption``."""


class ImageScorer(Protocol):
    def score(self, image_ref: str, caption: str) -> tuple[float, float]:
        """Return (quality, consistency) in [0, 1]."""


def self_improvement_round(
    generator: ImageGenerator,
    scorer: ImageScorer,
    captions: Sequence[str],
    per_caption: int,
    n_best: int,
    weights: tuple[float, float] = (0.5, 0.5),
    seed: int = 0,
) -> list[CandidateImage]:
    """Generate ``per_caption`` images per caption, score them, keep the best ``n_best``."""
    candidates = []
    for i, caption in enumerate(captions):
        for ref in generator.generate(caption, per_caption, seed + i):
            q, c = scorer.score(ref, caption)
            candidates.append(CandidateImage(ref, caption, q, c))
    return select_best_n(candidates, n_best, weights)


def write_candidates(path: str | Path, candidates: Sequence[CandidateImage]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for c in candidates:
            fh.write(dumps(asdict(c)) + "\n")


class InferenceImageScorer:
    """Scores images through the chat-completions inference contract.

    The service must answer with JSON ``{"quality": q, "consistency": c}``.
    """

    def __init__(self, client, model: str = "image-scorer"):
        self.client = client
        self.model = model

    def score(self, image_ref: str, caption: str) -> tuple[float, float]:
        from .inference import InferenceRequest

        prompt = (
            "Rate the image quality and its consistency with this caption, answering "
            f'with JSON {{"quality": q, "consistency": c}} in [0, 1]. Caption: {caption}'
        )
        rid = hashlib.sha256(f"{image_ref}|{caption}".encode()).hexdigest()[:16]
        resp = self.client.infer(InferenceRequest(prompt, image_ref, self.model, rid))
        data = json.loads(resp.text)
        return float(data["quality"]), float(data["consistency"])


class InferenceImageGenerator:
    """Text-to-image generation through the inference contract.

    The service answers with a JSON list of image references.
    """

    def __init__(self, client, model: str = "t2i"):
        self.client = client
        self.model = model

    def generate(self, caption: str, n: int, seed: int) -> list[str]:
        from .inference import InferenceRequest

        prompt = f"Generate {n} images (seed {seed}) for: {caption}"
        rid = hashlib.sha256(f"{caption}|{n}|{seed}".encode()).hexdigest()[:16]
        resp = self.client.infer(InferenceRequest(prompt, f"t2i:{rid}", self.model, rid))
        refs = json.loads(resp.text)
        if not isinstance(refs, list) or len(refs) != n:
            raise ValueError(f"generator returned {refs!r}, expected {n} image references")
        return [str(r) for r in refs]


# ---------------------------------------------------------------------------
# image/caption pair filtering

@dataclass(frozen=True)
class ImagePair:
    caption: str
    signature: str
    label: SceneLabel | None = None


@dataclass
class FilterStats:
    input: int = 0
    kept: int = 0
    duplicate_signature: int = 0
    near_duplicate_caption: int = 0
    misaligned: int = 0

    def to_dict(self) -> dict[str, int]:
        return asdict(self)


_TOKEN = re.compile(r"[a-z0-9]+")
_CAPTION_LIGHT = re.compile(r"\b(red|yellow|green)\s+(?:traffic\s+)?(?:light|signal)", re.IGNORECASE)
_CAPTION_NO_CONE = re.compile(r"\b(?:no|without)\s+(?:traffic\s+)?cones?\b", re.IGNORECASE)


def caption_tokens(caption: str) -> frozenset[str]:
    return frozenset(_TOKEN.findall(caption.lower()))


def jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def is_misaligned(caption: str, label: SceneLabel | None) -> bool:
    """True when the caption names a light color or cones the label contradicts."""
    if label is None:
        return False
    m = _CAPTION_LIGHT.search(caption)
    if m and TrafficLight(m.group(1).lower()) is not label.traffic_light:
        return True
    low = caption.lower()
    if "cone" in low and not _CAPTION_NO_CONE.search(caption) and not label.obstacles_cones:
        return True
    return False


def filter_pairs(
    pairs: Sequence[ImagePair], threshold: float = 0.9
) -> tuple[list[ImagePair], FilterStats]:
    """Drop misaligned pairs, repeated signatures and near-duplicate captions.

    The first occurrence is kept.  Near duplicates (token Jaccard >=
    ``threshold`` with an already kept caption) are found with prefix
    filtering over a rarity-ordered token index, so the check is exact without
    comparing all pairs.
    """
    stats = FilterStats(input=len(pairs))
    token_sets = [caption_tokens(p.caption) for p in pairs]
    freq: dict[str, int] = {}
    for ts in token_sets:
        for t in ts:
            freq[t] = freq.get(t, 0) + 1
    rank = {t: (f, t) for t, f in freq.items()}

    kept: list[ImagePair] = []
    kept_tokens: list[frozenset[str]] = []
    index: dict[str, list[int]] = {}
    seen_sigs: set[str] = set()
    kept_empty = False

    for pair, tokens in zip(pairs, token_sets):
        if is_misaligned(pair.caption, pair.label):
            stats.misaligned += 1
            continue
        if pair.signature in seen_sigs:
            stats.duplicate_signature += 1
            continue
        if not tokens:
            duplicate = kept_empty
        else:
            ordered = sorted(tokens, key=rank.__getitem__)
            prefix = ordered[: len(ordered) - math.ceil(threshold * len(ordered) - 1e-9) + 1]
            candidates = {j for t in prefix for j in index.get(t, ())}
            duplicate = any(jaccard(tokens, kept_tokens[j]) >= threshold - 1e-12 for j in candidates)
        if duplicate:
            stats.near_duplicate_caption += 1
            continue
        j = len(kept)
        kept.append(pair)
        kept_tokens.append(tokens)
        seen_sigs.add(pair.signature)
        if not tokens:
            kept_empty = True
        else:
            for t in prefix:
                index.setdefault(t, []).append(j)
    stats.kept = len(kept)
    return kept, stats
