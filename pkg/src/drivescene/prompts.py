"""Scene-conditioned prompt composition and library optimization.

A :class:`PromptLibrary` is an ordered set of :class:`PromptTemplate` blocks.
Exactly one template has an empty trigger (the base block); every other block
is appended when its trigger tags are all present in the scene tags.
:func:`optimize_library` mechanizes the observe-and-adjust loop as seeded
hill climbing over three discrete edits.
"""
from __future__ import annotations

import json
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .core import SceneLabel, TrafficLight, dumps, parse_label_text, write_jsonl
from .errors import EmptyEvalSet, LabelParseError, MissingBaseTemplate

TAG_VOCABULARY = frozenset(
    {"traffic_light", "cone", "crossroad", "pedestrian", "construction", "toll"}
)

EMPHASIS_CLAUSE = "Focus only on objects that affect the ego vehicle's own lane."

EDIT_OPERATORS = ("swap_variant", "add_example", "toggle_emphasis")

DEFAULT_EPSILON = 1e-4


def make_tags(tags: Iterable[str]) -> frozenset[str]:
    tags = frozenset(tags)
    unknown = tags - TAG_VOCABULARY
    if unknown:
        raise ValueError(f"unknown scene tags: {sorted(unknown)}")
    return tags


def derive_scene_tags(label: SceneLabel) -> frozenset[str]:
    """First-pass tags from a prior label (expert output or a cheap query)."""
    tags = set()
    if label.traffic_light is not TrafficLight.ABSENT:
        tags.add("traffic_light")
    if label.obstacles_cones:
        tags.add("cone")
    if label.crossroad:
        tags.add("crossroad")
    return frozenset(tags)


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    body: str
    trigger: frozenset[str] = frozenset()
    variant_pool: tuple[str, ...] = ()
    examples_pool: tuple[str, ...] = ()
    examples: tuple[str, ...] = ()
    emphasis: bool = False
    version: int = 0

    def __post_init__(self):
        if not self.body:
            raise ValueError(f"template {self.id!r}: body must be non-empty")
        object.__setattr__(self, "trigger", make_tags(self.trigger))
        pool = tuple(self.variant_pool)
        if self.body not in pool:
            pool = (self.body,) + pool
        object.__setattr__(self, "variant_pool", pool)
        object.__setattr__(self, "examples_pool", tuple(self.examples_pool))
        object.__setattr__(self, "examples", tuple(self.examples))

    def matches(self, tags: frozenset[str]) -> bool:
        return self.trigger <= tags

    def render(self, tags: frozenset[str]) -> str:
        text = self.body.replace("{tags}", ", ".join(sorted(tags)) or "none")
        if self.emphasis:
            text = f"{text} {EMPHASIS_CLAUSE}"
        for ex in self.examples:
            text = f"{text}\nExample: {ex}"
        return text

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "body": self.body,
            "trigger": sorted(self.trigger),
            "variant_pool": list(self.variant_pool),
            "examples_pool": list(self.examples_pool),
            "examples": list(self.examples),
            "emphasis": self.emphasis,
            "version": self.version,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> PromptTemplate:
        return cls(
            id=d["id"],
            body=d["body"],
            trigger=frozenset(d.get("trigger", ())),
            variant_pool=tuple(d.get("variant_pool", ())),
            examples_pool=tuple(d.get("examples_pool", ())),
            examples=tuple(d.get("examples", ())),
            emphasis=bool(d.get("emphasis", False)),
            version=int(d.get("version", 0)),
        )


@dataclass(frozen=True)
class PromptLibrary:
    templates: tuple[PromptTemplate, ...]
    version: int = 0

    def __post_init__(self):
        object.__setattr__(self, "templates", tuple(self.templates))
        ids = [t.id for t in self.templates]
        if len(set(ids)) != len(ids):
            raise ValueError("template ids must be unique")
        if sum(1 for t in self.templates if not t.trigger) > 1:
            raise ValueError("at most one template may have an empty trigger")

    @property
    def base(self) -> PromptTemplate:
        for t in self.templates:
            if not t.trigger:
                return t
        raise MissingBaseTemplate("library has no template with an empty trigger")

    def get(self, template_id: str) -> PromptTemplate:
        for t in self.templates:
            if t.id == template_id:
                return t
        raise KeyError(template_id)

    def selected(self, tags: Iterable[str]) -> list[PromptTemplate]:
        tags = make_tags(tags)
        return [t for t in self.templates if t.trigger and t.matches(tags)]

    def with_template(self, template: PromptTemplate) -> PromptLibrary:
        templates = tuple(template if t.id == template.id else t for t in self.templates)
        return PromptLibrary(templates, self.version + 1)

    def to_dict(self) -> dict[str, Any]:
        return {"version": self.version, "templates": [t.to_dict() for t in self.templates]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> PromptLibrary:
        return cls(tuple(PromptTemplate.from_dict(t) for t in d["templates"]), int(d.get("version", 0)))


def load_library(path: str | Path) -> PromptLibrary:
    with open(path, encoding="utf-8") as fh:
        return PromptLibrary.from_dict(json.load(fh))


def save_library(library: PromptLibrary, path: str | Path) -> None:
    Path(path).write_text(dumps(library.to_dict()) + "\n", encoding="utf-8")


def compose_prompt(tags: Iterable[str], library: PromptLibrary) -> str:
    """Base block followed by every triggered block, in library order."""
    tags = make_tags(tags)
    blocks = [library.base.render(tags)]
    blocks.extend(t.render(tags) for t in library.selected(tags))
    return "\n\n".join(blocks)


def default_library() -> PromptLibrary:
    return PromptLibrary(
        (
            PromptTemplate(
                id="base",
                body=(
                    "You are a driving assistant. Describe the scene in front of the ego vehicle "
                    "using exactly these sections: Recommended Speed, Traffic Lights, Obstacles, "
                    "Intersection. Write 'none' for a section with nothing to report."
                ),
                variant_pool=(
                    "Answer as a driving assistant with four sections: Recommended Speed (km/h), "
                    "Traffic Lights, Obstacles, Intersection. Use 'none' when absent.",
                ),
                examples_pool=(
                    "Recommended Speed: 40 km/h. Traffic Lights: Red light ahead, please stop and wait. "
                    "Obstacles: none. Intersection: An intersection is ahead, please slow down and "
                    "proceed with caution.",
                    "Recommended Speed: 60 km/h. Traffic Lights: none. Obstacles: none. Intersection: none.",
                ),
            ),
            PromptTemplate(
                id="speed_context",
                trigger=frozenset({"construction"}),
                body="Lower the recommended speed for construction zones, rain, fog and obstacles.",
            ),
            PromptTemplate(
                id="traffic_light",
                trigger=frozenset({"traffic_light"}),
                body="Report the color of the traffic light that governs the ego vehicle's lane.",
                variant_pool=(
                    "Several traffic lights may be visible; report only the light for the ego lane "
                    "(red, yellow or green).",
                ),
            ),
            PromptTemplate(
                id="cone",
                trigger=frozenset({"cone"}),
                body="State whether traffic cones are on the road ahead and how many.",
                variant_pool=("Look for traffic cones in the drivable area ahead and count them.",),
            ),
            PromptTemplate(
                id="crossroad",
                trigger=frozenset({"crossroad"}),
                body="State whether the ego vehicle is approaching an intersection.",
            ),
            PromptTemplate(
                id="pedestrian",
                trigger=frozenset({"crossroad", "pedestrian"}),
                body="Mention pedestrians on zebra crossings at the intersection.",
            ),
            PromptTemplate(
                id="toll",
                trigger=frozenset({"toll", "traffic_light"}),
                body="Lights above toll booths show whether a lane is open; do not report them as traffic lights.",
            ),
        )
    )


# ---------------------------------------------------------------------------
# optimization

@dataclass(frozen=True)
class TraceEntry:
    round: int
    edit: Mapping[str, Any]
    score_before: float
    score_after: float
    accepted: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "round": self.round,
            "edit": dict(self.edit),
            "score_before": self.score_before,
            "score_after": self.score_after,
            "accepted": self.accepted,
        }


@dataclass
class OptimizationTrace:
    entries: list[TraceEntry] = field(default_factory=list)
    initial_score: float = float("nan")

    @property
    def final_score(self) -> float:
        score = self.initial_score
        for e in self.entries:
            if e.accepted:
                score = e.score_after
        return score

    def write(self, path: str | Path) -> None:
        write_jsonl(path, (e.to_dict() for e in self.entries))


Scorer = Callable[[PromptLibrary, Sequence[Any]], float]


def _candidate_edits(template: PromptTemplate) -> list[tuple[str, Any]]:
    edits: list[tuple[str, Any]] = []
    for variant in template.variant_pool:
        if variant != template.body:
            edits.append(("swap_variant", variant))
    for ex in template.examples_pool:
        if ex not in template.examples:
            edits.append(("add_example", ex))
    edits.append(("toggle_emphasis", not template.emphasis))
    return edits


def _apply_edit(template: PromptTemplate, op: str, arg: Any) -> PromptTemplate:
    if op == "swap_variant":
        changed = replace(template, body=arg)
    elif op == "add_example":
        changed = replace(template, examples=template.examples + (arg,))
    elif op == "toggle_emphasis":
        changed = replace(template, emphasis=bool(arg))
    else:
        raise ValueError(f"unknown edit operator {op!r}")
    return replace(changed, version=template.version + 1)


def optimize_library(
    library: PromptLibrary,
    eval_set: Sequence[Any],
    scorer: Scorer,
    budget: int,
    seed: int,
    epsilon: float = DEFAULT_EPSILON,
) -> tuple[PromptLibrary, OptimizationTrace]:
    """Seeded hill climbing over prompt edits.

    Each round picks one template and one of its applicable edits, rescoring
    the edited library; the edit is kept only if the score improves by at
    least ``epsilon``.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if len(eval_set) == 0:
        raise EmptyEvalSet("evaluation set is empty")
    library.base  # noqa: B018 - raises MissingBaseTemplate early
    rng = random.Random(seed)
    current = library
    score = float(scorer(current, eval_set))
    trace = OptimizationTrace(initial_score=score)
    for rnd in range(budget):
        template = current.templates[rng.randrange(len(current.templates))]
        edits = _candidate_edits(template)
        op, arg = edits[rng.randrange(len(edits))]
        candidate = current.with_template(_apply_edit(template, op, arg))
        new_score = float(scorer(candidate, eval_set))
        accepted = new_score >= score + epsilon
        edit = {"template": template.id, "operator": op, "value": arg}
        trace.entries.append(TraceEntry(rnd, edit, score, new_score, accepted))
        if accepted:
            current, score = candidate, new_score
    return current, trace


@dataclass(frozen=True)
class EvalItem:
    """One prompt-optimization example: a scene with its reference label."""

    image_ref: str
    reference: SceneLabel
    tags: frozenset[str] | None = None

    def scene_tags(self) -> frozenset[str]:
        return self.tags if self.tags is not None else derive_scene_tags(self.reference)


def average_scorer(
    infer: Callable[[str, str], str],
    *,
    max_workers: int = 8,
) -> Scorer:
    """Build the default scorer: the evaluation report Average.

    ``infer(prompt, image_ref)`` returns the model's label text.  Queries fan
    out over a thread pool; results are reduced in eval-set order.
    Unparseable answers count as an empty label.
    """
    from .evaluation import labels_to_tasks, build_report

    def score(library: PromptLibrary, items: Sequence[EvalItem]) -> float:
        prompts = [compose_prompt(it.scene_tags(), library) for it in items]
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            texts = list(pool.map(infer, prompts, [it.image_ref for it in items]))
        preds = []
        for text in texts:
            try:
                preds.append(parse_label_text(text))
            except LabelParseError:
                preds.append(SceneLabel())
        refs = [it.reference for it in items]
        return build_report(labels_to_tasks(preds, refs)).average

    return score
