"""Spatial-relation question templates with a geometric answer oracle.

All relations are evaluated in the canonical camera frame, never the
viewpoint frame: with the canonical camera on the -y axis, "left of" means
smaller x, "in front of" means smaller y (closer to the canonical camera).
Answers are a pure function of the scene graph and the canonical camera.

Eight templates over four semantic families (existence, count, color query,
count comparison), each instantiated with one of four spatial relations.
Filter descriptors must match at least one object in the scene and anchor
descriptors exactly one, so no question references an attribute combination
absent from the scene.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .scene import SceneGraph
from .vocab import RELATIONS, SHAPES, QuestionVocab

_QVOCAB = QuestionVocab()

TEMPLATE_IDS = (1, 2, 3, 4, 5, 6, 7, 8)

_FAMILY = {
    1: "exist",
    2: "exist",
    3: "count",
    4: "count",
    5: "color",
    6: "color",
    7: "compare",
    8: "compare",
}


class OracleError(RuntimeError):
    """A binding failed to resolve; generation produced an invalid question."""


@dataclass(frozen=True)
class Descriptor:
    """Attribute filter: None fields match anything; noun is a shape or 'thing'."""

    size: str | None = None
    color: str | None = None
    material: str | None = None
    shape: str | None = None

    def matches(self, obj):
        return (
            (self.size is None or obj.size == self.size)
            and (self.color is None or obj.color == self.color)
            and (self.material is None or obj.material == self.material)
            and (self.shape is None or obj.shape == self.shape)
        )

    def words(self, plural=False):
        parts = [p for p in (self.size, self.color, self.material) if p]
        noun = self.shape if self.shape else ("things" if plural else "thing")
        if self.shape and plural:
            noun = self.shape + "s"
        return " ".join(parts + [noun])

    def to_json(self):
        return {"size": self.size, "color": self.color, "material": self.material, "shape": self.shape}

    @classmethod
    def from_json(cls, d):
        return cls(**d)


@dataclass
class QAItem:
    template_id: int
    bindings: dict
    question: str
    tokens: list
    answer: str
    scene_id: int
    view_ids: list = field(default_factory=list)


def match_indices(scene, desc):
    return [i for i, o in enumerate(scene.objects) if desc.matches(o)]


def relation_holds(scene, i, j, rel):
    """Does object i stand in rel to object j, in the canonical frame?"""
    if i == j:
        return False  # relations are irreflexive
    a, b = scene.objects[i], scene.objects[j]
    if rel == "left of":
        d = a.x - b.x
        neg = True
    elif rel == "right of":
        d = a.x - b.x
        neg = False
    elif rel == "in front of":
        d = a.y - b.y
        neg = True
    elif rel == "behind":
        d = a.y - b.y
        neg = False
    else:
        raise OracleError(f"unknown relation {rel!r}")
    if abs(d) < 1e-9:
        raise OracleError(f"tied pair ({i}, {j}) under {rel!r}; generation must exclude ties")
    return d < 0 if neg else d > 0


def _resolve_anchor(scene, desc, role):
    idxs = match_indices(scene, desc)
    if len(idxs) != 1:
        raise OracleError(f"anchor {role} {desc.words()!r} matches {len(idxs)} objects, need 1")
    return idxs[0]


def _related_matches(scene, filt, rel, anchor_idx):
    return [
        i
        for i in match_indices(scene, filt)
        if i != anchor_idx and relation_holds(scene, i, anchor_idx, rel)
    ]


def answer_oracle(scene, bindings):
    """Recompute the ground-truth answer token from scene geometry."""
    kind = bindings["kind"]
    if kind in ("exist", "count", "color"):
        filt = Descriptor.from_json(bindings["filter"])
        anchor = _resolve_anchor(scene, Descriptor.from_json(bindings["anchor"]), "B")
        hits = _related_matches(scene, filt, bindings["rel"], anchor)
        if kind == "exist":
            return "yes" if hits else "no"
        if kind == "count":
            return str(len(hits))
        if len(hits) != 1:
            raise OracleError(f"color question resolves to {len(hits)} objects, need 1")
        return scene.objects[hits[0]].color
    if kind == "compare":
        filt_a = Descriptor.from_json(bindings["filter"])
        filt_c = Descriptor.from_json(bindings["filter2"])
        anchor_b = _resolve_anchor(scene, Descriptor.from_json(bindings["anchor"]), "B")
        anchor_d = _resolve_anchor(scene, Descriptor.from_json(bindings["anchor2"]), "D")
        na = len(_related_matches(scene, filt_a, bindings["rel"], anchor_b))
        nc = len(_related_matches(scene, filt_c, bindings["rel2"], anchor_d))
        if bindings["comparison"] == "more":
            return "yes" if na > nc else "no"
        return "yes" if na < nc else "no"
    raise OracleError(f"unknown question kind {kind!r}")


def render_question(template_id, bindings):
    rel = bindings.get("rel")
    a = Descriptor.from_json(bindings["filter"]) if "filter" in bindings else None
    b = Descriptor.from_json(bindings["anchor"]) if "anchor" in bindings else None
    if template_id == 1:
        return f"is there a {a.words()} {rel} the {b.words()}"
    if template_id == 2:
        return f"are there any {a.words(plural=True)} {rel} the {b.words()}"
    if template_id == 3:
        return f"how many {a.words(plural=True)} are {rel} the {b.words()}"
    if template_id == 4:
        return f"what number of {a.words(plural=True)} are {rel} the {b.words()}"
    if template_id == 5:
        return f"what color is the {a.words()} {rel} the {b.words()}"
    if template_id == 6:
        return f"what is the color of the {a.words()} {rel} the {b.words()}"
    c = Descriptor.from_json(bindings["filter2"])
    d = Descriptor.from_json(bindings["anchor2"])
    word = "more" if bindings["comparison"] == "more" else "fewer"
    return (
        f"are there {word} {a.words(plural=True)} {rel} the {b.words()} "
        f"than {c.words(plural=True)} {bindings['rel2']} the {d.words()}"
    )


class QuotaTracker:
    """Greedy dataset-level balancing: no answer exceeds max_frac per
    template, and yes/no stays near even across the yes/no families."""

    def __init__(self, max_frac=0.6, yesno_frac=0.55, warmup=5):
        self.max_frac = max_frac
        self.yesno_frac = yesno_frac
        self.warmup = warmup
        self.per_template = {}
        self.yes = 0
        self.no = 0

    def _would_exceed(self, counts, key, limit):
        total = sum(counts.values()) + 1
        if total <= self.warmup:
            return False
        others = [v for k, v in counts.items() if k != key]
        if others and counts.get(key, 0) <= min(others):
            return False  # adding to a (joint) minority can only improve balance
        return (counts.get(key, 0) + 1) / total > limit

    def accepts(self, template_id, answer):
        counts = self.per_template.setdefault(template_id, {})
        if self._would_exceed(counts, answer, self.max_frac):
            return False
        if answer in ("yes", "no"):
            yn = {"yes": self.yes, "no": self.no}
            if self._would_exceed(yn, answer, self.yesno_frac):
                return False
        return True

    def add(self, template_id, answer):
        counts = self.per_template.setdefault(template_id, {})
        counts[answer] = counts.get(answer, 0) + 1
        if answer == "yes":
            self.yes += 1
        elif answer == "no":
            self.no += 1


def _unique_descriptors(scene, rng):
    """For each object, the shortest descriptors matching only it."""
    per_object = []
    attrs = ("size", "color", "material")
    for i, obj in enumerate(scene.objects):
        found = []
        for noun in (obj.shape, None):
            for r in range(len(attrs) + 1):
                for combo in itertools.combinations(attrs, r):
                    desc = Descriptor(
                        size=obj.size if "size" in combo else None,
                        color=obj.color if "color" in combo else None,
                        material=obj.material if "material" in combo else None,
                        shape=noun,
                    )
                    if len(match_indices(scene, desc)) == 1:
                        found.append((r + (0 if noun else 1), desc))
        if found:
            best = min(c for c, _ in found)
            shortest = [d for c, d in found if c <= best + 1]
            per_object.append((i, shortest))
    return per_object


def _random_filter(scene, rng):
    """A descriptor matching at least one object: attributes of a real object,
    randomly generalized."""
    obj = scene.objects[rng.integers(len(scene.objects))]
    keep_shape = rng.random() < 0.7
    desc = Descriptor(
        size=obj.size if rng.random() < 0.3 else None,
        color=obj.color if rng.random() < 0.55 else None,
        material=obj.material if rng.random() < 0.3 else None,
        shape=obj.shape if keep_shape else None,
    )
    if desc == Descriptor():
        desc = Descriptor(color=obj.color)
    return desc


def generate_questions(scene, rng, count=6, tracker=None, max_tries=60, templates=TEMPLATE_IDS):
    """Instantiate balanced questions for one scene.

    Scenes that admit no unambiguous anchors yield fewer questions, never
    invalid ones. Every emitted answer is recomputed through answer_oracle.
    """
    tracker = tracker or QuotaTracker()
    anchors = _unique_descriptors(scene, rng)
    if not anchors:
        return []
    out = []
    for _ in range(max_tries):
        if len(out) >= count:
            break
        tid = int(templates[rng.integers(len(templates))])
        family = _FAMILY[tid]
        rel = RELATIONS[rng.integers(len(RELATIONS))]
        anchor_idx, anchor_descs = anchors[rng.integers(len(anchors))]
        anchor = anchor_descs[rng.integers(len(anchor_descs))]
        bindings = {"kind": family, "rel": rel, "anchor": anchor.to_json()}

        if family in ("exist", "count"):
            bindings["filter"] = _random_filter(scene, rng).to_json()
        elif family == "color":
            # ask the color of the unique object of some shape in relation to B
            target_shape = SHAPES[rng.integers(len(SHAPES))]
            filt = Descriptor(shape=target_shape)
            hits = _related_matches(scene, filt, rel, anchor_idx)
            if len(hits) != 1:
                continue
            bindings["filter"] = filt.to_json()
        else:
            rel2 = RELATIONS[rng.integers(len(RELATIONS))]
            anchor2_idx, anchor2_descs = anchors[rng.integers(len(anchors))]
            anchor2 = anchor2_descs[rng.integers(len(anchor2_descs))]
            bindings.update(
                {
                    "rel2": rel2,
                    "anchor2": anchor2.to_json(),
                    "filter": _random_filter(scene, rng).to_json(),
                    "filter2": _random_filter(scene, rng).to_json(),
                    "comparison": "more" if rng.random() < 0.5 else "fewer",
                }
            )
        try:
            answer = answer_oracle(scene, bindings)
        except OracleError:
            continue
        if answer.isdigit() and int(answer) > 10:
            continue
        if not tracker.accepts(tid, answer):
            continue
        question = render_question(tid, bindings)
        if any(q.question == question for q in out):
            continue
        tracker.add(tid, answer)
        out.append(
            QAItem(
                template_id=tid,
                bindings=bindings,
                question=question,
                tokens=_QVOCAB.encode(question),
                answer=answer,
                scene_id=scene.scene_id,
            )
        )
    return out
