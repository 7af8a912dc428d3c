"""Scene-graph data model: boxes, object labels, relation triplets, and the
implicit background predicate, plus the geometric helpers built on them.

Predicate id 0 is reserved for "no edge". Stored triplets always carry a
foreground predicate; any ordered pair without a stored triplet is
background by convention.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

BACKGROUND_PREDICATE = 0
BACKGROUND_NAME = "background"


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box; (x1, y1) top-left, (x2, y2) bottom-right."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"box coordinates must be finite and >= 0: {self}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box: {self}")

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return self.width * self.height

    @property
    def center(self):
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    def as_list(self):
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass
class SceneGraph:
    """Boxes + object labels + foreground relation triplets for one image.

    triplets are (subject_index, predicate_id, object_index) with
    predicate_id > 0; at most one triplet per ordered pair.
    """

    boxes: list[BoundingBox]
    labels: list[int]
    triplets: list[tuple[int, int, int]] = field(default_factory=list)
    width: float = 1.0
    height: float = 1.0

    def num_regions(self):
        return len(self.boxes)

    def pair_to_predicate(self):
        """{(subject, object): predicate_id} for stored (foreground) pairs."""
        return {(s, o): p for s, p, o in self.triplets}


class LabelVocab:
    """Bijective id <-> name map; ids are dense from 0."""

    def __init__(self, names):
        names = list(names)
        if len(set(names)) != len(names):
            raise ValueError("vocabulary names must be unique")
        self.names = names
        self._ids = {n: i for i, n in enumerate(names)}

    def __len__(self):
        return len(self.names)

    def id(self, name):
        return self._ids[name]

    def name(self, idx):
        return self.names[idx]

    def __contains__(self, name):
        return name in self._ids


class ObjectVocab(LabelVocab):
    pass


class PredicateVocab(LabelVocab):
    """Predicate names with the background class pinned at id 0."""

    def __init__(self, names):
        names = list(names)
        if not names or names[0] != BACKGROUND_NAME:
            raise ValueError(
                f"predicate vocabulary must start with {BACKGROUND_NAME!r} at id 0"
            )
        super().__init__(names)

    @classmethod
    def from_foreground(cls, foreground_names):
        return cls([BACKGROUND_NAME] + list(foreground_names))


@dataclass(frozen=True)
class TripletPrediction:
    """One scored relation prediction. predicate_id is always foreground."""

    subject_index: int
    object_index: int
    predicate_id: int
    score: float
    subject_label: int | None = None
    object_label: int | None = None
    subject_box: BoundingBox | None = None
    object_box: BoundingBox | None = None

    def __post_init__(self):
        if self.predicate_id <= BACKGROUND_PREDICATE:
            raise ValueError("predicted triplets must carry a foreground predicate")
        if not math.isfinite(self.score):
            raise ValueError(f"triplet score must be finite, got {self.score}")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    ix1, iy1 = max(a.x1, b.x1), max(a.y1, b.y1)
    ix2, iy2 = min(a.x2, b.x2), min(a.y2, b.y2)
    if ix2 <= ix1 or iy2 <= iy1:
        return 0.0
    inter = (ix2 - ix1) * (iy2 - iy1)
    return inter / (a.area + b.area - inter)


def box_base_features(box: BoundingBox, img_w: float, img_h: float):
    """Normalized 6-vector: x1/w, y1/h, x2/w, y2/h, area fraction, aspect."""
    if img_w <= 0 or img_h <= 0:
        raise ValueError(f"image dimensions must be positive: {img_w}x{img_h}")
    return [
        box.x1 / img_w,
        box.y1 / img_h,
        box.x2 / img_w,
        box.y2 / img_h,
        box.area / (img_w * img_h),
        box.width / box.height,
    ]


def pair_geometry(a: BoundingBox, b: BoundingBox, img_w: float, img_h: float):
    """Ordered pair features: normalized center offset, log size ratios, iou.

    Swapping the pair flips the offset signs and the log ratios, so the
    relation head sees direction.
    """
    (acx, acy), (bcx, bcy) = a.center, b.center
    return [
        (bcx - acx) / img_w,
        (bcy - acy) / img_h,
        math.log(b.width / a.width),
        math.log(b.height / a.height),
        iou(a, b),
    ]


PAIR_GEOMETRY_DIM = 5


def enumerate_pairs(n: int):
    """All ordered (i, j) with i != j, lexicographic; exactly n*(n-1) pairs."""
    if n < 1:
        raise ValueError("enumerate_pairs needs n >= 1")
    return [(i, j) for i in range(n) for j in range(n) if i != j]


REGION_COUNT_RANGE = (10, 50)


@dataclass
class GraphReport:
    violations: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations


def validate_graph(g: SceneGraph, obj_vocab=None, pred_vocab=None) -> GraphReport:
    """Collect every violated invariant; never raises, never mutates."""
    report = GraphReport()
    bad = report.violations.append
    n = len(g.boxes)
    if len(g.labels) != n:
        bad(f"{len(g.labels)} labels for {n} boxes")
    if obj_vocab is not None:
        for i, lab in enumerate(g.labels):
            if not 0 <= lab < len(obj_vocab):
                bad(f"label {lab} out of range [0, {len(obj_vocab)}) at region {i}")
    seen_pairs = set()
    for t_idx, (s, p, o) in enumerate(g.triplets):
        if not (0 <= s < n and 0 <= o < n):
            bad(f"triplet {t_idx} references region out of range [0, {n}): ({s}, {o})")
            continue
        if s == o:
            bad(f"triplet {t_idx} is a self-loop on region {s}")
        if p <= BACKGROUND_PREDICATE:
            bad(f"triplet {t_idx} stores the background predicate explicitly")
        if pred_vocab is not None and p >= len(pred_vocab):
            bad(f"triplet {t_idx} predicate {p} out of range [1, {len(pred_vocab)})")
        if (s, o) in seen_pairs:
            bad(f"duplicate triplet for ordered pair ({s}, {o}) at index {t_idx}")
        seen_pairs.add((s, o))
    lo, hi = REGION_COUNT_RANGE
    if n and not lo <= n <= hi:
        report.warnings.append(
            f"region count {n} outside the usual [{lo}, {hi}] range"
        )
    return report
