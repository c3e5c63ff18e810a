"""Occlusion localization maps, box extraction, improbable products, typographic attack."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import synthcat as sc
from .encoder import Model
from .evalsuite import EmbeddingIndex, SORTAL_TEMPLATE, build_index, gold_positions, zero_shot_scores


@dataclass(frozen=True)
class OccluderConfig:
    patch_size: int = 8
    stride: int = 4
    fill_color: tuple[int, int, int] = (255, 255, 255)

    def __post_init__(self):
        if not (self.patch_size >= self.stride >= 1):
            raise ValueError(f"need patch_size >= stride >= 1, got {self.patch_size}, {self.stride}")

    def grid_shape(self, height: int, width: int) -> tuple[int, int]:
        if self.patch_size > min(height, width):
            raise ValueError(f"occluder of {self.patch_size} px does not fit a {height}x{width} image")
        return ((height - self.patch_size) // self.stride + 1, (width - self.patch_size) // self.stride + 1)

    def to_dict(self):
        return {"patch_size": self.patch_size, "stride": self.stride, "fill_color": list(self.fill_color)}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "fill_color" in d:
            d["fill_color"] = tuple(d["fill_color"])
        return cls(**d)


class PixelBox(NamedTuple):
    """Inclusive pixel rectangle."""
    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def area(self) -> int:
        return (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)

    def contains_point(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1


@dataclass
class LocalizationMap:
    scores: np.ndarray  # (gh, gw), >= 0
    occluder: OccluderConfig
    base_similarity: float
    image_shape: tuple[int, int]

    def cell_box(self, gy: int, gx: int) -> PixelBox:
        s, p = self.occluder.stride, self.occluder.patch_size
        return PixelBox(gx * s, gy * s, gx * s + p - 1, gy * s + p - 1)

    def argmax_cell(self) -> tuple[int, int]:
        """First maximum in row-major order."""
        gy, gx = np.unravel_index(int(np.argmax(self.scores)), self.scores.shape)
        return int(gy), int(gx)

    def to_dict(self):
        return {"grid": self.scores.tolist(), "occluder": self.occluder.to_dict(),
                "base_similarity": self.base_similarity, "image_shape": list(self.image_shape)}


def occlusions(image: np.ndarray, occ: OccluderConfig):
    """Yield (gy, gx, occluded image or None when the patch changes nothing), row-major."""
    h, w = image.shape[:2]
    gh, gw = occ.grid_shape(h, w)
    fill = np.asarray(occ.fill_color, dtype=image.dtype)
    p, s = occ.patch_size, occ.stride
    for gy in range(gh):
        for gx in range(gw):
            patch = image[gy * s:gy * s + p, gx * s:gx * s + p]
            if np.all(patch == fill):
                yield gy, gx, None
                continue
            out = image.copy()
            out[gy * s:gy * s + p, gx * s:gx * s + p] = fill
            yield gy, gx, out


def localization_map(image, text: str, model: Model, occ: OccluderConfig = OccluderConfig()) -> LocalizationMap:
    """Similarity drop caused by occluding each grid position, floored at 0.

    Positions whose patch already equals the fill colour leave the image
    unchanged and get score exactly 0 without being re-encoded.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    gh, gw = occ.grid_shape(h, w)
    t = model.texts([text])[0]
    base = float(model.images(image[None])[0] @ t)
    cells, batch = [], []
    for gy, gx, img in occlusions(image, occ):
        if img is not None:
            cells.append((gy, gx))
            batch.append(img)
    scores = np.zeros((gh, gw))
    if batch:
        sims = model.images(np.stack(batch)) @ t
        for (gy, gx), sim in zip(cells, sims):
            scores[gy, gx] = max(0.0, base - float(sim))
    return LocalizationMap(scores, occ, base, (h, w))


def extract_bbox(lmap: LocalizationMap, threshold_frac: float = 0.5) -> PixelBox | None:
    """Minimal rectangle covering the footprints of all cells >= frac * max."""
    top = float(lmap.scores.max())
    if top <= 0:
        return None
    gys, gxs = np.nonzero(lmap.scores >= threshold_frac * top)
    boxes = [lmap.cell_box(int(y), int(x)) for y, x in zip(gys, gxs)]
    h, w = lmap.image_shape
    return PixelBox(min(b.x0 for b in boxes), min(b.y0 for b in boxes),
                    min(w - 1, max(b.x1 for b in boxes)), min(h - 1, max(b.y1 for b in boxes)))


def iou(a, b) -> float:
    a, b = PixelBox(*a), PixelBox(*b)
    ix = min(a.x1, b.x1) - max(a.x0, b.x0) + 1
    iy = min(a.y1, b.y1) - max(a.y0, b.y0) + 1
    inter = max(0, ix) * max(0, iy)
    return inter / (a.area + b.area - inter)


# ---------------------------------------------------------------------------
# Map-based evaluations
# ---------------------------------------------------------------------------


def argmax_in_box(lmap: LocalizationMap, box) -> bool:
    """Whether the centre of the top-scoring occluder lies inside ``box``."""
    box = PixelBox(*box)
    cell = lmap.cell_box(*lmap.argmax_cell())
    cx, cy = (cell.x0 + cell.x1) / 2, (cell.y0 + cell.y1) / 2
    return box.contains_point(cx, cy)


def argmax_patch_intersects(lmap: LocalizationMap, box) -> bool:
    """Looser rule: the top-scoring occluder patch overlaps ``box`` at all."""
    return iou(lmap.cell_box(*lmap.argmax_cell()), box) > 0


@dataclass
class GroundingResult:
    product_id: str
    query: str
    lmap: LocalizationMap
    gt_box: tuple
    pred_box: PixelBox | None
    hit: bool
    iou: float

    def to_dict(self):
        return {"product_id": self.product_id, "query": self.query, "gt_box": list(self.gt_box),
                "pred_box": list(self.pred_box) if self.pred_box else None,
                "argmax_cell": list(self.lmap.argmax_cell()), "hit": self.hit,
                "patch_intersects": argmax_patch_intersects(self.lmap, self.gt_box), "iou": self.iou}


def ground(product, query: str, concept: str, model: Model, occ: OccluderConfig = OccluderConfig(),
           threshold_frac: float = 0.5) -> GroundingResult:
    lmap = localization_map(product.image, query, model, occ)
    gt = product.gt_boxes[concept]
    pred = extract_bbox(lmap, threshold_frac)
    return GroundingResult(product.id, query, lmap, tuple(gt), pred,
                           argmax_in_box(lmap, gt), iou(pred, gt) if pred else 0.0)


def brand_localization(products, model: Model, occ: OccluderConfig = OccluderConfig()):
    """Per-product brand-query grounding; returns (hit fraction, results)."""
    results = [ground(p, p.brand, p.brand, model, occ) for p in products if p.brand]
    if not results:
        raise ValueError("no branded products to localize")
    return float(np.mean([r.hit for r in results])), results


def sortal_segmentation(products, model: Model, occ: OccluderConfig = OccluderConfig(),
                        threshold_frac: float = 0.5):
    """Per-product sortal-query box extraction; returns (mean IoU, results)."""
    results = [ground(p, p.spec.sortal, p.spec.sortal, model, occ, threshold_frac) for p in products]
    if not results:
        raise ValueError("no products to segment")
    return float(np.mean([r.iou for r in results])), results


# ---------------------------------------------------------------------------
# Improbable products
# ---------------------------------------------------------------------------

FILLERS = ("the flag of italy", "a hat", "a bag", "a shoe", "a dress", "a tshirt")


def _with(np_: sc.NounPhrase, **kw) -> sc.NounPhrase:
    return replace(np_, **kw)


def distractor_labels(np_: sc.NounPhrase, rng, size: int = 10, holdout_brands=("fendi", "dior"),
                      holdout_category: str = "pochette") -> list[str]:
    """The true phrase plus ``size - 1`` near-miss distractors, shuffled.

    Distractors swap the brand, swap or change colors (including the
    body/part color assignment), swap the sortal, drop the features, and
    finally fall back to unrelated fillers and random phrases.
    """
    truth = np_.text()
    brands = [b for b in sc.BRANDS if b not in holdout_brands]
    sortals = [s for s in sc.SORTALS if s != holdout_category]
    colors = sorted(sc.COLORS)
    mods = list(np_.modifiers)
    cands: list[str] = []

    def pick(seq, n):
        seq = list(seq)
        idx = rng.permutation(len(seq))[:n]
        return [seq[i] for i in sorted(idx)]

    # brand swap (or brand added)
    bi = next((i for i, (k, _) in enumerate(mods) if k == "brand"), None)
    if bi is not None:
        for b in pick([b for b in brands if b != mods[bi][1]], 2):
            m = list(mods)
            m[bi] = ("brand", b)
            cands.append(_with(np_, modifiers=tuple(m)).text())
    else:
        for b in pick(brands, 1):
            cands.append(_with(np_, modifiers=(("brand", b), *mods), head=np_.head + 1).text())
    # color / part swaps
    ci = [i for i, (k, _) in enumerate(mods) if k == "color"]
    if len(ci) >= 2:
        m = list(mods)
        m[ci[0]], m[ci[1]] = m[ci[1]], m[ci[0]]
        cands.append(_with(np_, modifiers=tuple(m)).text())
        m = list(mods)
        m[ci[1]] = m[ci[0]]
        cands.append(_with(np_, modifiers=tuple(m)).text())
    for i in ci[:1]:
        for c in pick([c for c in colors if c != mods[i][1]], 2):
            m = list(mods)
            m[i] = ("color", c)
            cands.append(_with(np_, modifiers=tuple(m)).text())
    # sortal swap
    for s in pick([s for s in sortals if s != np_.sortal], 2):
        cands.append(_with(np_, sortal=s).text())
    # features dropped
    if any(k == "feature" for k, _ in mods):
        body = [(k, v) for i, (k, v) in enumerate(mods[:np_.head]) if k != "feature"]
        cands.append(sc.NounPhrase(np_.sortal, tuple(body), len(body)).text())
    cands.extend(FILLERS[:2])
    while len(set(cands) - {truth}) < size - 1:
        cands.append(f"{colors[int(rng.integers(len(colors)))]} {sortals[int(rng.integers(len(sortals)))]}")
    labels = [truth]
    for c in cands:
        if c not in labels and len(labels) < size:
            labels.append(c)
    return [labels[i] for i in rng.permutation(len(labels))]


def label_sets_for(products, seed: int, size: int = 10, cfg: sc.CatalogConfig = sc.CatalogConfig()):
    rng = np.random.default_rng([seed, 21])
    return [distractor_labels(sc.parse_np(p.caption), rng, size, cfg.holdout_brands, cfg.holdout_category)
            for p in products]


def improbable_classification(products, label_sets, model: Model) -> float:
    if len(products) != len(label_sets):
        raise ValueError("one label set per product is required")
    for p, labels in zip(products, label_sets):
        if p.caption not in labels:
            raise ValueError(f"true label {p.caption!r} missing from its label set")
    embs = model.images(np.stack([p.image for p in products]))
    correct = 0
    for p, e, labels in zip(products, embs, label_sets):
        scores = zero_shot_scores(e[None], labels, SORTAL_TEMPLATE, model)[0]
        correct += labels[int(np.argmax(scores))] == p.caption
    return correct / len(products)


def improbable_retrieval(products, test_index: EmbeddingIndex, model: Model, k: int = 5):
    """HitRate@1 and HitRate@k with the improbable images added to the pool."""
    pool = test_index.extend(build_index(products, model))
    queries = model.texts([p.caption for p in products])
    pos = gold_positions(queries, [p.id for p in products], pool)
    return float(np.mean(pos < 1)), float(np.mean(pos < k))


# ---------------------------------------------------------------------------
# Typographic attack
# ---------------------------------------------------------------------------


@dataclass
class AttackReport:
    word: str
    n: int
    mean_delta: float
    flip_rate: float
    deltas: list[float] = field(default_factory=list)

    def to_dict(self):
        return {"word": self.word, "n": self.n, "mean_delta": self.mean_delta, "flip_rate": self.flip_rate}


def attack_candidates(products, word: str, n: int | None = None) -> list:
    """Unbranded, non-black products whose logo spot can hold ``word``."""
    out = []
    for p in products:
        if p.brand or p.spec is None or p.spec.color == "black":
            continue
        try:
            sc.apply_typographic_attack(p, word)
        except ValueError:
            continue
        out.append(p)
        if n is not None and len(out) == n:
            break
    return out


def typographic_attack_eval(products, brand_word: str, model: Model) -> AttackReport:
    """Similarity to ``brand_word`` before/after printing it on each product.

    A flip is a product whose zero-shot choice between its sortal name and
    ``brand_word`` moves from the sortal before the attack to the brand
    after it; the rate is over all products.
    """
    if not products:
        raise ValueError("no products to attack")
    attacked = [sc.apply_typographic_attack(p, brand_word) for p in products]
    before = model.images(np.stack([p.image for p in products]))
    after = model.images(np.stack([p.image for p in attacked]))
    t_brand = model.texts([brand_word])[0]
    deltas = after @ t_brand - before @ t_brand
    flips = 0
    for p, b, a in zip(products, before, after):
        labels = [p.spec.sortal, brand_word]
        t = model.texts(labels)
        flips += int(np.argmax(t @ b)) == 0 and int(np.argmax(t @ a)) == 1
    return AttackReport(brand_word, len(products), float(np.mean(deltas)), flips / len(products),
                        [float(d) for d in deltas])
