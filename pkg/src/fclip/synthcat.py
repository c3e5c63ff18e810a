"""Procedural fashion catalog: rendering, captions, splits and improbable products.

Every product is a pure function of its :class:`ProductSpec`. Geometry is laid
out on a 64x64 canvas; ``spec.seed`` only controls a small translation jitter.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import glyphs

IMAGE_SIZE = 64
WHITE = (255, 255, 255)
JITTER = 3

COLORS = {
    "red": (220, 30, 30),
    "blue": (30, 70, 200),
    "green": (30, 160, 60),
    "yellow": (240, 210, 30),
    "black": (25, 25, 25),
    "purple": (130, 40, 170),
    "orange": (245, 130, 20),
    "pink": (240, 120, 180),
}

SORTALS = ("dress", "tshirt", "shoe", "bag", "hat", "pochette")
PATTERNS = ("plain", "stripes", "dots")
PATTERN_WORDS = {"stripes": "striped", "dots": "dotted"}
STYLES = ("classic", "streetwear", "edgy", "casual")

LEGAL_FEATURES = {
    "dress": ("long_sleeves", "belt"),
    "tshirt": ("long_sleeves", "pocket"),
    "shoe": ("high_heels", "ankle_strap", "laces"),
    "bag": ("handles", "shoulder_strap"),
    "hat": ("brim", "feather"),
    "pochette": ("handles", "shoulder_strap"),
}
FEATURES = tuple(sorted({f for fs in LEGAL_FEATURES.values() for f in fs}))

# brand -> (logo mark, sortals the brand makes). "text" marks render the name.
BRANDS = {
    "nike": ("swoosh", ("tshirt", "shoe", "bag", "hat", "pochette")),
    "gucci": ("square", SORTALS),
    "armani": ("chevron", ("dress", "tshirt", "shoe", "bag", "pochette")),
    "prada": ("triangle", ("dress", "shoe", "bag", "pochette")),
    "versace": ("ring", ("dress", "tshirt", "bag", "hat", "pochette")),
    "zara": ("text", SORTALS),
    "fendi": ("bars", SORTALS),
    "dior": ("diamond", SORTALS),
}
TEXT_BRAND = "zara"
# abstract marks are drawn at this integer upscale; the text logo stays at font size
MARK_SCALE = 2
# logos are printed in black on a light label, so they look the same on any body color
TAG_COLOR = (225, 225, 225)
TAG_MARGIN = 1

TAXONOMY = {
    "dress": ("Clothing", "Dresses"),
    "tshirt": ("Clothing", "T-Shirts"),
    "shoe": ("Clothing", "Shoes"),
    "bag": ("Accessories", "Bags"),
    "hat": ("Accessories", "Hats"),
    "pochette": ("Accessories", "Pochettes"),
}
_PATTERN_LEAF = {"plain": "Plain", "stripes": "Striped", "dots": "Dotted"}

SPLITS = ("train", "val", "test", "hout_c", "hout_b")
IMPROBABLE_SPLIT = "improbable"
VARIANTS = ("standard", "gray_lowres", "textured", "alt_style")


class SpecError(ValueError):
    """A ProductSpec that violates the legality tables."""


class ParseError(ValueError):
    """Text that is not a valid noun phrase."""


class InvalidFormulaError(ParseError):
    pass


class AmbiguousSortalError(ParseError):
    pass


class CatalogConfigError(ValueError):
    pass


def feature_text(feature: str) -> str:
    return feature.replace("_", " ")


# ---------------------------------------------------------------------------
# Specs and products
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProductSpec:
    sortal: str
    color: str
    pattern: str = "plain"
    features: tuple[str, ...] = ()
    brand: str | None = None
    styles: tuple[str, ...] = ()
    seed: int = 0
    feature_colors: tuple[tuple[str, str], ...] = ()

    def to_dict(self):
        return {
            "sortal": self.sortal, "color": self.color, "pattern": self.pattern,
            "features": list(self.features), "brand": self.brand, "styles": list(self.styles),
            "seed": self.seed, "feature_colors": [list(p) for p in self.feature_colors],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(sortal=d["sortal"], color=d["color"], pattern=d.get("pattern", "plain"),
                   features=tuple(d.get("features", ())), brand=d.get("brand"),
                   styles=tuple(d.get("styles", ())), seed=int(d.get("seed", 0)),
                   feature_colors=tuple(tuple(p) for p in d.get("feature_colors", ())))


def validate_spec(spec: ProductSpec, legal_only: bool = True):
    if spec.sortal not in SORTALS:
        raise SpecError(f"unknown sortal {spec.sortal!r}")
    if spec.color not in COLORS:
        raise SpecError(f"unknown color {spec.color!r}")
    if spec.pattern not in PATTERNS:
        raise SpecError(f"unknown pattern {spec.pattern!r}")
    if spec.brand is not None and spec.brand not in BRANDS:
        raise SpecError(f"unknown brand {spec.brand!r}")
    for s in spec.styles:
        if s not in STYLES:
            raise SpecError(f"unknown style {s!r}")
    for f in spec.features:
        if f not in FEATURES:
            raise SpecError(f"unknown feature {f!r}")
        if legal_only and f not in LEGAL_FEATURES[spec.sortal]:
            raise SpecError(f"illegal feature-for-sortal combination: ({spec.sortal}, {f})")
    if len(set(spec.features)) != len(spec.features):
        raise SpecError(f"duplicate features in {spec.features}")
    for f, c in spec.feature_colors:
        if f not in spec.features or c not in COLORS:
            raise SpecError(f"bad feature color ({f}, {c})")


DARK_COLORS = ("black", "blue", "green", "purple")


def assign_styles(color: str, pattern: str, features=()) -> tuple[str, ...]:
    """Deterministic merchandising rule over color family and pattern.

    Neither the sortal nor its features enter, so style labels cut across
    the taxonomy. Every item gets at least one style; dotted black or red
    items get two. ``features`` is accepted for call-site symmetry only.
    """
    dark = color in DARK_COLORS
    out = []
    if pattern == "plain" and dark:
        out.append("classic")
    if pattern == "stripes" and not dark:
        out.append("streetwear")
    if (pattern == "stripes" and dark) or (pattern == "dots" and color in ("black", "red")):
        out.append("edgy")
    if (pattern == "plain" and not dark) or pattern == "dots":
        out.append("casual")
    return tuple(out)


Box = tuple[int, int, int, int]


@dataclass
class Product:
    id: str
    image: np.ndarray
    caption: str
    highlights: list[str]
    tree: list[str]
    brand: str
    styles: list[str]
    split: str
    gt_boxes: dict[str, Box]
    spec: ProductSpec | None = None

    def record(self) -> dict:
        return {
            "id": self.id,
            "caption": self.caption,
            "highlights": list(self.highlights),
            "tree": list(self.tree),
            "brand": self.brand,
            "styles": list(self.styles),
            "split": self.split,
            "image_path": f"images/{self.id}.png",
            "gt_boxes": {k: list(v) for k, v in self.gt_boxes.items()},
        }


# ---------------------------------------------------------------------------
# Raster primitives (boolean masks on the canvas, pixel centers at integers)
# ---------------------------------------------------------------------------

_YY, _XX = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]


def _poly(points):
    """Even-odd fill of a polygon given as [(x, y), ...]."""
    x, y = _XX + 0.0, _YY + 0.0
    inside = np.zeros(x.shape, dtype=bool)
    n = len(points)
    for i in range(n):
        x1, y1 = points[i]
        x2, y2 = points[(i + 1) % n]
        if y1 == y2:
            continue
        cond = (y1 > y) != (y2 > y)
        xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= cond & (x < xc)
    # include the boundary rows/cols the half-open rule leaves out
    return inside | _poly_edges(points)


def _poly_edges(points):
    m = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    for i in range(len(points)):
        m |= _segment(points[i], points[(i + 1) % len(points)], 0.5)
    return m


def _rect(x0, y0, x1, y1):
    return (_XX >= x0) & (_XX <= x1) & (_YY >= y0) & (_YY <= y1)


def _ellipse(cx, cy, rx, ry):
    return ((_XX - cx) / rx) ** 2 + ((_YY - cy) / ry) ** 2 <= 1.0


def _segment(p, q, r):
    (px, py), (qx, qy) = p, q
    dx, dy = qx - px, qy - py
    L2 = dx * dx + dy * dy
    t = np.clip(((_XX - px) * dx + (_YY - py) * dy) / L2, 0, 1) if L2 else np.zeros(_XX.shape)
    cx, cy = px + t * dx, py + t * dy
    return (_XX - cx) ** 2 + (_YY - cy) ** 2 <= r * r


def _bbox(mask) -> Box | None:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def _lum(rgb):
    r, g, b = rgb
    return 0.299 * r + 0.587 * g + 0.114 * b


def _lighten(rgb, a):
    return tuple(int(round(c + (255 - c) * a)) for c in rgb)


def _shade(rgb):
    if _lum(rgb) > 70:
        return tuple(int(round(c * 0.55)) for c in rgb)
    return _lighten(rgb, 0.45)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


@dataclass
class Geometry:
    body: np.ndarray          # sortal silhouette (pattern applies here)
    trim: np.ndarray          # sortal parts drawn in the shade color (sole, flap)
    cut: np.ndarray           # pixels removed from the body (neck openings)
    anchors: dict


def _geometry(sortal: str, dx: int, dy: int) -> Geometry:
    def P(x, y):
        return (x + dx, y + dy)

    z = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    trim, cut = z.copy(), z.copy()
    if sortal == "dress":
        body = _poly([P(27, 6), P(37, 6), P(39, 22), P(50, 58), P(14, 58), P(25, 22)])
        a = dict(shoulder_l=P(27, 7), shoulder_r=P(37, 7), top=P(32, 6), waist=(25, 39, 21),
                 chest=P(27, 9), logo=P(32, 47), base=(14, 50, 58), feather=P(37, 8),
                 heel=P(16, 58), opening=P(24, 6), lace=P(30, 12))
    elif sortal == "tshirt":
        body = (_rect(*P(19, 14), *P(45, 56))
                | _poly([P(19, 14), P(10, 23), P(14, 28), P(19, 24)])
                | _poly([P(45, 14), P(54, 23), P(50, 28), P(45, 24)]))
        cut = _ellipse(*P(32, 13), 5, 3)
        a = dict(shoulder_l=P(19, 15), shoulder_r=P(45, 15), top=P(32, 14), waist=(19, 45, 46),
                 chest=P(23, 18), logo=P(32, 36), base=(19, 45, 56), feather=P(44, 14),
                 heel=P(20, 56), opening=P(20, 14), lace=P(30, 20))
    elif sortal == "shoe":
        body = _poly([P(10, 24), P(28, 24), P(34, 30), P(54, 36), P(56, 44), P(10, 44)])
        trim = _rect(*P(9, 44), *P(56, 47))
        a = dict(shoulder_l=P(10, 24), shoulder_r=P(28, 24), top=P(19, 24), waist=(10, 54, 40),
                 chest=P(13, 27), logo=P(23, 36), base=(9, 56, 47), feather=P(30, 27),
                 heel=P(10, 48), opening=P(12, 24), lace=P(29, 29))
    elif sortal == "bag":
        body = _rect(*P(15, 24), *P(49, 52))
        a = dict(shoulder_l=P(16, 24), shoulder_r=P(48, 24), top=P(32, 24), waist=(15, 49, 29),
                 chest=P(18, 27), logo=P(32, 40), base=(15, 49, 52), feather=P(46, 24),
                 heel=P(16, 53), opening=P(20, 24), lace=P(36, 27))
    elif sortal == "hat":
        body = (_ellipse(*P(32, 34), 15, 16) & (_YY <= 34 + dy)) | _rect(*P(17, 34), *P(47, 40))
        a = dict(shoulder_l=P(19, 28), shoulder_r=P(45, 28), top=P(32, 18), waist=(17, 47, 34),
                 chest=P(22, 23), logo=P(32, 30), base=(17, 47, 40), feather=P(44, 26),
                 heel=P(18, 41), opening=P(20, 22), lace=P(36, 22))
    elif sortal == "pochette":
        trim = _poly([P(16, 24), P(48, 24), P(32, 32)])
        body = _rect(*P(16, 24), *P(48, 53)) & ~trim
        a = dict(shoulder_l=P(17, 24), shoulder_r=P(47, 24), top=P(32, 24), waist=(16, 48, 29),
                 chest=P(19, 37), logo=P(32, 43), base=(16, 48, 53), feather=P(46, 24),
                 heel=P(17, 54), opening=P(20, 24), lace=P(36, 26))
    else:
        raise SpecError(f"unknown sortal {sortal!r}")
    a["waist"] = (a["waist"][0] + dx, a["waist"][1] + dx, a["waist"][2] + dy)
    a["base"] = (a["base"][0] + dx, a["base"][1] + dx, a["base"][2] + dy)
    return Geometry(body=body & ~cut, trim=trim & ~body & ~cut, cut=cut, anchors=a)


def _feature_mask(feature: str, a: dict) -> np.ndarray:
    if feature == "long_sleeves":
        (lx, ly), (rx, ry) = a["shoulder_l"], a["shoulder_r"]
        left = _poly([(lx, ly), (lx - 10, ly + 7), (lx - 14, ly + 32), (lx - 8, ly + 33), (lx, ly + 12)])
        right = _poly([(rx, ry), (rx + 10, ry + 7), (rx + 14, ry + 32), (rx + 8, ry + 33), (rx, ry + 12)])
        return left | right
    if feature == "belt":
        xl, xr, y = a["waist"]
        return _rect(xl - 1, y, xr + 1, y + 3)
    if feature == "pocket":
        x, y = a["chest"]
        return _rect(x, y, x + 5, y + 5)
    if feature == "high_heels":
        x, y = a["heel"]
        return _poly([(x, y), (x + 8, y), (x + 7, y + 10), (x + 2, y + 10)])
    if feature == "ankle_strap":
        x, y = a["opening"]
        return _rect(x, y - 6, x + 18, y) & ~_rect(x + 2, y - 4, x + 16, y)
    if feature == "laces":
        x, y = a["lace"]
        m = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
        for ox, oy in ((0, 0), (3, 2), (6, 3)):
            m |= _segment((x + ox, y + oy), (x + ox + 3, y + oy - 3), 0.75)
        return m
    if feature == "handles":
        cx, cy = a["top"]
        return _ellipse(cx, cy, 11, 12) & ~_ellipse(cx, cy, 8, 9) & (_YY <= cy)
    if feature == "shoulder_strap":
        (lx, ly), (rx, ry), (tx, ty) = a["shoulder_l"], a["shoulder_r"], a["top"]
        apex = (tx, max(ty - 18, 3))
        return _segment((lx, ly), apex, 1.0) | _segment(apex, (rx, ry), 1.0)
    if feature == "brim":
        xl, xr, y = a["base"]
        return _ellipse((xl + xr) / 2, y, (xr - xl) / 2 + 9, 3)
    if feature == "feather":
        x, y = a["feather"]
        return _poly([(x, y), (x + 10, y - 14), (x + 13, y - 12), (x + 3, y + 4)])
    raise SpecError(f"unknown feature {feature!r}")


def _logo_bitmap(brand: str) -> np.ndarray:
    mark = BRANDS[brand][0]
    if mark == "text":
        return glyphs.render_text(brand)
    return np.kron(glyphs.MARKS[mark], np.ones((MARK_SCALE, MARK_SCALE), dtype=bool))


def _place(bitmap: np.ndarray, center) -> tuple[np.ndarray, Box]:
    h, w = bitmap.shape
    cx, cy = center
    x0, y0 = cx - (w - 1) // 2, cy - (h - 1) // 2
    m = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    ys, xs = np.nonzero(bitmap)
    m[ys + y0, xs + x0] = True
    return m, (x0, y0, x0 + w - 1, y0 + h - 1)


def _jitter(seed: int) -> tuple[int, int]:
    dx, dy = np.random.default_rng(seed).integers(-JITTER, JITTER + 1, size=2)
    return int(dx), int(dy)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


@dataclass
class Rendered:
    image: np.ndarray
    gt_boxes: dict[str, Box]
    item_mask: np.ndarray
    geometry: Geometry


def _render(spec: ProductSpec, variant: str = "standard", legal_only: bool = True) -> Rendered:
    validate_spec(spec, legal_only=legal_only)
    if variant not in VARIANTS:
        raise ValueError(f"unknown render variant {variant!r}; expected one of {VARIANTS}")
    geo = _geometry(spec.sortal, *_jitter(spec.seed))
    rgb = COLORS[spec.color]
    img = np.full((IMAGE_SIZE, IMAGE_SIZE, 3), 255, dtype=np.uint8)
    body = geo.body
    img[body] = rgb
    if spec.pattern == "stripes":
        oy = geo.anchors["top"][1]
        img[body & (((_YY - oy) // 3) % 2 == 1)] = _lighten(rgb, 0.55)
    elif spec.pattern == "dots":
        ox, oy = geo.anchors["top"]
        img[body & ((_XX - ox) % 6 < 2) & ((_YY - oy) % 6 < 2)] = _lighten(rgb, 0.55)
    img[geo.trim] = _shade(rgb)
    item = body | geo.trim
    boxes: dict[str, Box] = {}
    fcolors = dict(spec.feature_colors)
    for f in spec.features:
        fm = _feature_mask(f, geo.anchors)
        img[fm] = COLORS[fcolors[f]] if f in fcolors else _shade(rgb)
        item |= fm
        boxes[feature_text(f)] = _bbox(fm)
    if spec.brand is not None:
        lm, lbox = _place(_logo_bitmap(spec.brand), geo.anchors["logo"])
        x0, y0, x1, y1 = lbox
        x0, y0, x1, y1 = lbox = (x0 - TAG_MARGIN, y0 - TAG_MARGIN, x1 + TAG_MARGIN, y1 + TAG_MARGIN)
        footprint = _rect(x0, y0, x1, y1)
        if not np.all(body[footprint]):
            raise SpecError(f"logo of {spec.brand} does not fit inside the {spec.sortal} silhouette")
        img[footprint] = TAG_COLOR
        img[lm] = (0, 0, 0)
        boxes[spec.brand] = lbox
    # item pixels are never pure white so the background stays unambiguous
    white = item & np.all(img == 255, axis=-1)
    img[white] = (254, 254, 254)
    boxes[spec.sortal] = _bbox(item)
    img = _apply_variant(img, item, variant, spec.seed)
    return Rendered(image=img, gt_boxes=boxes, item_mask=item, geometry=geo)


def _apply_variant(img, item, variant, seed):
    if variant == "standard":
        return img
    if variant == "gray_lowres":
        gray = Image.fromarray(img).convert("L").resize((24, 24), Image.BILINEAR)
        g = np.asarray(gray.resize((IMAGE_SIZE, IMAGE_SIZE), Image.NEAREST), dtype=np.int32)
        g = np.minimum((g // 32) * 32 + 16, 255)
        g[g >= 240] = 255
        return np.repeat(g[..., None], 3, axis=-1).astype(np.uint8)
    if variant == "textured":
        rng = np.random.default_rng([seed, 7])
        base = np.array([205, 190, 165], dtype=np.int32)
        stripes = (((_XX + _YY) // 4) % 2)[..., None] * np.array([-25, -25, -20])
        noise = rng.integers(-12, 13, size=(IMAGE_SIZE, IMAGE_SIZE, 1))
        bg = np.clip(base + stripes + noise, 0, 255).astype(np.uint8)
        out = img.copy()
        out[~item] = bg[~item]
        return out
    if variant == "alt_style":
        # light fill with a dark two-pixel outline in the item's own hue
        out = np.full_like(img, 255)
        inner = item.copy()
        for _ in range(2):
            inner = inner & np.roll(inner, 1, 0) & np.roll(inner, -1, 0) & np.roll(inner, 1, 1) & np.roll(inner, -1, 1)
        edge = item & ~inner
        px = img[inner].astype(np.int32)
        out[inner] = (px + (255 - px) // 2).astype(np.uint8)
        out[edge] = (img[edge].astype(np.int32) * 0.5).astype(np.uint8)
        return out
    raise ValueError(variant)


def _tree(spec: ProductSpec) -> list[str]:
    l1, l2 = TAXONOMY[spec.sortal]
    return [l1, l2, f"{_PATTERN_LEAF[spec.pattern]} {l2}"]


def render_product(spec: ProductSpec, variant: str = "standard", product_id: str = "",
                   split: str = "test", caption_template: int | None = None) -> Product:
    """Render ``spec`` into a Product. Illegal feature/sortal pairs raise SpecError."""
    r = _render(spec, variant)
    caption, highlights = generate_caption(spec, np.random.default_rng([spec.seed, 3]), caption_template)
    return Product(
        id=product_id or f"spec-{spec_digest(spec)[:12]}",
        image=r.image, caption=caption, highlights=highlights, tree=_tree(spec),
        brand=spec.brand or "", styles=list(spec.styles), split=split, gt_boxes=r.gt_boxes, spec=spec)


def spec_digest(spec: ProductSpec) -> str:
    return hashlib.sha256(json.dumps(spec.to_dict(), sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Captions
# ---------------------------------------------------------------------------

N_TEMPLATES = 3


def _features_phrase(features, fcolors=None) -> list[str]:
    fcolors = fcolors or {}
    words = []
    for i, f in enumerate(features):
        if i and i == len(features) - 1:
            words.append("and")
        if f in fcolors:
            words.append(fcolors[f])
        words.append(feature_text(f))
    return ["with", *words] if words else []


def generate_caption(spec: ProductSpec, rng, template: int | None = None) -> tuple[str, list[str]]:
    """Short description plus highlight list.

    The template index is drawn from ``rng`` unless given. Templates 1 and 2
    lead with the item's primary style word.
    """
    if template is None:
        template = int(rng.integers(N_TEMPLATES))
    brand = [spec.brand] if spec.brand else []
    pat = [PATTERN_WORDS[spec.pattern]] if spec.pattern in PATTERN_WORDS else []
    feats = _features_phrase(spec.features, dict(spec.feature_colors))
    if template == 0:
        words = [*brand, spec.color, *pat, spec.sortal, *feats]
    elif template == 1:
        style = list(spec.styles[:1])
        words = [*style, *brand, spec.color, *pat, spec.sortal, *feats]
    elif template == 2:
        style = list(spec.styles[:1])
        words = [*style, *brand, spec.sortal, "in", spec.color, *pat, *feats]
    else:
        raise ValueError(f"template must be in [0, {N_TEMPLATES}), got {template}")
    highlights = [spec.color, *pat, *(feature_text(f) for f in spec.features), *brand]
    return " ".join(words), highlights


# ---------------------------------------------------------------------------
# Noun phrases
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NounPhrase:
    """One sortal plus ordered (kind, value) modifiers.

    ``head`` is the number of modifiers that precede the sortal in the text.
    A color after the head that is immediately followed by a feature colors
    that feature ("red shoe with black high heels"); every other color is the
    body color. ``bound`` overrides that rule with the explicit indices of
    feature-coloring modifiers (the parser sets it from word adjacency, so
    "shoe in black with laces" stays a black shoe).
    """
    sortal: str
    modifiers: tuple[tuple[str, str], ...] = ()
    head: int = 0
    bound: tuple[int, ...] | None = field(default=None, compare=False)

    def of_kind(self, kind):
        return [v for k, v in self.modifiers if k == kind]

    def _bound(self) -> set[int]:
        if self.bound is not None:
            return set(self.bound)
        mods = self.modifiers
        return {i for i in range(self.head, len(mods) - 1)
                if mods[i][0] == "color" and mods[i + 1][0] == "feature"}

    def feature_colors(self) -> dict[str, str]:
        return {self.modifiers[i + 1][1]: self.modifiers[i][1] for i in sorted(self._bound())}

    def body_colors(self) -> list[str]:
        bound = self._bound()
        return [v for i, (k, v) in enumerate(self.modifiers) if k == "color" and i not in bound]

    def text(self) -> str:
        """Canonical surface form: attributes before the sortal, features after 'with'."""
        fcolors = self.feature_colors()
        bound = self._bound()
        pre = []
        for i, (kind, value) in enumerate(self.modifiers):
            if kind == "feature" or i in bound:
                continue
            pre.append(PATTERN_WORDS.get(value, value) if kind == "pattern" else value)
        return " ".join([*pre, self.sortal, *_features_phrase(self.of_kind("feature"), fcolors)])


CONNECTORS = frozenset({"with", "a", "an", "in", "by", "and", "the", "of"})
_SORTAL_FORMS = {s: s for s in SORTALS}
_SORTAL_FORMS.update({"dresses": "dress", "t-shirt": "tshirt", "tshirts": "tshirt", "shoes": "shoe",
                      "bags": "bag", "hats": "hat", "pochettes": "pochette"})
_PATTERN_FORMS = {"striped": "stripes", "stripes": "stripes", "dotted": "dots", "dots": "dots",
                  "plain": "plain"}
_FEATURE_PHRASES = sorted(((tuple(feature_text(f).split()), f) for f in FEATURES),
                          key=lambda p: -len(p[0]))


def parse_np(text: str) -> NounPhrase:
    """Parse a fashion noun phrase into one sortal plus ordered modifiers.

    Multi-word features match longest-first; connectors and unknown words are
    skipped. Raises InvalidFormulaError without a sortal and
    AmbiguousSortalError with more than one.
    """
    tokens = text.lower().replace("_", " ").split()
    sortals, mods, bound = [], [], []
    head = 0
    last_color_at = None  # (token index, modifier index) of the latest color after the sortal
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        hit = next((f for words, f in _FEATURE_PHRASES if tuple(tokens[i:i + len(words)]) == words), None)
        if hit is not None:
            if last_color_at is not None and last_color_at[0] == i - 1:
                bound.append(last_color_at[1])
            mods.append(("feature", hit))
            i += len(feature_text(hit).split())
            continue
        if tok in _SORTAL_FORMS:
            sortals.append(_SORTAL_FORMS[tok])
            head = len(mods)
        elif tok in COLORS:
            if sortals:
                last_color_at = (i, len(mods))
            mods.append(("color", tok))
        elif tok in BRANDS:
            mods.append(("brand", tok))
        elif tok in _PATTERN_FORMS:
            mods.append(("pattern", _PATTERN_FORMS[tok]))
        elif tok in STYLES:
            mods.append(("style", tok))
        i += 1
    if not sortals:
        raise InvalidFormulaError(f"no sortal in {text!r}: a noun phrase needs exactly one item kind")
    if len(set(sortals)) > 1 or len(sortals) > 1:
        raise AmbiguousSortalError(f"more than one sortal in {text!r}: {sortals}")
    return NounPhrase(sortals[0], tuple(mods), head, tuple(bound))


# ---------------------------------------------------------------------------
# Catalog
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CatalogConfig:
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    n_hout_c: int = 100
    n_hout_b: int = 100
    seed: int = 0
    holdout_category: str = "pochette"
    holdout_brands: tuple[str, str] = ("fendi", "dior")
    p_brand: float = 0.7

    def counts(self):
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test,
                "hout_c": self.n_hout_c, "hout_b": self.n_hout_b}

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["holdout_brands"] = list(self.holdout_brands)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "holdout_brands" in d:
            d["holdout_brands"] = tuple(d["holdout_brands"])
        return cls(**d)


@dataclass
class Catalog:
    products: list[Product]
    holdout_category: str
    holdout_brands: tuple[str, ...]
    config: CatalogConfig = field(default_factory=CatalogConfig)

    def split(self, name) -> list[Product]:
        return [p for p in self.products if p.split == name]

    @property
    def vocab_source(self) -> str:
        return " ".join(p.caption for p in self.split("train"))

    def by_id(self):
        return {p.id: p for p in self.products}


def sample_spec(rng, sortals, brands, p_brand: float) -> ProductSpec:
    sortal = sortals[int(rng.integers(len(sortals)))]
    color = sorted(COLORS)[int(rng.integers(len(COLORS)))]
    pattern = PATTERNS[int(rng.integers(len(PATTERNS)))]
    legal = LEGAL_FEATURES[sortal]
    features = tuple(f for f, keep in zip(legal, rng.random(len(legal)) < 0.5) if keep)
    legal_brands = [b for b in brands if sortal in BRANDS[b][1]]
    brand_draw, pick = rng.random(), int(rng.integers(1 << 30))
    brand = legal_brands[pick % len(legal_brands)] if legal_brands and brand_draw < p_brand else None
    seed = int(rng.integers(0, 2 ** 63 - 1))
    return ProductSpec(sortal=sortal, color=color, pattern=pattern, features=features, brand=brand,
                       styles=assign_styles(color, pattern, features), seed=seed)


def _split_pools(cfg: CatalogConfig):
    regular_sortals = [s for s in SORTALS if s != cfg.holdout_category]
    regular_brands = [b for b in BRANDS if b not in cfg.holdout_brands]
    return {
        "train": (regular_sortals, regular_brands, cfg.p_brand),
        "val": (regular_sortals, regular_brands, cfg.p_brand),
        "test": (regular_sortals, regular_brands, cfg.p_brand),
        "hout_c": ([cfg.holdout_category], regular_brands, cfg.p_brand),
        "hout_b": (regular_sortals, list(cfg.holdout_brands), 1.0),
    }


def build_catalog(cfg: CatalogConfig = CatalogConfig()) -> Catalog:
    counts = cfg.counts()
    if any(n <= 0 for n in counts.values()):
        raise CatalogConfigError(f"every split count must be > 0, got {counts}")
    if cfg.holdout_category not in SORTALS:
        raise CatalogConfigError(f"unknown holdout category {cfg.holdout_category!r}")
    if len(set(cfg.holdout_brands)) != 2 or any(b not in BRANDS for b in cfg.holdout_brands):
        raise CatalogConfigError(f"holdout brands must be two distinct known brands, got {cfg.holdout_brands}")
    if TEXT_BRAND in cfg.holdout_brands:
        raise CatalogConfigError(f"the text-logo brand {TEXT_BRAND!r} cannot be held out")
    pools = _split_pools(cfg)
    products = []
    serial = 0
    for si, split in enumerate(SPLITS):
        sortals, brands, p_brand = pools[split]
        for i in range(counts[split]):
            # per-product stream: output does not depend on generation order
            rng = np.random.default_rng([cfg.seed, si, i])
            spec = sample_spec(rng, sortals, brands, p_brand)
            products.append(render_product(spec, product_id=f"p{serial:06d}", split=split))
            serial += 1
    return Catalog(products, cfg.holdout_category, tuple(cfg.holdout_brands), cfg)


def shifted_variant(products, variant: str) -> list[Product]:
    """Re-render products (same specs, same ids) in a shifted visual style."""
    out = []
    for p in products:
        r = _render(p.spec, variant, legal_only=False)
        out.append(replace(p, image=r.image, gt_boxes=r.gt_boxes))
    return out


# ---------------------------------------------------------------------------
# Improbable products
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Assets:
    """Renderer tables consulted when composing out-of-catalog products."""
    legal_features: dict = field(default_factory=lambda: dict(LEGAL_FEATURES))
    brands: dict = field(default_factory=lambda: dict(BRANDS))


DEFAULT_ASSETS = Assets()

# feature/sortal pairs absent from LEGAL_FEATURES that still render sensibly
IMPROBABLE_FEATURES = (
    ("shoe", "handles"), ("shoe", "shoulder_strap"), ("dress", "pocket"), ("dress", "handles"),
    ("hat", "handles"), ("tshirt", "belt"), ("tshirt", "handles"), ("bag", "pocket"),
    ("bag", "belt"), ("hat", "pocket"),
)
# features that may take their own color in a phrase like "red shoe with black high heels"
COLORABLE_FEATURES = {"shoe": "high_heels", "dress": "belt", "tshirt": "long_sleeves", "bag": "handles"}


def np_to_spec(np_: NounPhrase, seed: int = 0, default_color: str = "red") -> ProductSpec:
    features = list(dict.fromkeys(np_.of_kind("feature")))
    brands = np_.of_kind("brand")
    if len(brands) > 1:
        raise ParseError(f"more than one brand in {np_.text()!r}")
    patterns = np_.of_kind("pattern")
    pattern = patterns[0] if patterns else "plain"
    body = np_.body_colors()
    color = body[0] if body else default_color
    return ProductSpec(sortal=np_.sortal, color=color, pattern=pattern, features=tuple(features),
                       brand=brands[0] if brands else None,
                       styles=assign_styles(color, pattern, features), seed=seed,
                       feature_colors=tuple(sorted(np_.feature_colors().items())))


def is_improbable(spec: ProductSpec, assets: Assets = DEFAULT_ASSETS) -> bool:
    if spec.brand is not None and spec.sortal not in assets.brands[spec.brand][1]:
        return True
    if any(f not in assets.legal_features[spec.sortal] for f in spec.features):
        return True
    return any(c != spec.color for _, c in spec.feature_colors)


def compose_improbable(np_: NounPhrase | str, assets: Assets = DEFAULT_ASSETS, seed: int = 0,
                       forced: bool = False, product_id: str | None = None) -> Product:
    """Render a noun phrase, including combinations the catalog never contains.

    Brand logos land strictly inside the sortal silhouette; features attach at
    sortal anchors and may extend outside it.
    """
    if isinstance(np_, str):
        np_ = parse_np(np_)
    spec = np_to_spec(np_, seed)
    if not forced and not is_improbable(spec, assets):
        raise SpecError(f"{np_.text()!r} is a regular catalog combination; pass forced=True to render it")
    r = _render(spec, legal_only=False)
    text = np_.text()
    highlights = [spec.color, *(feature_text(f) for f in spec.features), *([spec.brand] if spec.brand else [])]
    pid = product_id or f"imp-{hashlib.sha256(f'{text}|{seed}'.encode()).hexdigest()[:10]}"
    return Product(id=pid, image=r.image, caption=text, highlights=highlights, tree=_tree(spec),
                   brand=spec.brand or "", styles=list(spec.styles), split=IMPROBABLE_SPLIT,
                   gt_boxes=r.gt_boxes, spec=spec)


def improbable_phrases(n: int, seed: int, holdout_category: str = "pochette",
                       holdout_brands=("fendi", "dior")) -> list[tuple[NounPhrase, int]]:
    """Seeded list of ``n`` distinct improbable noun phrases with render seeds.

    Cycles through three recipes: a brand on a sortal it does not make, a
    feature on a sortal that never has it, and a feature in its own color.
    """
    rng = np.random.default_rng([seed, 11])
    colors = sorted(COLORS)
    brands = [b for b in BRANDS if b not in holdout_brands]
    brand_pairs = [(b, s) for b in brands for s in SORTALS
                   if s not in BRANDS[b][1] and s != holdout_category]
    feat_pairs = [(s, f) for s, f in IMPROBABLE_FEATURES if s != holdout_category]
    color_pairs = [(s, f) for s, f in COLORABLE_FEATURES.items() if s != holdout_category]
    out, seen = [], set()
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 100 * n + 1000:
            raise ValueError(f"cannot draw {n} distinct improbable phrases")
        kind = len(out) % 3
        c = colors[int(rng.integers(len(colors)))]
        if kind == 0:
            b, s = brand_pairs[int(rng.integers(len(brand_pairs)))]
            phrase = NounPhrase(s, (("brand", b), ("color", c)), head=2)
        elif kind == 1:
            s, f = feat_pairs[int(rng.integers(len(feat_pairs)))]
            phrase = NounPhrase(s, (("color", c), ("feature", f)), head=1)
        else:
            s, f = color_pairs[int(rng.integers(len(color_pairs)))]
            fc = colors[int(rng.integers(len(colors)))]
            if fc == c:
                continue
            phrase = NounPhrase(s, (("color", c), ("color", fc), ("feature", f)), head=1)
        if phrase.text() in seen:
            continue
        seen.add(phrase.text())
        out.append((phrase, int(rng.integers(0, 2 ** 63 - 1))))
    return out


def build_improbables(n: int, seed: int, cfg: CatalogConfig = CatalogConfig()) -> list[Product]:
    phrases = improbable_phrases(n, seed, cfg.holdout_category, cfg.holdout_brands)
    return [compose_improbable(p, seed=s, product_id=f"imp{i:04d}") for i, (p, s) in enumerate(phrases)]


# ---------------------------------------------------------------------------
# Typographic attack
# ---------------------------------------------------------------------------


def _region_width(mask, center, rows=glyphs.GLYPH_H) -> tuple[int, int]:
    """Widest run of columns, through ``center``, fully covered by ``mask`` over the text rows."""
    cx, cy = center
    y0 = cy - (rows - 1) // 2
    cols = np.all(mask[y0:y0 + rows], axis=0)
    if not cols[cx]:
        return cx, cx - 1
    lo = cx
    while lo - 1 >= 0 and cols[lo - 1]:
        lo -= 1
    hi = cx
    while hi + 1 < len(cols) and cols[hi + 1]:
        hi += 1
    return lo, hi


def apply_typographic_attack(product: Product, word: str) -> Product:
    """Copy of ``product`` with ``word`` printed in black at the logo spot."""
    if word == "":
        return replace(product, image=product.image.copy(), gt_boxes=dict(product.gt_boxes))
    if not glyphs.can_render(word):
        raise ValueError(f"{word!r} has characters outside the 5x7 glyph font")
    spec = product.spec
    geo = _geometry(spec.sortal, *_jitter(spec.seed))
    center = geo.anchors["logo"]
    lo, hi = _region_width(geo.body, center)
    # strictly inside: keep one pixel of margin on each side
    avail = hi - lo - 1
    max_len = max(0, (avail + 1) // (glyphs.GLYPH_W + 1))
    bitmap = glyphs.render_text(word)
    if bitmap.shape[1] > avail:
        raise ValueError(f"{word!r} is too wide for the {spec.sortal} region: at most {max_len} characters fit")
    lm, box = _place(bitmap, center)
    if box[0] <= lo or box[2] >= hi:
        lm, box = _place(bitmap, ((lo + hi) // 2, center[1]))
    img = product.image.copy()
    img[lm] = (0, 0, 0)
    boxes = dict(product.gt_boxes)
    boxes[f"text:{word}"] = box
    return replace(product, image=img, gt_boxes=boxes)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def png_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def _jsonl(rows) -> str:
    return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in rows)


def write_products(products, out_dir, name: str):
    """Write ``<name>.jsonl``, ``<name>_specs.jsonl`` and images/ under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for p in products:
        (out / "images" / f"{p.id}.png").write_bytes(png_bytes(p.image))
    (out / f"{name}.jsonl").write_text(_jsonl(p.record() for p in products))
    (out / f"{name}_specs.jsonl").write_text(
        _jsonl({"id": p.id, "spec": p.spec.to_dict()} for p in products))


def write_catalog(catalog: Catalog, out_dir):
    write_products(catalog.products, out_dir, "catalog")
    meta = {"holdout_category": catalog.holdout_category, "holdout_brands": list(catalog.holdout_brands),
            "config": catalog.config.to_dict()}
    (Path(out_dir) / "catalog_meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def read_products(out_dir, name: str) -> list[Product]:
    out = Path(out_dir)
    specs = {}
    spec_path = out / f"{name}_specs.jsonl"
    if spec_path.exists():
        for line in spec_path.read_text().splitlines():
            row = json.loads(line)
            specs[row["id"]] = ProductSpec.from_dict(row["spec"])
    products = []
    for line in (out / f"{name}.jsonl").read_text().splitlines():
        r = json.loads(line)
        img = np.asarray(Image.open(out / r["image_path"]).convert("RGB"))
        products.append(Product(id=r["id"], image=img, caption=r["caption"], highlights=r["highlights"],
                                tree=r["tree"], brand=r["brand"], styles=r["styles"], split=r["split"],
                                gt_boxes={k: tuple(v) for k, v in r["gt_boxes"].items()},
                                spec=specs.get(r["id"])))
    return products


def read_catalog(out_dir) -> Catalog:
    out = Path(out_dir)
    if not (out / "catalog.jsonl").exists():
        raise FileNotFoundError(f"no catalog.jsonl in {out}; run gen-data first")
    meta = json.loads((out / "catalog_meta.json").read_text())
    return Catalog(read_products(out, "catalog"), meta["holdout_category"], tuple(meta["holdout_brands"]),
                   CatalogConfig.from_dict(meta["config"]))
