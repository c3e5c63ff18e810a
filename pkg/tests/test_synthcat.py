import hashlib
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fclip import glyphs
from fclip import synthcat as sc


def spec(**kw):
    base = dict(sortal="dress", color="red", pattern="plain", features=(), brand=None, seed=5)
    base.update(kw)
    base.setdefault("styles", sc.assign_styles(base["color"], base["pattern"]))
    return sc.ProductSpec(**base)


@st.composite
def legal_specs(draw):
    sortal = draw(st.sampled_from(sc.SORTALS))
    color = draw(st.sampled_from(sorted(sc.COLORS)))
    pattern = draw(st.sampled_from(sc.PATTERNS))
    feats = tuple(f for f in sc.LEGAL_FEATURES[sortal] if draw(st.booleans()))
    brands = [b for b, (_, makes) in sc.BRANDS.items() if sortal in makes]
    brand = draw(st.none() | st.sampled_from(brands))
    seed = draw(st.integers(0, 2 ** 63 - 1))
    return sc.ProductSpec(sortal, color, pattern, feats, brand, sc.assign_styles(color, pattern), seed)


def white(px):
    return np.all(px == 255, axis=-1)


def box_mask(box, shape=(sc.IMAGE_SIZE, sc.IMAGE_SIZE)):
    x0, y0, x1, y1 = box
    m = np.zeros(shape, dtype=bool)
    m[y0:y1 + 1, x0:x1 + 1] = True
    return m


def strictly_inside(inner, outer):
    return inner[0] > outer[0] and inner[1] > outer[1] and inner[2] < outer[2] and inner[3] < outer[3]


# -- rendering ---------------------------------------------------------------

def test_plain_red_dress_is_red_dominant_single_concept():
    p = sc.render_product(spec())
    assert set(p.gt_boxes) == {"dress"}
    px = p.image[~white(p.image)].astype(int)
    assert len(px) > 0
    assert np.all(px[:, 0] > px[:, 1]) and np.all(px[:, 0] > px[:, 2])


def test_same_spec_renders_bit_identical():
    s = spec(features=("belt",), brand="gucci", pattern="dots")
    assert np.array_equal(sc.render_product(s).image, sc.render_product(s).image)


def test_shoe_logo_strictly_inside_shoe():
    p = sc.render_product(spec(sortal="shoe", features=("high_heels",), brand="nike"))
    assert strictly_inside(p.gt_boxes["nike"], p.gt_boxes["shoe"])
    assert "high heels" in p.gt_boxes


def test_illegal_feature_names_the_pair():
    with pytest.raises(sc.SpecError, match=r"\(hat, high_heels\)"):
        sc.render_product(spec(sortal="hat", features=("high_heels",)))


@pytest.mark.parametrize("bad", [dict(sortal="sock"), dict(color="teal"), dict(pattern="plaid"),
                                 dict(brand="acme"), dict(styles=("goth",))])
def test_unknown_values_rejected(bad):
    with pytest.raises(sc.SpecError):
        sc.render_product(spec(**bad))


@settings(max_examples=60, deadline=None)
@given(legal_specs())
def test_render_invariants(s):
    p = sc.render_product(s)
    img = p.image
    assert img.shape == (64, 64, 3) and img.dtype == np.uint8
    sortal_box = p.gt_boxes[s.sortal]
    # white outside the sortal box, every box in bounds
    assert np.all(white(img[~box_mask(sortal_box)]))
    for box in p.gt_boxes.values():
        x0, y0, x1, y1 = box
        assert 0 <= x0 <= x1 < 64 and 0 <= y0 <= y1 < 64
    assert set(p.gt_boxes) == {s.sortal, *(sc.feature_text(f) for f in s.features),
                               *([s.brand] if s.brand else [])}
    if s.brand:
        assert strictly_inside(p.gt_boxes[s.brand], sortal_box)
    assert len(p.tree) == 3 and p.tree[:2] == list(sc.TAXONOMY[s.sortal])


@pytest.mark.parametrize("variant", sc.VARIANTS)
def test_variants_keep_ids_and_shape(small_catalog, variant):
    items = small_catalog.split("test")[:5]
    out = sc.shifted_variant(items, variant)
    assert [p.id for p in out] == [p.id for p in items]
    assert all(p.image.shape == (64, 64, 3) for p in out)
    if variant == "standard":
        assert all(np.array_equal(a.image, b.image) for a, b in zip(items, out))


def test_gray_variant_has_no_chroma(small_catalog):
    out = sc.shifted_variant(small_catalog.split("test")[:5], "gray_lowres")
    for p in out:
        assert np.all(p.image[..., 0] == p.image[..., 1]) and np.all(p.image[..., 1] == p.image[..., 2])


def test_unknown_variant_rejected():
    with pytest.raises(ValueError, match="variant"):
        sc.render_product(spec(), variant="sepia")


# -- styles ------------------------------------------------------------------

def test_style_examples():
    assert sc.assign_styles("black", "plain") == ("classic",)
    assert sc.assign_styles("yellow", "stripes") == ("streetwear",)
    assert sc.assign_styles("blue", "stripes") == ("edgy",)
    assert sc.assign_styles("red", "dots") == ("edgy", "casual")
    assert sc.assign_styles("pink", "plain") == ("casual",)


@given(st.sampled_from(sorted(sc.COLORS)), st.sampled_from(sc.PATTERNS))
def test_every_item_has_a_known_style(color, pattern):
    styles = sc.assign_styles(color, pattern)
    assert 1 <= len(styles) <= 2 and set(styles) <= set(sc.STYLES)


def test_styles_orthogonal_to_taxonomy(default_catalog):
    # every style occurs in every regular sortal
    train = default_catalog.split("train")
    for sortal in {p.spec.sortal for p in train}:
        seen = {s for p in train if p.spec.sortal == sortal for s in p.styles}
        assert seen == set(sc.STYLES)


# -- captions and parsing ----------------------------------------------------

def test_caption_template_zero_example():
    caption, highlights = sc.generate_caption(spec(features=("long_sleeves",)), np.random.default_rng(0), 0)
    assert caption == "red dress with long sleeves"
    assert highlights == ["red", "long sleeves"]


def test_brand_in_highlights():
    _, highlights = sc.generate_caption(spec(brand="prada"), np.random.default_rng(0))
    assert "prada" in highlights


def test_bad_template_index():
    with pytest.raises(ValueError):
        sc.generate_caption(spec(), np.random.default_rng(0), 3)


def _np_content(n):
    return (n.sortal, tuple(sorted(n.of_kind("brand"))), tuple(sorted(n.body_colors())),
            tuple(sorted(n.of_kind("pattern"))), tuple(sorted(n.of_kind("feature"))),
            tuple(sorted(n.feature_colors().items())))


def test_thousand_draws_round_trip():
    s = spec(sortal="shoe", features=("high_heels", "laces"), brand="armani", pattern="stripes")
    rng = np.random.default_rng(99)
    captions = [sc.generate_caption(s, rng)[0] for _ in range(1000)]
    assert len(set(captions)) == sc.N_TEMPLATES
    parsed = {_np_content(sc.parse_np(c)) for c in captions}
    assert parsed == {("shoe", ("armani",), ("red",), ("stripes",), ("high_heels", "laces"), ())}


@settings(max_examples=100, deadline=None)
@given(legal_specs(), st.integers(0, sc.N_TEMPLATES - 1))
def test_caption_parses_back_to_spec(s, template):
    caption, _ = sc.generate_caption(s, np.random.default_rng(0), template)
    n = sc.parse_np(caption)
    assert n.sortal == s.sortal
    assert n.of_kind("brand") == ([s.brand] if s.brand else [])
    assert n.body_colors() == [s.color]
    assert n.of_kind("pattern") == ([] if s.pattern == "plain" else [s.pattern])
    assert sorted(n.of_kind("feature")) == sorted(s.features)


def test_parse_examples():
    assert sc.parse_np("nike dress") == sc.NounPhrase("dress", (("brand", "nike"),), head=1)
    assert sc.parse_np("dress") == sc.NounPhrase("dress")
    with pytest.raises(sc.InvalidFormulaError):
        sc.parse_np("nike gucci")
    with pytest.raises(sc.AmbiguousSortalError):
        sc.parse_np("dress with a hat")


def test_color_before_with_is_body_color():
    n = sc.parse_np("shoe in black with laces")
    assert n.body_colors() == ["black"] and n.feature_colors() == {}


def test_parse_skips_connectors_and_binds_feature_color():
    n = sc.parse_np("a red shoe with black high heels")
    assert n.sortal == "shoe"
    assert n.modifiers == (("color", "red"), ("color", "black"), ("feature", "high_heels"))
    assert n.body_colors() == ["red"] and n.feature_colors() == {"high_heels": "black"}


@given(st.lists(st.sampled_from(["red", "nike", "with", "a", "striped", "belt", "pocket", "in", "edgy"]),
                max_size=6), st.sampled_from(sc.SORTALS), st.integers(0, 6))
def test_parse_finds_the_single_sortal(words, sortal, pos):
    words = list(words)
    words.insert(min(pos, len(words)), sortal)
    assert sc.parse_np(" ".join(words)).sortal == sortal


# -- catalog -----------------------------------------------------------------

def test_default_catalog_counts_and_disjointness(default_catalog):
    counts = {s: len(default_catalog.split(s)) for s in sc.SPLITS}
    assert counts == {"train": 2000, "val": 200, "test": 200, "hout_c": 100, "hout_b": 100}
    ids = [p.id for p in default_catalog.products]
    assert len(ids) == len(set(ids))


def test_default_catalog_holdouts(default_catalog):
    seen = default_catalog.split("train") + default_catalog.split("val")
    assert not any(p.spec.sortal == default_catalog.holdout_category for p in seen)
    assert not any(p.brand in default_catalog.holdout_brands for p in seen)
    assert all(p.spec.sortal == "pochette" for p in default_catalog.split("hout_c"))
    assert all(p.brand in ("fendi", "dior") for p in default_catalog.split("hout_b"))


def test_vocab_source_is_train_captions(small_catalog):
    assert small_catalog.vocab_source == " ".join(p.caption for p in small_catalog.split("train"))


def _tree_digest(root):
    h = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(f.relative_to(root).as_posix().encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def test_same_seed_byte_identical_files(tmp_path):
    from tests.conftest import SMALL
    sc.write_catalog(sc.build_catalog(SMALL), tmp_path / "a")
    sc.write_catalog(sc.build_catalog(SMALL), tmp_path / "b")
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")


def test_different_seed_differs():
    from tests.conftest import SMALL
    a = sc.build_catalog(SMALL)
    b = sc.build_catalog(replace(SMALL, seed=SMALL.seed + 1))
    assert [p.caption for p in a.products] != [p.caption for p in b.products]


def test_split_content_independent_of_other_counts():
    from tests.conftest import SMALL
    a = sc.build_catalog(SMALL).split("test")
    b = sc.build_catalog(replace(SMALL, n_train=50)).split("test")
    assert [p.caption for p in a] == [p.caption for p in b]


def test_catalog_round_trip(tmp_path, small_catalog):
    sc.write_catalog(small_catalog, tmp_path)
    back = sc.read_catalog(tmp_path)
    assert back.holdout_brands == small_catalog.holdout_brands
    assert back.config == small_catalog.config
    for a, b in zip(small_catalog.products, back.products):
        assert a.record() == b.record()
        assert np.array_equal(a.image, b.image)
        assert a.spec == b.spec


def test_catalog_jsonl_field_names(tmp_path, small_catalog):
    import json
    sc.write_catalog(small_catalog, tmp_path)
    row = json.loads((tmp_path / "catalog.jsonl").read_text().splitlines()[0])
    assert set(row) == {"id", "caption", "highlights", "tree", "brand", "styles", "split", "image_path", "gt_boxes"}
    assert (tmp_path / row["image_path"]).exists()


def test_missing_catalog_dir(tmp_path):
    with pytest.raises(FileNotFoundError, match="gen-data"):
        sc.read_catalog(tmp_path)


@pytest.mark.parametrize("kw", [dict(n_train=0), dict(n_hout_b=-1), dict(holdout_category="sock"),
                                dict(holdout_brands=("fendi", "fendi")), dict(holdout_brands=("zara", "dior"))])
def test_bad_catalog_config(kw):
    with pytest.raises(sc.CatalogConfigError):
        sc.build_catalog(sc.CatalogConfig(**kw))


# -- improbable products -----------------------------------------------------

def test_brand_logo_inside_improbable_sortal():
    p = sc.compose_improbable("nike dress")
    assert p.split == sc.IMPROBABLE_SPLIT
    assert strictly_inside(p.gt_boxes["nike"], p.gt_boxes["dress"])
    assert p.caption == "nike dress"


def test_feature_connected_to_sortal():
    p = sc.compose_improbable("shoe with handles")
    sortal, handles = p.gt_boxes["shoe"], p.gt_boxes["handles"]
    # the sortal box covers the whole item, so it at least touches the handle region
    assert handles[0] <= sortal[2] + 1 and sortal[0] <= handles[2] + 1
    assert handles[1] <= sortal[3] + 1 and sortal[1] <= handles[3] + 1
    # connected, not contained: the handle region reaches above the shoe silhouette
    geo = sc._geometry("shoe", *sc._jitter(p.spec.seed))
    ys, _ = np.nonzero(geo.body)
    assert handles[1] < ys.min()


def test_two_color_shoe_pixel_statistics():
    p = sc.compose_improbable("red shoe with black high heels")
    heel = p.image[box_mask(p.gt_boxes["high heels"]) & ~white(p.image)].astype(int)
    geo = sc._geometry("shoe", *sc._jitter(p.spec.seed))
    body = p.image[geo.body].astype(int)
    black = sc.COLORS["black"]
    assert np.mean(np.all(np.abs(heel - black) < 10, axis=1)) > 0.8
    assert np.mean((body[:, 0] > body[:, 1] + 60) & (body[:, 0] > body[:, 2] + 60)) > 0.8


def test_regular_combination_needs_force():
    with pytest.raises(sc.SpecError, match="forced"):
        sc.compose_improbable("red dress with belt")
    assert sc.compose_improbable("red dress with belt", forced=True).spec.features == ("belt",)


def test_improbable_without_sortal_propagates_parse_error():
    with pytest.raises(sc.InvalidFormulaError):
        sc.compose_improbable("nike handles")


def test_build_improbables_distinct_and_improbable():
    items = sc.build_improbables(60, seed=0)
    assert len({p.caption for p in items}) == 60
    assert all(sc.is_improbable(p.spec) for p in items)
    assert all(p.spec.sortal != "pochette" for p in items)
    assert [p.id for p in items[:2]] == ["imp0000", "imp0001"]
    again = sc.build_improbables(60, seed=0)
    assert all(np.array_equal(a.image, b.image) for a, b in zip(items, again))


# -- typographic attack ------------------------------------------------------

def test_attack_is_local_and_copies():
    p = sc.render_product(spec(sortal="tshirt", color="yellow"))
    before = p.image.copy()
    q = sc.apply_typographic_attack(p, "nike")
    assert np.array_equal(p.image, before)
    box = q.gt_boxes["text:nike"]
    changed = np.any(q.image != p.image, axis=-1)
    assert changed.any() and not np.any(changed & ~box_mask(box))
    assert strictly_inside(box, p.gt_boxes["tshirt"])


def test_empty_attack_is_identity():
    p = sc.render_product(spec())
    q = sc.apply_typographic_attack(p, "")
    assert np.array_equal(p.image, q.image) and q.gt_boxes == p.gt_boxes and q.image is not p.image


def test_attack_too_wide_names_max_length():
    p = sc.render_product(spec(sortal="hat"))
    with pytest.raises(ValueError, match=r"at most \d+ characters"):
        sc.apply_typographic_attack(p, "versaceversace")


def test_attack_unrenderable_word():
    with pytest.raises(ValueError, match="glyph"):
        sc.apply_typographic_attack(sc.render_product(spec()), "n!ke")


def test_glyph_width():
    assert glyphs.text_width("zara") == glyphs.render_text("zara").shape[1]
