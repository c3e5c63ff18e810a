import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fclip import encoder as enc
from fclip import synthcat as sc

VOCAB = enc.Vocab.build(["red dress", "blue shoe with laces", "striped hat"])
ARCH = enc.ArchConfig(vocab_size=len(VOCAB))


@pytest.fixture(scope="module")
def params():
    return enc.init_params(ARCH, seed=7)


def naive_conv_s2(x, w, b):
    """Direct loop 3x3 / stride 2 / pad 1 convolution, one output pixel at a time."""
    B, H, W, _ = x.shape
    Ho, Wo = (H + 1) // 2, (W + 1) // 2
    out = np.zeros((B, Ho, Wo, w.shape[3]))
    for n in range(B):
        for i in range(Ho):
            for j in range(Wo):
                acc = b.astype(float).copy()
                for ki in range(3):
                    for kj in range(3):
                        y, xx = 2 * i + ki - 1, 2 * j + kj - 1
                        if 0 <= y < H and 0 <= xx < W:
                            acc += x[n, y, xx] @ w[ki, kj]
                out[n, i, j] = acc
    return out


# -- tokenizer ---------------------------------------------------------------

def test_tokenize_examples():
    ids = enc.tokenize("red dress", VOCAB)
    assert ids.tolist() == [VOCAB.id("red"), VOCAB.id("dress")] + [enc.PAD] * 10
    assert enc.tokenize("", VOCAB).tolist() == [enc.PAD] * 12
    assert enc.tokenize("red zzz dress", VOCAB)[1] == enc.UNK
    assert enc.tokenize("RED Dress", VOCAB).tolist() == ids.tolist()


def test_tokenize_truncates():
    assert len(enc.tokenize(" ".join(["red"] * 30), VOCAB)) == enc.MAX_LEN


def test_vocab_sorted_and_reserved():
    assert VOCAB.tokens[:2] == (enc.PAD_TOKEN, enc.UNK_TOKEN)
    assert list(VOCAB.tokens[2:]) == sorted(VOCAB.tokens[2:])
    assert enc.Vocab.build(["b a", "c"]).digest == enc.Vocab.build(["c", "a b"]).digest


def test_vocab_save_load(tmp_path):
    VOCAB.save(tmp_path / "v.txt")
    assert enc.Vocab.load(tmp_path / "v.txt") == VOCAB
    (tmp_path / "bad.txt").write_text("red\ndress\n")
    with pytest.raises(ValueError):
        enc.Vocab.load(tmp_path / "bad.txt")


# -- image encoder -----------------------------------------------------------

def test_conv_matches_direct_loop(rng):
    x = rng.normal(size=(2, 7, 6, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    b = rng.normal(size=4)
    out, _ = enc._conv_s2_forward(x, w, b)
    assert out.shape == (2, 4, 3, 4)
    np.testing.assert_allclose(out, naive_conv_s2(x, w, b), atol=1e-10)


def test_image_shapes(params):
    assert enc.encode_image(np.zeros((64, 64, 3), np.uint8), params).shape == (64,)
    with pytest.raises(ValueError, match="shape"):
        enc.encode_image(np.zeros((64, 64), np.uint8), params)
    with pytest.raises(ValueError, match="64x64"):
        enc.encode_image(np.zeros((32, 32, 3), np.uint8), params, image_size=64)
    assert enc.encode_images(np.zeros((0, 64, 64, 3), np.uint8), params).shape == (0, 64)


def test_image_unit_norm_and_deterministic(params, small_catalog):
    imgs = np.stack([p.image for p in small_catalog.products[:10]])
    a, b = enc.encode_images(imgs, params), enc.encode_images(imgs, params)
    assert np.array_equal(a, b)
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1, atol=1e-6)


def test_white_vs_red_dress_distinct():
    params = enc.init_params(ARCH, seed=0)  # the default init seed
    white = np.full((64, 64, 3), 255, np.uint8)
    dress = sc.render_product(sc.ProductSpec("dress", "red", styles=("casual",))).image
    cos = enc.encode_image(white, params) @ enc.encode_image(dress, params)
    assert cos < 1 - 1e-3


def test_batch_equals_one_at_a_time(params, small_catalog):
    imgs = np.stack([p.image for p in small_catalog.products[:9]])
    batched = enc.encode_images(imgs, params, batch_size=4)
    single = np.stack([enc.encode_image(im, params) for im in imgs])
    assert np.array_equal(batched, single)


@settings(max_examples=20, deadline=None)
@given(arrays(np.uint8, (16, 16, 3)))
def test_image_finite_unit_norm(img):
    p = enc.init_params(enc.ArchConfig(image_size=16, vocab_size=4), seed=1)
    e = enc.encode_image(img, p)
    assert np.all(np.isfinite(e)) and abs(np.linalg.norm(e) - 1) < 1e-5


# -- text encoder ------------------------------------------------------------

def test_text_is_normalized_mean_projection(params):
    toks = enc.tokenize("blue shoe with laces", VOCAB)
    ids = [VOCAB.id(w) for w in "blue shoe with laces".split()]
    pooled = params["tok_emb"][ids].astype(float).mean(axis=0)
    u = pooled @ params["txt_proj.w"] + params["txt_proj.b"]
    np.testing.assert_allclose(enc.encode_text(toks, params), u / np.linalg.norm(u), atol=1e-6)


def test_all_pad_maps_to_bias_direction(params):
    e = enc.encode_text(enc.tokenize("", VOCAB), params)
    b = params["txt_proj.b"].astype(float)
    np.testing.assert_allclose(e, b / np.linalg.norm(b), atol=1e-6)


@given(st.lists(st.sampled_from(VOCAB.tokens[2:]), min_size=1, max_size=12), st.randoms())
def test_text_order_invariant_unit_norm(words, rnd):
    p = enc.init_params(ARCH, seed=7)
    shuffled = list(words)
    rnd.shuffle(shuffled)
    a = enc.encode_texts([" ".join(words)], VOCAB, p)[0]
    b = enc.encode_texts([" ".join(shuffled)], VOCAB, p)[0]
    np.testing.assert_allclose(a, b, atol=1e-6)
    assert abs(np.linalg.norm(a) - 1) < 1e-6


def test_text_batch_equals_single(params):
    texts = ["red dress", "striped hat", "", "blue shoe with laces"]
    batch = enc.encode_texts(texts, VOCAB, params)
    for t, row in zip(texts, batch):
        assert np.array_equal(enc.encode_text(enc.tokenize(t, VOCAB), params), row)


# -- init --------------------------------------------------------------------

def test_init_bounds_and_reserved_rows():
    p = enc.init_params(ARCH, seed=0)
    assert set(p) == set(ARCH.param_shapes())
    assert p["log_temperature"] == pytest.approx(math.log(1 / 0.07), rel=1e-6)
    assert np.abs(p["conv1.w"]).max() <= 1 / math.sqrt(27)
    assert np.abs(p["img_proj.w"]).max() <= 1 / math.sqrt(32)
    assert not p["tok_emb"][:2].any()
    q = enc.init_params(ARCH, seed=0)
    assert all(np.array_equal(p[k], q[k]) for k in p)


def test_decay_mask():
    assert enc.is_decayed("conv1.w") and enc.is_decayed("tok_emb")
    assert not enc.is_decayed("conv1.b") and not enc.is_decayed("log_temperature")


# -- checkpoints -------------------------------------------------------------

def ckpt(p):
    return enc.Checkpoint(p, ARCH, VOCAB.digest, config_digest="abc", step=3, extra={"lr": 0.001})


def test_checkpoint_round_trip_bit_exact(tmp_path, params):
    sha = enc.save_checkpoint(ckpt(params), tmp_path / "c.bin")
    back = enc.load_checkpoint(tmp_path / "c.bin", expected_vocab_digest=VOCAB.digest)
    assert all(np.array_equal(params[k], back.params[k]) and back.params[k].dtype == np.float32 for k in params)
    assert (back.step, back.config_digest, back.extra, back.arch) == (3, "abc", {"lr": 0.001}, ARCH)
    assert sha == enc.save_checkpoint(back, tmp_path / "d.bin")
    assert (tmp_path / "c.bin").read_bytes() == (tmp_path / "d.bin").read_bytes()


def test_truncated_checkpoint(tmp_path, params):
    data = enc.checkpoint_bytes(ckpt(params))
    (tmp_path / "c.bin").write_bytes(data[:-1])
    with pytest.raises(enc.TruncatedCheckpointError):
        enc.load_checkpoint(tmp_path / "c.bin")


def test_flipped_byte_checksum(tmp_path, params):
    data = bytearray(enc.checkpoint_bytes(ckpt(params)))
    data[-10] ^= 0xFF
    (tmp_path / "c.bin").write_bytes(bytes(data))
    with pytest.raises(enc.CorruptCheckpointError):
        enc.load_checkpoint(tmp_path / "c.bin")


def test_digest_mismatch(tmp_path, params):
    enc.save_checkpoint(ckpt(params), tmp_path / "c.bin")
    with pytest.raises(enc.DigestMismatchError):
        enc.load_checkpoint(tmp_path / "c.bin", expected_vocab_digest="0" * 64)
    with pytest.raises(enc.DigestMismatchError):
        enc.Model.from_checkpoint(enc.load_checkpoint(tmp_path / "c.bin"), enc.Vocab.build(["x"]))


def test_nan_tensor_rejected(tmp_path, params):
    bad = dict(params)
    bad["img_proj.b"] = params["img_proj.b"].copy()
    bad["img_proj.b"][0] = np.nan
    with pytest.raises(enc.NonFiniteTensorError):
        enc.save_checkpoint(ckpt(bad), tmp_path / "c.bin")


def test_shape_mismatch(tmp_path, params):
    bad = dict(params)
    bad["txt_proj.b"] = np.zeros(5, np.float32)
    enc.save_checkpoint(ckpt(bad), tmp_path / "c.bin")
    with pytest.raises(enc.ShapeMismatchError):
        enc.load_checkpoint(tmp_path / "c.bin")


def test_bad_magic(tmp_path):
    (tmp_path / "c.bin").write_bytes(b"NOTACKPT" + bytes(20))
    with pytest.raises(enc.CheckpointError, match="magic"):
        enc.load_checkpoint(tmp_path / "c.bin")


def test_error_codes_distinct():
    codes = [c.code for c in (enc.TruncatedCheckpointError, enc.CorruptCheckpointError,
                              enc.DigestMismatchError, enc.NonFiniteTensorError, enc.ShapeMismatchError)]
    assert len(set(codes)) == len(codes)
