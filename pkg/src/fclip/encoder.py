"""Tokenizer, image/text encoders and checkpoint serialization.

Both encoders are plain numpy. Every forward function returns the embedding
together with a cache that the matching backward function consumes, so the
training loop can compute exact gradients without an autograd framework.

Parameter layout (``params`` is a flat ``dict[str, np.ndarray]``)::

    conv{1,2,3}.w   (3, 3, C_in, C_out)   NHWC kernels, stride 2, pad 1
    conv{1,2,3}.b   (C_out,)
    img_proj.w      (C_last, d)
    img_proj.b      (d,)
    tok_emb         (V, token_dim)
    txt_proj.w      (token_dim, d)
    txt_proj.b      (d,)
    log_temperature ()
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

PAD = 0
UNK = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
MAX_LEN = 12


# ---------------------------------------------------------------------------
# Vocabulary / tokenizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]  # index == id; tokens[0] is PAD, tokens[1] is UNK
    max_len: int = MAX_LEN

    def __post_init__(self):
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def build(cls, captions, max_len: int = MAX_LEN) -> "Vocab":
        words = set()
        for c in captions:
            words.update(c.lower().split())
        words.discard(PAD_TOKEN)
        words.discard(UNK_TOKEN)
        return cls((PAD_TOKEN, UNK_TOKEN, *sorted(words)), max_len)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, word):
        return word in self._index

    def id(self, word: str) -> int:
        return self._index.get(word, UNK)

    @property
    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.tokens))

    @classmethod
    def load(cls, path, max_len: int = MAX_LEN) -> "Vocab":
        tokens = tuple(Path(path).read_text().splitlines())
        if tokens[:2] != (PAD_TOKEN, UNK_TOKEN):
            raise ValueError(f"{path}: vocab must start with {PAD_TOKEN}, {UNK_TOKEN}")
        return cls(tokens, max_len)


def tokenize(text: str, vocab: Vocab) -> np.ndarray:
    ids = [vocab.id(w) for w in text.lower().split()][: vocab.max_len]
    ids += [PAD] * (vocab.max_len - len(ids))
    return np.asarray(ids, dtype=np.int64)


def tokenize_batch(texts, vocab: Vocab) -> np.ndarray:
    if len(texts) == 0:
        return np.zeros((0, vocab.max_len), dtype=np.int64)
    return np.stack([tokenize(t, vocab) for t in texts])


# ---------------------------------------------------------------------------
# Architecture + init
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArchConfig:
    image_size: int = 64
    channels: tuple[int, ...] = (3, 16, 32, 32)
    embed_dim: int = 64
    token_dim: int = 64
    vocab_size: int = 2

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for i in range(len(self.channels) - 1):
            cin, cout = self.channels[i], self.channels[i + 1]
            shapes[f"conv{i + 1}.w"] = (3, 3, cin, cout)
            shapes[f"conv{i + 1}.b"] = (cout,)
        shapes["img_proj.w"] = (self.channels[-1], self.embed_dim)
        shapes["img_proj.b"] = (self.embed_dim,)
        shapes["tok_emb"] = (self.vocab_size, self.token_dim)
        shapes["txt_proj.w"] = (self.token_dim, self.embed_dim)
        shapes["txt_proj.b"] = (self.embed_dim,)
        shapes["log_temperature"] = ()
        return shapes

    @property
    def n_conv(self):
        return len(self.channels) - 1


def init_params(arch: ArchConfig, seed: int, dtype=np.float32,
                log_temperature: float = math.log(1 / 0.07)) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, one seeded stream.

    Biases use the fan-in of their layer. The token table is treated as a
    one-hot lookup of fan-in 1; its PAD and UNK rows start at zero.
    """
    rng = np.random.default_rng(seed)
    shapes = arch.param_shapes()
    fan = {}
    for i in range(arch.n_conv):
        fan[f"conv{i + 1}.w"] = fan[f"conv{i + 1}.b"] = 9 * arch.channels[i]
    fan["img_proj.w"] = fan["img_proj.b"] = arch.channels[-1]
    fan["tok_emb"] = 1
    fan["txt_proj.w"] = fan["txt_proj.b"] = arch.token_dim
    params = {}
    for name, shape in shapes.items():
        if name == "log_temperature":
            params[name] = np.asarray(log_temperature, dtype=dtype)
            continue
        bound = 1.0 / math.sqrt(fan[name])
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    # PAD never enters the mean; UNK never occurs in training text, so a zero
    # row keeps unknown words from injecting an untrained direction
    params["tok_emb"][[PAD, UNK]] = 0
    return params


def is_decayed(name: str) -> bool:
    """Weights get decoupled weight decay; biases and the temperature do not."""
    return name != "log_temperature" and not name.endswith(".b")


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def _conv_s2_forward(x, w, b):
    """3x3 conv, stride 2, zero pad 1. x: (B, H, W, Cin) -> (B, ceil(H/2), ceil(W/2), Cout)."""
    B, H, W, cin = x.shape
    cout = w.shape[3]
    Ho, Wo = (H + 1) // 2, (W + 1) // 2
    xp = np.zeros((B, H + 2, W + 2, cin), dtype=x.dtype)
    xp[:, 1:H + 1, 1:W + 1] = x
    # im2col: (B*Ho*Wo, 9*Cin), kernel offsets in (ki, kj, cin) order to match w.reshape
    cols = np.empty((B, Ho, Wo, 3, 3, cin), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, :, ki, kj, :] = xp[:, ki:ki + 2 * Ho:2, kj:kj + 2 * Wo:2, :]
    cols = cols.reshape(B * Ho * Wo, 9 * cin)
    out = cols @ w.reshape(9 * cin, cout) + b
    return out.reshape(B, Ho, Wo, cout), cols


def _conv_s2_backward(dout, cols, x_shape, w):
    B, H, W, cin = x_shape
    cout = w.shape[3]
    Ho, Wo = dout.shape[1], dout.shape[2]
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(9 * cin, cout).T).reshape(B, Ho, Wo, 3, 3, cin)
    dxp = np.zeros((B, H + 2, W + 2, cin), dtype=dout.dtype)
    for ki in range(3):
        for kj in range(3):
            dxp[:, ki:ki + 2 * Ho:2, kj:kj + 2 * Wo:2, :] += dcols[:, :, :, ki, kj, :]
    return dxp[:, 1:H + 1, 1:W + 1], dw, db


def _rowwise_matmul(x, w):
    """``x @ w`` reduced row by row, so a row's result never depends on the batch it sits in.

    BLAS picks different kernels (and summation orders) for one row than for
    many; the projections are small enough to do the reduction in numpy.
    """
    return np.einsum("bk,kd->bd", x, w, optimize=False)


def _l2n_forward(u):
    norm = np.sqrt(np.sum(u * u, axis=-1, keepdims=True))
    norm = np.maximum(norm, np.finfo(u.dtype).tiny)
    return u / norm, norm


def _l2n_backward(dy, y, norm):
    return (dy - y * np.sum(y * dy, axis=-1, keepdims=True)) / norm


# ---------------------------------------------------------------------------
# Image encoder
# ---------------------------------------------------------------------------


def _as_batch(images, size=None):
    x = np.asarray(images)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3) or (B, H, W, 3) raster, got shape {np.shape(images)}")
    if size is not None and x.shape[1:3] != (size, size):
        raise ValueError(f"expected {size}x{size} raster, got {x.shape[1]}x{x.shape[2]}")
    return x, single


def to_float_image(image, dtype=np.float32) -> np.ndarray:
    """uint8 raster -> [0, 1] float; float input is passed through."""
    a = np.asarray(image)
    if a.dtype == np.uint8:
        return a.astype(dtype) / np.asarray(255.0, dtype=dtype)
    return a.astype(dtype, copy=False)


def image_forward(params, images):
    """Batched image forward. ``images`` is (B, H, W, 3) in [0, 1].

    The raster is inverted first (ink = 1 - pixel) so the white background
    is exactly zero and zero padding matches it.
    """
    dtype = params["img_proj.w"].dtype
    x = 1.0 - np.asarray(images, dtype=dtype)
    cache = {"layers": []}
    n_conv = sum(1 for k in params if k.startswith("conv") and k.endswith(".w"))
    h = x
    for i in range(1, n_conv + 1):
        pre, cols = _conv_s2_forward(h, params[f"conv{i}.w"], params[f"conv{i}.b"])
        cache["layers"].append((h.shape, cols, pre > 0))
        h = np.maximum(pre, 0)
    pooled = h.mean(axis=(1, 2))
    cache["pool_shape"] = h.shape
    cache["pooled"] = pooled
    u = _rowwise_matmul(pooled, params["img_proj.w"]) + params["img_proj.b"]
    y, norm = _l2n_forward(u)
    cache["y"], cache["norm"] = y, norm
    return y, cache


def image_backward(params, cache, dy):
    grads = {}
    du = _l2n_backward(dy, cache["y"], cache["norm"])
    grads["img_proj.w"] = cache["pooled"].T @ du
    grads["img_proj.b"] = du.sum(axis=0)
    dpooled = du @ params["img_proj.w"].T
    B, Hh, Wh, C = cache["pool_shape"]
    dh = np.broadcast_to(dpooled[:, None, None, :] / (Hh * Wh), (B, Hh, Wh, C))
    for i in range(len(cache["layers"]), 0, -1):
        x_shape, cols, mask = cache["layers"][i - 1]
        dpre = dh * mask
        dh, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = _conv_s2_backward(
            dpre, cols, x_shape, params[f"conv{i}.w"])
    return grads


def encode_images(images, params, batch_size: int = 256) -> np.ndarray:
    """Unit-norm embeddings for a stack of rasters (uint8 or [0, 1] float)."""
    dtype = params["img_proj.w"].dtype
    x, _ = _as_batch(images)
    out = []
    for s in range(0, len(x), batch_size):
        chunk = to_float_image(x[s:s + batch_size], dtype)
        out.append(image_forward(params, chunk)[0])
    if not out:
        return np.zeros((0, params["img_proj.w"].shape[1]), dtype=dtype)
    return np.concatenate(out)


def encode_image(image, params, image_size: int | None = None) -> np.ndarray:
    x, single = _as_batch(image, image_size)
    if not single:
        raise ValueError(f"encode_image takes one (H, W, 3) raster, got shape {np.shape(image)}")
    return encode_images(x, params)[0]


# ---------------------------------------------------------------------------
# Text encoder
# ---------------------------------------------------------------------------


def text_forward(params, tokens):
    """Mean of non-PAD token vectors -> linear -> L2 normalize. tokens: (B, L)."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None]
    emb = params["tok_emb"]
    mask = (tokens != PAD).astype(emb.dtype)
    count = mask.sum(axis=1, keepdims=True)
    denom = np.maximum(count, 1.0)
    pooled = (emb[tokens] * mask[..., None]).sum(axis=1) / denom
    u = _rowwise_matmul(pooled, params["txt_proj.w"]) + params["txt_proj.b"]
    y, norm = _l2n_forward(u)
    cache = {"tokens": tokens, "mask": mask, "denom": denom, "pooled": pooled, "y": y, "norm": norm}
    return y, cache


def text_backward(params, cache, dy):
    du = _l2n_backward(dy, cache["y"], cache["norm"])
    grads = {
        "txt_proj.w": cache["pooled"].T @ du,
        "txt_proj.b": du.sum(axis=0),
    }
    dpooled = du @ params["txt_proj.w"].T
    dtok = (dpooled / cache["denom"])[:, None, :] * cache["mask"][..., None]
    g = np.zeros_like(params["tok_emb"])
    np.add.at(g, cache["tokens"].ravel(), dtok.reshape(-1, g.shape[1]))
    grads["tok_emb"] = g
    return grads


def encode_text(tokens, params) -> np.ndarray:
    y, _ = text_forward(params, tokens)
    return y[0] if np.asarray(tokens).ndim == 1 else y


def encode_texts(texts, vocab: Vocab, params) -> np.ndarray:
    return text_forward(params, tokenize_batch(list(texts), vocab))[0]


# ---------------------------------------------------------------------------
# Checkpoint
# ---------------------------------------------------------------------------

MAGIC = b"FCLIPCKP"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    code = "checkpoint"


class TruncatedCheckpointError(CheckpointError):
    code = "truncated"


class CorruptCheckpointError(CheckpointError):
    code = "checksum"


class DigestMismatchError(CheckpointError):
    code = "digest_mismatch"


class NonFiniteTensorError(CheckpointError):
    code = "non_finite"


class ShapeMismatchError(CheckpointError):
    code = "shape_mismatch"


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    arch: ArchConfig
    vocab_digest: str
    config_digest: str = ""
    step: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def metadata(self) -> dict:
        return {
            "arch": self.arch.to_dict(),
            "vocab_digest": self.vocab_digest,
            "embed_dim": self.arch.embed_dim,
            "config_digest": self.config_digest,
            "step": self.step,
            "extra": self.extra,
        }


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteTensorError(f"tensor {name!r} contains NaN or Inf")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(meta)), meta,
             struct.pack("<I", len(ckpt.params))]
    for name in sorted(ckpt.params):
        arr = np.asarray(ckpt.params[name])
        _check_finite(name, arr)
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    """Write ``ckpt`` and return the sha256 of the file bytes."""
    data = checkpoint_bytes(ckpt)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, expected_vocab_digest: str | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    meta = json.loads(r.take(r.u32()))
    params = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
    crc = r.u32()
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes after checkpoint")
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptCheckpointError(f"{path}: checksum mismatch")
    for name, arr in params.items():
        _check_finite(name, arr)
    arch = ArchConfig.from_dict(meta["arch"])
    expected = arch.param_shapes()
    if set(expected) != set(params):
        raise ShapeMismatchError(f"{path}: tensor names {sorted(params)} != {sorted(expected)}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ShapeMismatchError(f"{path}: {name} has shape {params[name].shape}, expected {shape}")
    if expected_vocab_digest is not None and meta["vocab_digest"] != expected_vocab_digest:
        raise DigestMismatchError(
            f"{path}: vocab digest {meta['vocab_digest'][:12]} != expected {expected_vocab_digest[:12]}")
    return Checkpoint(params=params, arch=arch, vocab_digest=meta["vocab_digest"],
                      config_digest=meta["config_digest"], step=meta["step"], extra=meta.get("extra", {}))


@dataclass
class Model:
    """Parameters plus the vocabulary they were trained with."""
    params: dict[str, np.ndarray]
    vocab: Vocab

    def images(self, images) -> np.ndarray:
        return encode_images(images, self.params)

    def texts(self, texts) -> np.ndarray:
        return encode_texts(texts, self.vocab, self.params)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, vocab: Vocab) -> "Model":
        if ckpt.vocab_digest != vocab.digest:
            raise DigestMismatchError(
                f"checkpoint vocab digest {ckpt.vocab_digest[:12]} != vocab.txt digest {vocab.digest[:12]}")
        return cls(ckpt.params, vocab)
