"""Retrieval, zero-shot classification, F1, prior baseline and the linear probe."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import synthcat
from .encoder import Model

SORTAL_TEMPLATE = "{}"
STYLE_TEMPLATE = "an item in {} style"


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingIndex:
    matrix: np.ndarray
    ids: list[str]

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.ids):
            raise ValueError(f"index has {self.matrix.shape[0]} rows but {len(self.ids)} ids")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate ids in index")
        if len(self.ids) and not np.allclose(np.linalg.norm(self.matrix, axis=1), 1.0, atol=1e-4):
            raise ValueError("index rows must be unit-norm")

    def __len__(self):
        return len(self.ids)

    def extend(self, other: "EmbeddingIndex") -> "EmbeddingIndex":
        return EmbeddingIndex(np.concatenate([self.matrix, other.matrix]), [*self.ids, *other.ids])


def build_index(products, model: Model) -> EmbeddingIndex:
    """Encode every product image once; rows ordered by product id."""
    products = sorted(products, key=lambda p: p.id)
    if not products:
        raise ValueError("cannot index an empty product list")
    return EmbeddingIndex(model.images(np.stack([p.image for p in products])), [p.id for p in products])


def _order(scores: np.ndarray, ids) -> list[int]:
    # primary key: descending score; secondary: ascending id
    ids_arr = np.asarray(ids)
    return list(np.lexsort((ids_arr, -scores)))


def rank_by_embedding(query: np.ndarray, index: EmbeddingIndex) -> list[str]:
    scores = index.matrix @ query
    return [index.ids[i] for i in _order(scores, index.ids)]


def rank(query_text: str, index: EmbeddingIndex, model: Model) -> list[str]:
    if not len(index):
        raise ValueError("empty index")
    return rank_by_embedding(model.texts([query_text])[0], index)


def gold_positions(queries: np.ndarray, gold_ids, index: EmbeddingIndex) -> np.ndarray:
    """0-based rank of each query's gold item (ties counted by ascending id)."""
    pos = {pid: i for i, pid in enumerate(index.ids)}
    missing = [g for g in gold_ids if g not in pos]
    if missing:
        raise KeyError(f"gold ids not in index: {missing[:5]}")
    scores = queries @ index.matrix.T
    ids = np.asarray(index.ids)
    out = np.empty(len(gold_ids), dtype=np.int64)
    for q, g in enumerate(gold_ids):
        gi = pos[g]
        s, gs = scores[q], scores[q, gi]
        out[q] = np.count_nonzero(s > gs) + np.count_nonzero((s == gs) & (ids < g))
    return out


def hits_at_k(test_products, index: EmbeddingIndex, model: Model, k: int = 5) -> float:
    """Fraction of products whose caption ranks their own image within the top ``k``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not test_products:
        raise ValueError("no test products")
    queries = model.texts([p.caption for p in test_products])
    return float(np.mean(gold_positions(queries, [p.id for p in test_products], index) < k))


# ---------------------------------------------------------------------------
# Zero-shot classification
# ---------------------------------------------------------------------------


def argmax_first(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; np.argmax already returns the first maximum."""
    return np.argmax(scores, axis=-1)


def zero_shot_scores(image_embs: np.ndarray, labels, template: str, model: Model) -> np.ndarray:
    if not labels:
        raise ValueError("zero-shot classification needs at least one label")
    return image_embs @ model.texts([template.format(l) for l in labels]).T


def zero_shot_classify(image, labels, template: str, model: Model) -> str:
    emb = model.images(np.asarray(image)[None])
    return labels[int(argmax_first(zero_shot_scores(emb, labels, template, model))[0])]


def zero_shot_batch(images, labels, template: str, model: Model) -> list[str]:
    embs = model.images(np.asarray(images))
    return [labels[i] for i in argmax_first(zero_shot_scores(embs, labels, template, model))]


def zero_shot_from_embeddings(embs, labels, template, model: Model) -> list[str]:
    return [labels[i] for i in argmax_first(zero_shot_scores(embs, labels, template, model))]


# ---------------------------------------------------------------------------
# Metrics and baselines
# ---------------------------------------------------------------------------


def weighted_macro_f1(predictions, golds) -> float:
    predictions, golds = list(predictions), list(golds)
    if len(predictions) != len(golds):
        raise ValueError(f"{len(predictions)} predictions vs {len(golds)} golds")
    if not golds:
        raise ValueError("empty label sequences")
    pred, gold = np.asarray(predictions, dtype=object), np.asarray(golds, dtype=object)
    total = 0.0
    for c in dict.fromkeys(golds):
        tp = np.count_nonzero((pred == c) & (gold == c))
        n_pred, n_gold = np.count_nonzero(pred == c), np.count_nonzero(gold == c)
        p = tp / n_pred if n_pred else 0.0
        r = tp / n_gold
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        total += n_gold * f1
    return total / len(golds)


def multilabel_golds(predictions, label_sets) -> list[str]:
    """Single gold per item for items carrying several valid labels.

    A prediction that is one of the item's labels counts as the gold;
    otherwise the item's first label is the gold.
    """
    out = []
    for pred, labels in zip(predictions, label_sets, strict=True):
        if not labels:
            raise ValueError("every item needs at least one label")
        out.append(pred if pred in labels else labels[0])
    return out


def prior_baseline(train_labels, test_size: int, seed: int) -> list[str]:
    """I.i.d. draws from the empirical label distribution of ``train_labels``."""
    if not train_labels:
        raise ValueError("prior baseline needs training labels")
    classes, counts = np.unique(np.asarray(train_labels, dtype=str), return_counts=True)
    rng = np.random.default_rng(seed)
    return [str(c) for c in rng.choice(classes, size=test_size, p=counts / counts.sum())]


# ---------------------------------------------------------------------------
# Linear probe
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 0.1
    iterations: int = 500
    l2: float = 1e-4
    seed: int = 0
    init_scale: float = 0.01
    standardize: bool = True


@dataclass
class LinearClassifier:
    weight: np.ndarray  # (d, C)
    bias: np.ndarray  # (C,)
    classes: list[str]
    # feature standardization fitted on the probe's training set
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("a classifier needs at least two classes")
        if self.weight.shape[1] != len(self.classes) or self.bias.shape != (len(self.classes),):
            raise ValueError("parameter shapes do not match the class list")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("non-finite classifier parameters")

    def transform(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if self.mean is not None:
            x = (x - self.mean) / self.scale
        return x

    def logits(self, features) -> np.ndarray:
        return self.transform(features) @ self.weight + self.bias

    def predict(self, features) -> list[str]:
        return [self.classes[i] for i in argmax_first(self.logits(features))]


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def probe_loss_and_grad(weight, bias, x, y, l2):
    """Mean cross-entropy plus ``l2/2 * |W|^2``; returns (loss, dW, db)."""
    n = x.shape[0]
    p = _softmax(x @ weight + bias)
    loss = -np.mean(np.log(p[np.arange(n), y])) + 0.5 * l2 * np.sum(weight * weight)
    d = p.copy()
    d[np.arange(n), y] -= 1.0
    d /= n
    return loss, x.T @ d + l2 * weight, d.sum(axis=0)


def train_linear(features, labels, cfg: ProbeConfig = ProbeConfig()) -> LinearClassifier:
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ValueError(f"linear probe needs >= 2 classes, got {classes}")
    x = np.asarray(features, dtype=np.float64)
    mean = scale = None
    if cfg.standardize:
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale[scale < 1e-12] = 1.0
        x = (x - mean) / scale
    lookup = {c: i for i, c in enumerate(classes)}
    y = np.array([lookup[l] for l in labels])
    rng = np.random.default_rng(cfg.seed)
    w = rng.normal(0.0, cfg.init_scale, size=(x.shape[1], len(classes)))
    b = np.zeros(len(classes))
    for _ in range(cfg.iterations):
        _, dw, db = probe_loss_and_grad(w, b, x, y, cfg.l2)
        w -= cfg.lr * dw
        b -= cfg.lr * db
    return LinearClassifier(w, b, classes, mean, scale)


def pool_scores(classifier: LinearClassifier, features, mapping: dict[str, str]):
    """Sum softmax probabilities of classifier classes into their target labels.

    Returns ``(scores, targets, predictions)`` where ``targets`` lists target
    labels in first-appearance order over the classifier's classes.
    """
    unmapped = [c for c in classifier.classes if c not in mapping]
    if unmapped:
        raise KeyError(f"classes without a target label: {unmapped}")
    targets = list(dict.fromkeys(mapping[c] for c in classifier.classes))
    probs = _softmax(classifier.logits(features))
    scores = np.zeros((probs.shape[0], len(targets)))
    for j, c in enumerate(classifier.classes):
        scores[:, targets.index(mapping[c])] += probs[:, j]
    return scores, targets, [targets[i] for i in argmax_first(scores)]


# ---------------------------------------------------------------------------
# Probe vs zero-shot comparison
# ---------------------------------------------------------------------------


@dataclass
class CheatingRow:
    dataset: str
    n: int
    zero_shot_f1: float
    probe_f1: float

    @property
    def delta_f1(self) -> float:
        return self.probe_f1 - self.zero_shot_f1

    def to_dict(self):
        return {"dataset": self.dataset, "n": self.n, "zero_shot_f1": self.zero_shot_f1,
                "probe_f1": self.probe_f1, "delta_f1": self.delta_f1}


def sortal_labels(products) -> list[str]:
    return [p.spec.sortal if p.spec else p.tree[1].lower() for p in products]


def cheating_datasets(test_products, n: int | None = None) -> dict[str, list]:
    """In-domain test subset plus its three shifted renderings."""
    subset = sorted(test_products, key=lambda p: p.id)[:n]
    out = {"test": subset}
    for variant in synthcat.VARIANTS[1:]:
        out[variant] = synthcat.shifted_variant(subset, variant)
    return out


def cheating_report(model: Model, probe_products, datasets: dict[str, list],
                    probe_cfg: ProbeConfig = ProbeConfig(),
                    mappings: dict[str, dict[str, str]] | None = None) -> list[CheatingRow]:
    """Zero-shot vs linear-probe weighted F1 on sortal labels, per dataset.

    The probe is trained on ``probe_products`` (normally the val split). When
    ``mappings`` gives a class->target map for a dataset, probe probabilities
    are pooled into those targets and zero-shot predictions are mapped the
    same way.
    """
    mappings = mappings or {}
    probe = train_linear(model.images(np.stack([p.image for p in probe_products])),
                         sortal_labels(probe_products), probe_cfg)
    rows = []
    for name, products in datasets.items():
        embs = model.images(np.stack([p.image for p in products]))
        golds = sortal_labels(products)
        mapping = mappings.get(name, {c: c for c in probe.classes})
        zs = zero_shot_from_embeddings(embs, probe.classes, SORTAL_TEMPLATE, model)
        zs = [mapping[c] for c in zs]
        _, _, probe_pred = pool_scores(probe, embs, mapping)
        golds = [mapping.get(g, g) for g in golds]
        rows.append(CheatingRow(name, len(products), weighted_macro_f1(zs, golds),
                                weighted_macro_f1(probe_pred, golds)))
    return rows
