"""Symmetric contrastive loss, its exact gradients, AdamW and the training schedule."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import encoder as enc

log = logging.getLogger(__name__)


# fine-tuning grid used on top of pretrained CLIP weights
PAPER_LEARNING_RATES = (1e-4, 1e-5, 1e-6)
# same three-decade grid shifted up two decades for training from scratch
DESK_LEARNING_RATES = (2e-3, 1e-3, 5e-4)


@dataclass(frozen=True)
class ContrastiveConfig:
    batch_size: int = 32
    learning_rates: tuple[float, ...] = DESK_LEARNING_RATES
    adam_betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-6
    weight_decay: float = 0.2
    epochs: int = 12
    eval_every_steps: int = 500
    log_temperature_init: float = math.log(1 / 0.07)
    temperature_max: float = 100.0
    seed: int = 0
    usd_per_hour: float = 3.06
    kg_co2_per_hour: float = 0.075
    # nominal step time for the cost ledger; None measures wall time instead
    seconds_per_step: float | None = 0.1

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if not self.learning_rates or any(lr <= 0 for lr in self.learning_rates):
            raise ValueError(f"learning rates must be > 0, got {self.learning_rates}")
        if not all(0 < b < 1 for b in self.adam_betas):
            raise ValueError(f"adam betas must lie in (0, 1), got {self.adam_betas}")
        if self.epochs < 1 or self.eval_every_steps < 1:
            raise ValueError("epochs and eval_every_steps must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["learning_rates"] = list(self.learning_rates)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "learning_rates" in d:
            d["learning_rates"] = tuple(d["learning_rates"])
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def logit_scale(log_temperature, temperature_max: float = 100.0) -> float:
    return float(np.exp(min(float(log_temperature), math.log(temperature_max))))


def similarity_matrix(img_embs, txt_embs, log_temperature, temperature_max: float = 100.0):
    """logits[j, k] = exp(clamped log_temperature) * <img_j, txt_k>."""
    img_embs, txt_embs = np.asarray(img_embs), np.asarray(txt_embs)
    if img_embs.ndim != 2 or txt_embs.ndim != 2 or img_embs.shape[1] != txt_embs.shape[1]:
        raise ValueError(f"dimension mismatch: images {img_embs.shape} vs texts {txt_embs.shape}")
    return logit_scale(log_temperature, temperature_max) * (img_embs @ txt_embs.T)


def _log_softmax(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def clip_loss(logits) -> float:
    """Mean of the image->text and text->image cross-entropies, targets on the diagonal."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("clip_loss: logits contain NaN or Inf")
    diag = np.arange(len(logits))
    rows = -_log_softmax(logits, axis=1)[diag, diag].mean()
    cols = -_log_softmax(logits, axis=0)[diag, diag].mean()
    return float(0.5 * (rows + cols))


def clip_loss_grad(logits):
    """(loss, dloss/dlogits) for the symmetric loss."""
    n = len(logits)
    lr, lc = _log_softmax(logits, axis=1), _log_softmax(logits, axis=0)
    diag = np.arange(n)
    loss = 0.5 * (-lr[diag, diag].mean() - lc[diag, diag].mean())
    eye = np.eye(n, dtype=logits.dtype)
    g = 0.5 * ((np.exp(lr) - eye) + (np.exp(lc) - eye)) / n
    return float(loss), g


def loss_and_grads(params, images, tokens, temperature_max: float = 100.0):
    """Forward + exact backward of clip_loss over one batch of (image, tokens) pairs.

    ``images`` are float (N, H, W, 3) in [0, 1]. Returns (loss, grads) with one
    gradient per parameter, including ``log_temperature``.
    """
    img, icache = enc.image_forward(params, images)
    txt, tcache = enc.text_forward(params, tokens)
    lt = float(params["log_temperature"])
    clamped = lt > math.log(temperature_max)
    scale = logit_scale(lt, temperature_max)
    cos = img @ txt.T
    loss, dlogits = clip_loss_grad(scale * cos)
    dcos = scale * dlogits
    grads = enc.image_backward(params, icache, dcos @ txt)
    grads.update(enc.text_backward(params, tcache, dcos.T @ img))
    dlt = 0.0 if clamped else float(np.sum(dlogits * cos) * scale)
    grads["log_temperature"] = np.asarray(dlt, dtype=params["log_temperature"].dtype)
    return loss, grads


def batch_loss(params, images, tokens, temperature_max: float = 100.0) -> float:
    img = enc.image_forward(params, images)[0]
    txt = enc.text_forward(params, tokens)[0]
    return clip_loss(similarity_matrix(img, txt, params["log_temperature"], temperature_max))


backward = loss_and_grads


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay on weights only."""

    def __init__(self, params, lr, betas=(0.9, 0.98), eps=1e-6, weight_decay=0.2):
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k in sorted(params):
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p = params[k]
            if enc.is_decayed(k):
                p = p - self.lr * self.weight_decay * p
            params[k] = (p - self.lr * update).astype(p.dtype)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class EvalRecord:
    step: int
    train_loss: float
    val_loss: float


@dataclass
class TrainingLedger:
    learning_rate: float
    records: list[EvalRecord] = field(default_factory=list)
    wall_minutes: float = 0.0
    selected_step: int | None = None
    cost_usd: float = 0.0
    kg_co2_eq: float = 0.0
    diverged: bool = False
    first_train_loss: float | None = None
    final_train_loss: float | None = None
    measured_minutes: float = field(default=0.0, compare=False)

    def to_dict(self):
        d = asdict(self)
        d.pop("measured_minutes")
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["records"] = [EvalRecord(**r) for r in d.get("records", [])]
        return cls(**d)

    @property
    def selected_val_loss(self):
        for r in self.records:
            if r.step == self.selected_step:
                return r.val_loss
        return None


def cost_estimate(wall_minutes: float, usd_per_hour: float, kg_co2_per_hour: float):
    hours = wall_minutes / 60.0
    return hours * usd_per_hour, hours * kg_co2_per_hour


@dataclass
class PairData:
    """Aligned image/text pairs. images: uint8 (N, H, W, 3); tokens: (N, L)."""
    images: np.ndarray
    tokens: np.ndarray

    def __len__(self):
        return len(self.images)


def dataset_loss(params, data: PairData, batch_size: int, temperature_max: float) -> float:
    """Mean clip_loss over consecutive full batches (the last partial batch is dropped)."""
    try:
        return _dataset_loss(params, data, batch_size, temperature_max)
    except ValueError:
        # clip_loss rejects non-finite logits: the model has diverged
        return float("nan")


def _dataset_loss(params, data, batch_size, temperature_max):
    n_batches = len(data) // batch_size
    if n_batches == 0:
        # smaller than one batch: evaluate it as a single batch
        return batch_loss(params, enc.to_float_image(data.images), data.tokens, temperature_max)
    losses = []
    for b in range(n_batches):
        sl = slice(b * batch_size, (b + 1) * batch_size)
        losses.append(batch_loss(params, enc.to_float_image(data.images[sl]), data.tokens[sl],
                                 temperature_max))
    return float(np.mean(losses))


def eval_steps(steps_per_epoch: int, epochs: int, eval_every: int) -> list[int]:
    """Global steps after which validation runs.

    Every ``eval_every`` steps; if an epoch is shorter than that, once at the
    end of every epoch instead. The final step is always evaluated.
    """
    total = steps_per_epoch * epochs
    if steps_per_epoch < eval_every:
        steps = [steps_per_epoch * (e + 1) for e in range(epochs)]
    else:
        steps = list(range(eval_every, total + 1, eval_every))
        if not steps or steps[-1] != total:
            steps.append(total)
    return steps


def train_one_rate(init, train: PairData, val: PairData, cfg: ContrastiveConfig, lr: float,
                   seconds_per_step: float | None = None):
    """Train from ``init`` at one learning rate.

    Returns (best_params, best_step, ledger, snapshots) where ``snapshots``
    maps each evaluated step to its parameters. With ``seconds_per_step`` set,
    the ledger's minutes are the nominal ``steps * seconds_per_step / 60`` so
    the ledger is reproducible byte for byte; otherwise wall time is measured.
    """
    if len(train) < cfg.batch_size:
        raise ValueError(f"train split has {len(train)} pairs, fewer than one batch of {cfg.batch_size}")
    if len(val) < 2:
        raise ValueError("val split needs at least 2 pairs")
    params = {k: v.copy() for k, v in init.items()}
    opt = AdamW(params, lr, cfg.adam_betas, cfg.adam_eps, cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 1])
    steps_per_epoch = len(train) // cfg.batch_size
    evals = set(eval_steps(steps_per_epoch, cfg.epochs, cfg.eval_every_steps))
    lt_max = math.log(cfg.temperature_max)
    ledger = TrainingLedger(learning_rate=lr)
    snapshots = {}
    recent = []
    t0 = time.perf_counter()
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(train))
        for b in range(steps_per_epoch):
            idx = np.sort(order[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            images = enc.to_float_image(train.images[idx])
            loss, grads = loss_and_grads(params, images, train.tokens[idx], cfg.temperature_max)
            if not np.isfinite(loss):
                log.warning("lr=%g diverged at step %d (train loss %s)", lr, step + 1, loss)
                ledger.diverged = True
                break
            if ledger.first_train_loss is None:
                ledger.first_train_loss = loss
            opt.step(params, grads)
            if params["log_temperature"] > lt_max:
                params["log_temperature"] = np.asarray(lt_max, dtype=params["log_temperature"].dtype)
            step += 1
            recent.append(loss)
            if step in evals:
                train_loss = float(np.mean(recent))
                recent = []
                val_loss = dataset_loss(params, val, cfg.batch_size, cfg.temperature_max)
                ledger.records.append(EvalRecord(step, train_loss, val_loss))
                ledger.final_train_loss = train_loss
                log.info("lr=%g step=%d train_loss=%.4f val_loss=%.4f", lr, step, train_loss, val_loss)
                if not (np.isfinite(val_loss) and np.isfinite(train_loss)):
                    ledger.diverged = True
                    break
                snapshots[step] = {k: v.copy() for k, v in params.items()}
        if ledger.diverged:
            break
    ledger.measured_minutes = (time.perf_counter() - t0) / 60.0
    if seconds_per_step is None:
        ledger.wall_minutes = ledger.measured_minutes
    else:
        ledger.wall_minutes = step * seconds_per_step / 60.0
    ledger.cost_usd, ledger.kg_co2_eq = cost_estimate(ledger.wall_minutes, cfg.usd_per_hour,
                                                     cfg.kg_co2_per_hour)
    finite = [r for r in ledger.records if np.isfinite(r.val_loss)]
    if not finite:
        ledger.diverged = True
        return None, None, ledger, snapshots
    best = min(finite, key=lambda r: (r.val_loss, r.step))
    ledger.selected_step = best.step
    return snapshots[best.step], best.step, ledger, snapshots


@dataclass
class RateResult:
    learning_rate: float
    params: dict | None
    step: int | None
    ledger: TrainingLedger
    snapshots: dict


def pair_data(products, vocab: enc.Vocab) -> PairData:
    return PairData(np.stack([p.image for p in products]),
                    enc.tokenize_batch([p.caption for p in products], vocab))


def train(catalog, cfg: ContrastiveConfig, vocab: enc.Vocab | None = None,
          arch: enc.ArchConfig | None = None) -> tuple[enc.Vocab, list[RateResult]]:
    """Train one model per learning rate from a shared seeded init.

    Each rate keeps its lowest-validation-loss snapshot. A rate whose loss
    goes non-finite is flagged ``diverged`` in its ledger and the remaining
    rates still run.
    """
    train_p, val_p = catalog.split("train"), catalog.split("val")
    if not train_p or not val_p:
        raise ValueError(f"need non-empty train and val splits, got {len(train_p)} / {len(val_p)}")
    vocab = vocab or enc.Vocab.build([p.caption for p in train_p])
    arch = arch or enc.ArchConfig(vocab_size=len(vocab))
    init = enc.init_params(arch, cfg.seed, log_temperature=cfg.log_temperature_init)
    tr, va = pair_data(train_p, vocab), pair_data(val_p, vocab)
    results = []
    for lr in cfg.learning_rates:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            best, step, ledger, snaps = train_one_rate(init, tr, va, cfg, lr, cfg.seconds_per_step)
        results.append(RateResult(lr, best, step, ledger, snaps))
    return vocab, results
