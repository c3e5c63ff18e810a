"""Command-line pipeline: data generation, training, evaluations and the report.

Every stage reads and writes flat files under ``--out``. The effective run
configuration is stored as ``config.json`` by the first stage; later stages
reuse it and refuse to mix artifacts produced under a different config.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import contrastive as ct
from . import encoder as enc
from . import evalsuite as ev
from . import grounding as gr
from . import synthcat as sc

log = logging.getLogger("fclip")

CONFIG_FILE = "config.json"
LEDGER_FILE = "ledger.json"
METRICS_FILE = "metrics.json"
REPORT_FILE = "report.md"
VOCAB_FILE = "vocab.txt"
IMPROBABLE_NAME = "improbable"

# Metric sections produced by each evaluation subcommand.
SECTIONS = ("retrieval", "classify", "probe", "grounding", "improbable", "attack")

# A pair of phrases that differ only in which color goes to which part.
ORDER_PAIR = ("red shoe with black high heels", "black shoe with red high heels")


class HarnessError(Exception):
    """Data or model problem: missing, stale or inconsistent artifacts."""


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    k: int = 5
    occluder: gr.OccluderConfig = gr.OccluderConfig()
    probe: ev.ProbeConfig = ev.ProbeConfig()
    threshold_frac: float = 0.5
    n_grounding: int = 50
    n_improbables: int = 60
    label_set_size: int = 10
    n_attack: int = 50
    attack_word: str = sc.TEXT_BRAND

    def to_dict(self):
        d = asdict(self)
        d["occluder"] = self.occluder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "occluder" in d:
            d["occluder"] = gr.OccluderConfig.from_dict(d["occluder"])
        if "probe" in d:
            d["probe"] = ev.ProbeConfig(**d["probe"])
        return cls(**d)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    catalog: sc.CatalogConfig = sc.CatalogConfig()
    contrastive: ct.ContrastiveConfig = ct.ContrastiveConfig()
    eval: EvalConfig = EvalConfig()
    # back-derived from a 621-minute run priced at 31 USD and 0.78 kgCO2eq
    usd_per_hour: float = 3.06
    kg_co2_per_hour: float = 0.075

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, catalog=replace(self.catalog, seed=seed),
                       contrastive=replace(self.contrastive, seed=seed),
                       eval=replace(self.eval, probe=replace(self.eval.probe, seed=seed)))

    def training_config(self) -> ct.ContrastiveConfig:
        return replace(self.contrastive, usd_per_hour=self.usd_per_hour, kg_co2_per_hour=self.kg_co2_per_hour)

    def to_dict(self):
        return {"seed": self.seed, "catalog": self.catalog.to_dict(), "contrastive": self.contrastive.to_dict(),
                "eval": self.eval.to_dict(), "usd_per_hour": self.usd_per_hour,
                "kg_co2_per_hour": self.kg_co2_per_hour}

    @classmethod
    def from_dict(cls, d):
        known = {"seed", "catalog", "contrastive", "eval", "usd_per_hour", "kg_co2_per_hour"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        base = cls()
        seed = d.get("seed", base.seed)
        # the top-level seed applies to every section that does not set its own
        sub = {name: {"seed": seed, **d.get(name, {})} for name in ("catalog", "contrastive")}
        ev_d = dict(d.get("eval", {}))
        ev_d["probe"] = {"seed": seed, **ev_d.get("probe", {})}
        return cls(seed=seed,
                   catalog=sc.CatalogConfig.from_dict(sub["catalog"]),
                   contrastive=ct.ContrastiveConfig.from_dict(sub["contrastive"]),
                   eval=EvalConfig.from_dict(ev_d),
                   usd_per_hour=d.get("usd_per_hour", base.usd_per_hour),
                   kg_co2_per_hour=d.get("kg_co2_per_hour", base.kg_co2_per_hour))

    @property
    def digest(self) -> str:
        return sha256_bytes(canonical_json(self.to_dict()))


def canonical_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n").encode()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def load_config_file(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from None
    try:
        return RunConfig.from_dict(raw)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad config {path}: {e}") from None


def resolve_config(out: Path, config_path: str | None, seed: int | None, create: bool) -> RunConfig:
    """Effective config: explicit file/seed, else the one stored in ``out``.

    ``create`` stages (gen-data) write the stored config; other stages
    require any explicit config to match the stored one.
    """
    stored_path = out / CONFIG_FILE
    stored = RunConfig.from_dict(json.loads(stored_path.read_text())) if stored_path.exists() else None
    if config_path is not None:
        cfg = load_config_file(config_path)
    elif stored is not None and not create:
        cfg = stored
    else:
        cfg = RunConfig()
    if seed is not None:
        cfg = cfg.with_seed(seed)
    if create:
        out.mkdir(parents=True, exist_ok=True)
        stored_path.write_bytes(canonical_json(cfg.to_dict()))
    elif stored is None:
        raise HarnessError(f"no {CONFIG_FILE} in {out}: run gen-data first")
    elif stored.digest != cfg.digest:
        raise HarnessError(f"config digest {cfg.digest[:12]} does not match the one used for the "
                           f"artifacts in {out} ({stored.digest[:12]}); re-run gen-data")
    return cfg


# ---------------------------------------------------------------------------
# Artifact helpers
# ---------------------------------------------------------------------------


def dataset_digest(out: Path, name: str) -> str:
    """Digest over a product table, its specs and every referenced image."""
    h = hashlib.sha256()
    table = out / f"{name}.jsonl"
    for path in (table, out / f"{name}_specs.jsonl"):
        h.update(path.name.encode() + b"\0" + path.read_bytes())
    for line in table.read_text().splitlines():
        rel = json.loads(line)["image_path"]
        h.update(rel.encode() + b"\0" + (out / rel).read_bytes())
    return h.hexdigest()


def load_catalog(out: Path) -> sc.Catalog:
    try:
        return sc.read_catalog(out)
    except FileNotFoundError as e:
        raise HarnessError(f"missing catalog in {out} ({e}); run gen-data first") from None


def load_improbables(out: Path) -> list[sc.Product]:
    try:
        return sc.read_products(out, IMPROBABLE_NAME)
    except FileNotFoundError:
        raise HarnessError(f"missing {IMPROBABLE_NAME}.jsonl in {out}; run gen-data first") from None


def read_json(path: Path, what: str):
    if not path.exists():
        raise HarnessError(f"missing {what}: {path}")
    return json.loads(path.read_text())


def checkpoint_name(lr: float, step: int) -> str:
    return f"ckpt_{lr:g}_{step}.bin"


@dataclass
class SelectedModel:
    model: enc.Model
    checkpoint: str
    checkpoint_sha256: str
    ledger: dict
    untrained: enc.Model


def load_selected(out: Path, cfg: RunConfig) -> SelectedModel:
    ledger = read_json(out / LEDGER_FILE, "training ledger (run train first)")
    if ledger["config_digest"] != cfg.digest:
        raise HarnessError("ledger.json was produced under a different config; re-run train")
    if ledger["catalog_digest"] != dataset_digest(out, "catalog"):
        raise HarnessError("catalog changed since training; re-run train")
    sel = ledger["selected"]
    if sel is None:
        raise HarnessError("every learning rate diverged: no model to evaluate")
    vocab_path = out / VOCAB_FILE
    if not vocab_path.exists():
        raise HarnessError(f"missing {vocab_path}")
    vocab = enc.Vocab.load(vocab_path)
    path = out / sel["checkpoint"]
    if not path.exists():
        raise HarnessError(f"missing checkpoint {path}")
    digest = sha256_file(path)
    if digest != sel["checkpoint_sha256"]:
        raise HarnessError(f"checkpoint {path.name} does not match the digest recorded in the ledger")
    ckpt = enc.load_checkpoint(path, expected_vocab_digest=vocab.digest)
    untrained = enc.init_params(ckpt.arch, cfg.contrastive.seed,
                                log_temperature=cfg.contrastive.log_temperature_init)
    return SelectedModel(enc.Model(ckpt.params, vocab), sel["checkpoint"], digest, ledger,
                         enc.Model(untrained, vocab))


def run_metadata(out: Path, cfg: RunConfig, sel: SelectedModel) -> dict:
    return {
        "seed": cfg.seed,
        "config_digest": cfg.digest,
        "checkpoint": sel.checkpoint,
        "checkpoint_sha256": sel.checkpoint_sha256,
        "vocab_digest": sel.model.vocab.digest,
        "ledger_sha256": sha256_file(out / LEDGER_FILE),
        "dataset_digests": {"catalog": dataset_digest(out, "catalog"),
                            IMPROBABLE_NAME: dataset_digest(out, IMPROBABLE_NAME)},
        # fixed so that reruns are byte-identical; the digests pin the inputs
        "timestamp": "1970-01-01T00:00:00Z",
    }


def write_section(out: Path, meta: dict, section: str, metrics: dict, details=None):
    """Merge one section's metrics into metrics.json (stale sections are dropped)."""
    for name, value in metrics.items():
        if not math.isfinite(value):
            raise HarnessError(f"metric {name} is not finite: {value}")
    path = out / METRICS_FILE
    doc = json.loads(path.read_text()) if path.exists() else {}
    if doc.get("metadata") != meta:
        doc = {"metadata": meta, "metrics": {}, "details": {}, "sections": []}
    doc["metrics"] = {k: v for k, v in doc["metrics"].items() if not k.startswith(section + "/")}
    doc["metrics"].update({f"{section}/{k}": v for k, v in metrics.items()})
    doc["details"][section] = details if details is not None else {}
    doc["sections"] = sorted(set(doc["sections"]) | {section})
    path.write_bytes(canonical_json(doc))
    return doc


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def stage_gen_data(out: Path, cfg: RunConfig):
    catalog = sc.build_catalog(cfg.catalog)
    sc.write_catalog(catalog, out)
    imps = sc.build_improbables(cfg.eval.n_improbables, cfg.seed, cfg.catalog)
    sc.write_products(imps, out, IMPROBABLE_NAME)
    log.info("wrote %d catalog and %d improbable products to %s", len(catalog.products), len(imps), out)


def _val_zero_shot_f1(model: enc.Model, val) -> float:
    labels = sorted(set(ev.sortal_labels(val)))
    embs = model.images(np.stack([p.image for p in val]))
    return ev.weighted_macro_f1(ev.zero_shot_from_embeddings(embs, labels, ev.SORTAL_TEMPLATE, model),
                                ev.sortal_labels(val))


def select_rate(entries: list[dict]) -> int | None:
    """Index of the best rate: highest val zero-shot F1, then lowest val loss, then order."""
    ok = [i for i, e in enumerate(entries) if e["checkpoint"] is not None]
    if not ok:
        return None
    return min(ok, key=lambda i: (-entries[i]["val_zero_shot_f1"], entries[i]["ledger"]["records"] and
                                  min(r["val_loss"] for r in entries[i]["ledger"]["records"]), i))


def stage_train(out: Path, cfg: RunConfig):
    catalog = load_catalog(out)
    tcfg = cfg.training_config()
    vocab, results = ct.train(catalog, tcfg)
    vocab.save(out / VOCAB_FILE)
    for stale in out.glob("ckpt_*.bin"):
        stale.unlink()
    arch = enc.ArchConfig(vocab_size=len(vocab))
    val = catalog.split("val")
    entries = []
    for r in results:
        entry = {"learning_rate": r.learning_rate, "ledger": r.ledger.to_dict(), "checkpoint": None,
                 "checkpoint_sha256": None, "val_zero_shot_f1": None}
        if r.params is not None:
            name = checkpoint_name(r.learning_rate, r.step)
            ckpt = enc.Checkpoint(r.params, arch, vocab.digest, cfg.digest, r.step,
                                  {"learning_rate": r.learning_rate})
            entry["checkpoint"] = name
            entry["checkpoint_sha256"] = enc.save_checkpoint(ckpt, out / name)
            entry["val_zero_shot_f1"] = _val_zero_shot_f1(enc.Model(r.params, vocab), val)
        entries.append(entry)
        log.info("lr=%g selected_step=%s diverged=%s", r.learning_rate, r.step, r.ledger.diverged)
    best = select_rate(entries)
    doc = {
        "config_digest": cfg.digest,
        "catalog_digest": dataset_digest(out, "catalog"),
        "vocab_digest": vocab.digest,
        "cost_basis": {"usd_per_hour": cfg.usd_per_hour, "kg_co2_per_hour": cfg.kg_co2_per_hour,
                       "seconds_per_step": tcfg.seconds_per_step},
        "rates": entries,
        "selected": None if best is None else {
            "learning_rate": entries[best]["learning_rate"],
            "checkpoint": entries[best]["checkpoint"],
            "checkpoint_sha256": entries[best]["checkpoint_sha256"],
            "criterion": "highest val-split zero-shot sortal weighted F1",
        },
    }
    (out / LEDGER_FILE).write_bytes(canonical_json(doc))
    if best is None:
        raise HarnessError("every learning rate diverged")


def stage_eval_retrieval(out: Path, cfg: RunConfig, sel: SelectedModel):
    catalog = load_catalog(out)
    k = cfg.eval.k
    metrics = {}
    for split in ("test", "hout_c", "hout_b"):
        products = catalog.split(split)
        for tag, model in (("trained", sel.model), ("untrained", sel.untrained)):
            idx = ev.build_index(products, model)
            metrics[f"{split}/hits@{k}/{tag}"] = ev.hits_at_k(products, idx, model, k)
        metrics[f"{split}/hits@{k}/random"] = min(1.0, k / len(products))
        metrics[f"{split}/pool_size"] = float(len(products))
    return metrics, {}


def stage_eval_classify(out: Path, cfg: RunConfig, sel: SelectedModel):
    catalog = load_catalog(out)
    test = catalog.split("test")
    labels = sorted(set(ev.sortal_labels(catalog.split("train"))))
    golds = ev.sortal_labels(test)
    images = np.stack([p.image for p in test])
    # style is scored single-label against each item's first tag; the any-tag variant is supplementary
    style_sets = [p.styles for p in test]
    style_golds = [s[0] for s in style_sets]
    metrics = {}
    for tag, model in (("trained", sel.model), ("untrained", sel.untrained)):
        pred = ev.zero_shot_batch(images, labels, ev.SORTAL_TEMPLATE, model)
        metrics[f"sortal_f1/{tag}"] = ev.weighted_macro_f1(pred, golds)
        spred = ev.zero_shot_batch(images, list(sc.STYLES), ev.STYLE_TEMPLATE, model)
        metrics[f"style_f1/{tag}"] = ev.weighted_macro_f1(spred, style_golds)
        metrics[f"style_f1_any_tag/{tag}"] = ev.weighted_macro_f1(spred, ev.multilabel_golds(spred, style_sets))
    prior = ev.prior_baseline([p.styles[0] for p in catalog.split("train")], len(test), cfg.seed)
    metrics["style_f1/prior"] = ev.weighted_macro_f1(prior, style_golds)
    metrics["style_f1_any_tag/prior"] = ev.weighted_macro_f1(prior, ev.multilabel_golds(prior, style_sets))
    return metrics, {"sortal_labels": labels, "style_labels": list(sc.STYLES),
                     "templates": {"sortal": ev.SORTAL_TEMPLATE, "style": ev.STYLE_TEMPLATE}}


def stage_eval_probe(out: Path, cfg: RunConfig, sel: SelectedModel):
    catalog = load_catalog(out)
    rows = ev.cheating_report(sel.model, catalog.split("val"), ev.cheating_datasets(catalog.split("test")),
                              cfg.eval.probe)
    metrics = {}
    for r in rows:
        metrics[f"{r.dataset}/zero_shot_f1"] = r.zero_shot_f1
        metrics[f"{r.dataset}/probe_f1"] = r.probe_f1
        metrics[f"{r.dataset}/delta_f1"] = r.delta_f1
    return metrics, {"rows": [r.to_dict() for r in rows]}


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name)


def export_map(out: Path, result: gr.GroundingResult):
    maps = out / "maps"
    maps.mkdir(exist_ok=True)
    stem = f"{result.product_id}_{_safe(result.query)}"
    scores = result.lmap.scores
    top = scores.max()
    gray = np.zeros(scores.shape, dtype=np.uint8) if top <= 0 else np.round(255 * scores / top).astype(np.uint8)
    Image.fromarray(gray, mode="L").save(maps / f"{stem}.png", optimize=False)
    (maps / f"{stem}.json").write_bytes(canonical_json({**result.lmap.to_dict(), **result.to_dict()}))


def stage_eval_grounding(out: Path, cfg: RunConfig, sel: SelectedModel):
    catalog = load_catalog(out)
    test = catalog.split("test")
    e = cfg.eval
    branded = [p for p in test if p.brand][:e.n_grounding]
    hit, brand_results = gr.brand_localization(branded, sel.model, e.occluder)
    miou, sortal_results = gr.sortal_segmentation(test[:e.n_grounding], sel.model, e.occluder, e.threshold_frac)
    for r in brand_results + sortal_results:
        export_map(out, r)
    loose = float(np.mean([gr.argmax_patch_intersects(r.lmap, r.gt_box) for r in brand_results]))
    metrics = {"brand_hit_rate": hit, "brand_patch_intersect_rate": loose, "brand_n": float(len(brand_results)),
               "sortal_mean_iou": miou, "sortal_n": float(len(sortal_results))}
    return metrics, {"occluder": e.occluder.to_dict(), "threshold_frac": e.threshold_frac,
                     "brand": [r.to_dict() for r in brand_results],
                     "sortal": [r.to_dict() for r in sortal_results]}


def stage_eval_improbable(out: Path, cfg: RunConfig, sel: SelectedModel):
    catalog = load_catalog(out)
    imps = load_improbables(out)
    label_sets = gr.label_sets_for(imps, cfg.seed, cfg.eval.label_set_size, cfg.catalog)
    acc = gr.improbable_classification(imps, label_sets, sel.model)
    index = ev.build_index(catalog.split("test"), sel.model)
    hr1, hrk = gr.improbable_retrieval(imps, index, sel.model, cfg.eval.k)
    a, b = sel.model.texts(list(ORDER_PAIR))
    metrics = {"classification_accuracy": acc, "random_accuracy": 1.0 / cfg.eval.label_set_size,
               "hit_rate@1": hr1, f"hit_rate@{cfg.eval.k}": hrk, "n": float(len(imps)),
               "order_pair_cosine": float(a @ b)}
    return metrics, {"label_sets": {p.id: ls for p, ls in zip(imps, label_sets)},
                     "order_pair": list(ORDER_PAIR)}


def stage_eval_attack(out: Path, cfg: RunConfig, sel: SelectedModel):
    catalog = load_catalog(out)
    pool = catalog.split("test") + catalog.split("val")
    cands = gr.attack_candidates(pool, cfg.eval.attack_word, cfg.eval.n_attack)
    if not cands:
        raise HarnessError("no products eligible for the typographic attack")
    rep = gr.typographic_attack_eval(cands, cfg.eval.attack_word, sel.model)
    return ({"mean_delta": rep.mean_delta, "flip_rate": rep.flip_rate, "n": float(rep.n)},
            {"word": rep.word, "product_ids": [p.id for p in cands], "deltas": rep.deltas})


EVAL_STAGES = {
    "eval-retrieval": ("retrieval", stage_eval_retrieval),
    "eval-classify": ("classify", stage_eval_classify),
    "eval-probe": ("probe", stage_eval_probe),
    "eval-grounding": ("grounding", stage_eval_grounding),
    "eval-improbable": ("improbable", stage_eval_improbable),
    "eval-attack": ("attack", stage_eval_attack),
}


def run_eval(out: Path, cfg: RunConfig, command: str):
    section, fn = EVAL_STAGES[command]
    sel = load_selected(out, cfg)
    meta = run_metadata(out, cfg, sel)
    metrics, details = fn(out, cfg, sel)
    write_section(out, meta, section, metrics, details)


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    metrics: dict
    config_digest: str
    checkpoint_digest: str
    ledger: dict
    timestamp: str
    summary: str = field(repr=False, default="")


def _f(x, nd=3):
    return "—" if x is None else f"{x:.{nd}f}"


def make_report(out: Path, cfg: RunConfig | None = None) -> MetricsReport:
    missing = [name for name in (LEDGER_FILE, METRICS_FILE, VOCAB_FILE) if not (out / name).exists()]
    if missing:
        raise HarnessError(f"cannot build the report, missing in {out}: {', '.join(missing)}")
    ledger = json.loads((out / LEDGER_FILE).read_text())
    doc = json.loads((out / METRICS_FILE).read_text())
    absent = [s for s in SECTIONS if s not in doc.get("sections", [])]
    if absent:
        raise HarnessError(f"metrics.json lacks sections: {', '.join(absent)} (run the eval-* commands)")
    meta = doc["metadata"]
    if cfg is not None and meta["config_digest"] != cfg.digest:
        raise HarnessError("metrics.json was produced under a different config")
    if meta["ledger_sha256"] != sha256_file(out / LEDGER_FILE):
        raise HarnessError("metrics.json refers to a different ledger.json; re-run the evaluations")
    ckpt_path = out / meta["checkpoint"]
    if not ckpt_path.exists() or sha256_file(ckpt_path) != meta["checkpoint_sha256"]:
        raise HarnessError(f"checkpoint {meta['checkpoint']} is missing or does not match metrics.json")
    for name, digest in meta["dataset_digests"].items():
        if dataset_digest(out, name) != digest:
            raise HarnessError(f"dataset {name} changed since evaluation; re-run the evaluations")
    m = doc["metrics"]
    k = (cfg.eval.k if cfg else 5)
    sel = ledger["selected"]
    lines = ["# Run report", "",
             f"- seed: {meta['seed']}",
             f"- config digest: `{meta['config_digest']}`",
             f"- selected checkpoint: `{meta['checkpoint']}` (sha256 `{meta['checkpoint_sha256'][:16]}…`)",
             f"- selection rule: {sel['criterion']}", ""]

    lines += ["## Training ledger", "",
              "| learning rate | selected step | val loss | minutes | USD | kgCO2eq | diverged | val zero-shot F1 | |",
              "|---|---|---|---|---|---|---|---|---|"]
    for e in ledger["rates"]:
        lg = e["ledger"]
        vl = next((r["val_loss"] for r in lg["records"] if r["step"] == lg["selected_step"]), None)
        mark = "**selected**" if sel and e["checkpoint"] == sel["checkpoint"] else ""
        lines.append(f"| {e['learning_rate']:g} | {lg['selected_step']} | {_f(vl)} | {lg['wall_minutes']:.2f} | "
                     f"{lg['cost_usd']:.4f} | {lg['kg_co2_eq']:.5f} | {lg['diverged']} | "
                     f"{_f(e['val_zero_shot_f1'])} | {mark} |")
    cb = ledger["cost_basis"]
    lines += ["", f"Minutes, cost and emissions are configured-constant estimates, not measurements: "
                  f"minutes = steps × {cb['seconds_per_step']} s, USD = hours × {cb['usd_per_hour']}, "
                  f"kgCO2eq = hours × {cb['kg_co2_per_hour']}.", ""]

    lines += [f"## Retrieval (HITS@{k})", "", "| split | pool | trained | untrained | random |", "|---|---|---|---|---|"]
    for split in ("test", "hout_c", "hout_b"):
        p = f"retrieval/{split}"
        lines.append(f"| {split} | {int(m[p + '/pool_size'])} | {_f(m[f'{p}/hits@{k}/trained'])} | "
                     f"{_f(m[f'{p}/hits@{k}/untrained'])} | {_f(m[f'{p}/hits@{k}/random'])} |")

    lines += ["", "## Zero-shot classification (weighted macro F1, test split)", "",
              "| labels | trained | untrained | prior baseline |", "|---|---|---|---|",
              f"| sortal | {_f(m['classify/sortal_f1/trained'])} | {_f(m['classify/sortal_f1/untrained'])} | — |",
              f"| style | {_f(m['classify/style_f1/trained'])} | {_f(m['classify/style_f1/untrained'])} | "
              f"{_f(m['classify/style_f1/prior'])} |"]

    lines += ["", "Style golds are each item's first style tag. Counting a prediction as correct when it "
                  f"matches any of the item's tags gives {_f(m['classify/style_f1_any_tag/trained'])} trained vs "
                  f"{_f(m['classify/style_f1_any_tag/prior'])} prior."]

    lines += ["", "## Linear probe vs zero-shot (sortal labels)", "",
              "| dataset | zero-shot F1 | probe F1 | ΔF1 |", "|---|---|---|---|"]
    for row in doc["details"]["probe"]["rows"]:
        lines.append(f"| {row['dataset']} | {_f(row['zero_shot_f1'])} | {_f(row['probe_f1'])} | "
                     f"{row['delta_f1']:+.3f} |")

    lines += ["", "## Grounding", "",
              f"- brand-query argmax inside the brand box: {_f(m['grounding/brand_hit_rate'])} "
              f"over {int(m['grounding/brand_n'])} products "
              f"(top occluder patch merely overlapping the box: {_f(m['grounding/brand_patch_intersect_rate'])})",
              f"- sortal-query box mean IoU: {_f(m['grounding/sortal_mean_iou'])} "
              f"over {int(m['grounding/sortal_n'])} products",
              f"- maps: `maps/<product>_<query>.png` and `.json`"]

    lines += ["", "## Improbable products", "",
              f"- classification accuracy: {_f(m['improbable/classification_accuracy'])} "
              f"(random {_f(m['improbable/random_accuracy'])}, n = {int(m['improbable/n'])})",
              f"- retrieval hit rate @1: {_f(m['improbable/hit_rate@1'])}, "
              f"@{k}: {_f(m[f'improbable/hit_rate@{k}'])}"]

    lines += ["", "## Typographic attack", "",
              f"- word: `{doc['details']['attack']['word']}`, n = {int(m['attack/n'])}",
              f"- mean similarity delta: {m['attack/mean_delta']:+.4f}",
              f"- flip rate: {_f(m['attack/flip_rate'])}"]

    a, b = doc["details"]["improbable"]["order_pair"]
    lines += ["", "## Not reproduced", "",
              "- Cost and emissions above are estimates from configured constants "
              "(nominal step time × hourly price and carbon intensity), not measured values.",
              f"- Order sensitivity is out of reach: the text encoder mean-pools token embeddings, so "
              f"\"{a}\" and \"{b}\" have the same tokens and the same embedding "
              f"(cosine {m['improbable/order_pair_cosine']:.6f}). Telling which part carries which "
              f"color needs an order-aware text encoder.", ""]
    summary = "\n".join(lines)
    (out / REPORT_FILE).write_text(summary)
    return MetricsReport(m, meta["config_digest"], meta["checkpoint_sha256"], ledger, meta["timestamp"], summary)


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


COMMANDS = ("gen-data", "train", *EVAL_STAGES, "report", "all")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config (see README)")
    common.add_argument("--seed", type=int, help="override the config seed everywhere")
    common.add_argument("--out", default="run", help="output directory (default: run)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = _Parser(prog="fclip", description="Synthetic fashion contrastive-training pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    helps = {"gen-data": "render the catalog and improbable products",
             "train": "train one model per learning rate and select one",
             "report": "write report.md from ledger.json and metrics.json",
             "all": "run every stage in order"}
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps.get(name, f"{name[5:]} metrics into metrics.json"))
    return parser


def run_command(command: str, out: Path, cfg: RunConfig):
    if command == "gen-data":
        stage_gen_data(out, cfg)
    elif command == "train":
        stage_train(out, cfg)
    elif command in EVAL_STAGES:
        run_eval(out, cfg, command)
    elif command == "report":
        make_report(out, cfg)
    elif command == "all":
        stage_gen_data(out, cfg)
        stage_train(out, cfg)
        for name in EVAL_STAGES:
            run_eval(out, cfg, name)
        make_report(out, cfg)
    else:  # pragma: no cover - argparse restricts the choices
        raise UsageError(f"unknown command {command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
    except UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        cfg = resolve_config(out, args.config, args.seed, create=args.command in ("gen-data", "all"))
        run_command(args.command, out, cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (HarnessError, enc.CheckpointError, sc.SpecError, sc.CatalogConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0
