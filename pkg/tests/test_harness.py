import json
import shutil

import pytest

from fclip import harness as hs
from fclip import synthcat as sc

TINY = {
    "seed": 4,
    "catalog": {"n_train": 96, "n_val": 24, "n_test": 24, "n_hout_c": 10, "n_hout_b": 10},
    "contrastive": {"batch_size": 16, "learning_rates": [1e-3], "epochs": 1},
    "eval": {"n_grounding": 4, "n_improbables": 12, "n_attack": 4,
             "occluder": {"patch_size": 16, "stride": 16}},
}

ARTIFACTS = ("config.json", "catalog.jsonl", "improbable.jsonl", "ledger.json", "metrics.json", "report.md",
             "vocab.txt")


def run(*args):
    return hs.main([str(a) for a in args])


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture(scope="module")
def tiny_run(tiny_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("all", "--config", tiny_cfg, "--out", out) == 0
    return out


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_all_writes_every_artifact(tiny_run):
    for name in ARTIFACTS:
        assert (tiny_run / name).exists(), name
    doc = json.loads((tiny_run / "metrics.json").read_text())
    assert doc["sections"] == sorted(hs.SECTIONS)
    assert list(tiny_run.glob("ckpt_*.bin")) and list((tiny_run / "maps").glob("*.png"))


def test_report_sections_and_non_reproduction(tiny_run):
    text = (tiny_run / "report.md").read_text()
    for heading in ("Training ledger", "Retrieval", "Zero-shot", "Linear probe", "Grounding", "Improbable",
                    "Typographic attack", "Not reproduced"):
        assert heading in text
    assert "configured constants" in text and "estimates" in text
    assert '"red shoe with black high heels"' in text and "mean-pools" in text


def test_rerun_is_byte_identical(tiny_run, tiny_cfg, tmp_path):
    again = tmp_path / "again"
    assert run("all", "--config", tiny_cfg, "--out", again) == 0
    assert tree_bytes(again) == tree_bytes(tiny_run)


def test_stagewise_equals_all(tiny_run, tiny_cfg, tmp_path):
    out = tmp_path / "staged"
    for cmd in hs.COMMANDS[:-1]:
        assert run(cmd, "--out", out, *(("--config", tiny_cfg) if cmd == "gen-data" else ())) == 0, cmd
    assert tree_bytes(out) == tree_bytes(tiny_run)


def test_seed_override_changes_everything(tiny_cfg, tmp_path):
    assert run("gen-data", "--config", tiny_cfg, "--seed", 9, "--out", tmp_path) == 0
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["seed"] == cfg["catalog"]["seed"] == cfg["contrastive"]["seed"] == 9


def test_usage_errors(capsys, tmp_path):
    assert run() == 1
    assert run("frobnicate") == 1
    assert run("all", "--config", tmp_path / "nope.json") == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("gen-data", "--config", bad, "--out", tmp_path / "o") == 1
    bad.write_text(json.dumps({"colour": 1}))
    assert run("gen-data", "--config", bad, "--out", tmp_path / "o") == 1
    assert "unknown config keys" in capsys.readouterr().err


def test_missing_artifacts_exit_2(tmp_path, tiny_cfg, capsys):
    assert run("train", "--out", tmp_path / "empty") == 2
    assert "gen-data" in capsys.readouterr().err
    assert run("gen-data", "--config", tiny_cfg, "--out", tmp_path) == 0
    assert run("eval-retrieval", "--out", tmp_path) == 2
    assert run("report", "--out", tmp_path) == 2


def test_config_mismatch_exit_2(tiny_run, tmp_path):
    other = tmp_path / "other.json"
    other.write_text(json.dumps({**TINY, "seed": 5}))
    assert run("report", "--config", other, "--out", tiny_run) == 2


def test_tampered_checkpoint_detected(tiny_run, tmp_path):
    out = tmp_path / "copy"
    shutil.copytree(tiny_run, out)
    ckpt = next(out.glob("ckpt_*.bin"))
    data = bytearray(ckpt.read_bytes())
    data[len(data) // 2] ^= 0xFF
    ckpt.write_bytes(bytes(data))
    assert run("eval-attack", "--out", out) == 2
    assert run("report", "--out", out) == 2


def test_changed_catalog_detected(tiny_run, tmp_path, capsys):
    out = tmp_path / "copy"
    shutil.copytree(tiny_run, out)
    img = next((out / "images").glob("*.png"))
    img.write_bytes(next(p for p in sorted((out / "images").glob("*.png")) if p != img).read_bytes())
    assert run("eval-classify", "--out", out) == 2
    assert "catalog changed" in capsys.readouterr().err


def test_catalog_field_names(tiny_run):
    row = json.loads((tiny_run / "catalog.jsonl").read_text().splitlines()[0])
    assert set(row) == {"id", "caption", "highlights", "tree", "brand", "styles", "split", "image_path",
                        "gt_boxes"}
    assert len(sc.read_catalog(tiny_run).products) == 96 + 24 + 24 + 10 + 10


def test_config_round_trip():
    cfg = hs.RunConfig.from_dict(TINY)
    assert hs.RunConfig.from_dict(json.loads(hs.canonical_json(cfg.to_dict()))) == cfg
    assert cfg.with_seed(4).digest == cfg.digest
    assert cfg.with_seed(5).digest != cfg.digest


def test_select_rate_prefers_f1_then_loss():
    def entry(f1, losses, ckpt="c"):
        return {"checkpoint": ckpt, "val_zero_shot_f1": f1,
                "ledger": {"records": [{"val_loss": v} for v in losses]}}
    assert hs.select_rate([entry(0.5, [1.0]), entry(0.7, [2.0]), entry(0.7, [1.5])]) == 2
    assert hs.select_rate([entry(None, [], None), entry(0.1, [3.0])]) == 1
    assert hs.select_rate([entry(None, [], None)]) is None


def test_top_level_seed_propagates_unless_overridden():
    cfg = hs.RunConfig.from_dict({"seed": 4, "catalog": {"seed": 7}})
    assert (cfg.catalog.seed, cfg.contrastive.seed, cfg.eval.probe.seed) == (7, 4, 4)
    assert hs.RunConfig.from_dict({"seed": 4}) == hs.RunConfig().with_seed(4)
