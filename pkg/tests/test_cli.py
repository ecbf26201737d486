import json

import pytest

from csvideonet.cli import EXIT_OK, EXIT_VALIDATION, cmd_ablate, cmd_eval, cmd_ingest, cmd_pretrain, cmd_train, main
from csvideonet.config import ConfigError, RunConfig, load_config

TINY = {
    "seed": 3,
    "ingest": {"crop": [16, 16], "block_size": 8, "T": 3, "holdout": 2, "synthetic_clips": 3, "synthetic_frames": 7},
    "sensing": {"m_key": 16, "m_nonkey": 4},
    "model": {"key_channels": [8, 4, 1], "nonkey_channels": [4, 1], "hidden_size": 16},
    "pretrain": {"steps": 4, "batch_size": 4},
    "train": {"steps": 4, "batch_size": 4, "lr": 1e-3},
    "eval": {"cr_labels": [16], "snr_levels": ["clean", 20]},
}


def _cfg(tmp_path, name, **extra):
    d = json.loads(json.dumps(TINY))
    d["out"] = str(tmp_path / name)
    d["data"] = {"train": str(tmp_path / "ing" / "train"), "test": str(tmp_path / "ing" / "test")}
    for k, v in extra.items():
        d.setdefault(k, {}).update(v)
    return RunConfig.from_dict(d)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cmd_ingest(_cfg(tmp, "ing"))
    key = cmd_pretrain(_cfg(tmp, "pre"))
    dec = cmd_train(_cfg(tmp, "train", train={"pretrained": str(key)}))
    return tmp, key, dec


def test_config_defaults_and_unknown_keys():
    cfg = RunConfig()
    assert cfg.pretrain.batch_size == 100 and cfg.pretrain.lr == 1e-3
    assert cfg.train.batch_size == 20 and cfg.train.lr == 1e-4 and cfg.train.clip_norm == 5.0
    assert cfg.model_config().key_channels == (128, 64, 32, 32, 16, 16, 1)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"modle": {}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"learning_rate": 1}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"beta1": 1.5}})


def test_config_precedence(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 1, "train": {"lr": 0.01, "steps": 7}}))
    cfg = load_config(p, ["train.lr=0.5", "eval.snr_levels=[\"clean\"]"], seed=9)
    assert cfg.train.lr == 0.5 and cfg.train.steps == 7 and cfg.seed == 9
    assert cfg.eval.snr_levels == ["clean"]
    assert cfg.resolved()["train"]["seed"] == 9
    y = tmp_path / "c.yaml"
    y.write_text("train:\n  steps: 3\n")
    assert load_config(y).train.steps == 3


def test_ingest_outputs(pipeline):
    tmp, _, _ = pipeline
    ing = tmp / "ing"
    m = json.loads((ing / "train" / "manifest.json").read_text())
    assert m["count"] == 4 and m["blockSize"] == 8 and m["T"] == 3  # 3 clips x 2 GOPs, 2 held out
    assert json.loads((ing / "test" / "manifest.json").read_text())["count"] == 2
    assert len(m["clips"]) == 3 and all(len(c["sha256"]) == 64 for c in m["clips"])
    for name in ("config.json", "manifest.json", "VERSION"):
        assert (ing / name).exists()
    assert not (ing / "FAILED").exists()


def test_pretrain_rerun_bit_exact(pipeline, tmp_path):
    tmp, key, _ = pipeline
    again = cmd_pretrain(_cfg(tmp, "pre2"))
    assert again.read_bytes() == key.read_bytes()


def test_eval_cells_and_files(pipeline):
    tmp, _, dec = pipeline
    cfg = _cfg(tmp, "ev", eval={"checkpoints": {"16": str(dec)}, "snr_levels": ["clean"]})
    rep = cmd_eval(cfg)
    assert len(rep.cells) == 1
    for f in ("metrics.json", "metrics.jsonl", "metrics.csv", "psnr_vs_snr.png", "manifest.json"):
        assert (tmp / "ev" / f).exists()
    files = {e["file"] for e in json.loads((tmp / "ev" / "manifest.json").read_text())["files"]}
    assert "metrics.csv" in files
    full = cmd_eval(_cfg(tmp, "ev2", eval={"checkpoints": {"16": str(dec)}}))
    assert len(full.cells) == 2


def test_ablate_reports_both_arms(pipeline):
    tmp, key, _ = pipeline
    res = cmd_ablate(_cfg(tmp, "abl", train={"pretrained": str(key)}))
    assert {"csvideonet_psnr", "cnn_only_psnr", "psnr_gain"} <= set(res)
    assert res["psnr_gain"] == pytest.approx(res["csvideonet_psnr"] - res["cnn_only_psnr"])
    assert (tmp / "abl" / "csvideonet.ckpt").exists() and (tmp / "abl" / "cnn_only.ckpt").exists()


def test_main_bench_and_exit_codes(pipeline, tmp_path, capsys):
    tmp, _, dec = pipeline
    cfg_path = tmp_path / "c.json"
    d = dict(TINY, out=str(tmp_path / "bench"))
    cfg_path.write_text(json.dumps(d))
    assert main(["bench", "--config", str(cfg_path), "--checkpoint", str(dec), "--override", "eval.bench_repeats=10"]) == EXIT_OK
    stats = json.loads((tmp_path / "bench" / "runtime.json").read_text())
    assert stats["min_ms"] <= stats["mean_ms"] <= stats["max_ms"]
    assert main(["train", "--config", str(cfg_path), "--override", "nope.x=1"]) == EXIT_VALIDATION
    bad = tmp_path / "missing"
    assert main(["train", "--config", str(cfg_path), "--out", str(bad), "--override", f"data.train={tmp_path}/none"]) == EXIT_VALIDATION
    assert (bad / "FAILED").exists()


def test_eval_missing_checkpoint_is_validation_error(pipeline, tmp_path):
    tmp, _, _ = pipeline
    cfg_path = tmp_path / "c.json"
    d = dict(TINY, out=str(tmp_path / "e"), data={"test": str(tmp / "ing" / "test")})
    cfg_path.write_text(json.dumps(d))
    assert main(["eval", "--config", str(cfg_path)]) == EXIT_VALIDATION
    assert (tmp_path / "e" / "FAILED").exists()


def test_commands_do_not_mutate_inputs(pipeline):
    tmp, key, _ = pipeline
    before = (tmp / "ing" / "train" / "blocks.f32").read_bytes()
    cmd_train(_cfg(tmp, "train2", train={"pretrained": str(key)}))
    assert (tmp / "ing" / "train" / "blocks.f32").read_bytes() == before
