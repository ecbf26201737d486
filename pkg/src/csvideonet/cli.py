"""Command line: ingest, pretrain, train, eval, bench, ablate.

Every command writes into ``--out`` (or the config's ``out``) the resolved
config, a manifest of produced files and a version stamp. A failing command
leaves a ``FAILED`` marker. Exit status 2 means the config or inputs did not
validate, 1 means a runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .evaluation import MetricsReport, evaluate_model, plot_psnr_vs_snr, runtime_bench
from .ingest import IngestError, ingest_corpus, read_dataset, stack_gops, write_dataset
from .model import ModelError
from .sensing import SensingMatrixSet
from .training import (
    CheckpointError,
    key_pairs,
    load_checkpoint,
    make_sequence_set,
    pretrain_key_cnn,
    save_checkpoint,
    train_full,
)

log = logging.getLogger("csvideonet")

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2
_VALIDATION_ERRORS = (ConfigError, IngestError, CheckpointError, ModelError, FileNotFoundError)


def set_fixed_execution_mode(threads: int | None = None) -> None:
    """Deterministic kernels; pin the thread count when given."""
    torch.use_deterministic_algorithms(True)
    if threads:
        torch.set_num_threads(threads)


class RunDir:
    def __init__(self, cfg: RunConfig, command: str):
        self.path = Path(cfg.out)
        self.cfg = cfg
        self.command = command
        self.files: list[Path] = []

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / "FAILED").unlink(missing_ok=True)
        return self

    def add(self, p) -> Path:
        self.files.append(Path(p))
        return Path(p)

    def __exit__(self, exc_type, exc, tb):
        if exc is not None:
            (self.path / "FAILED").write_text(
                f"{self.command} failed\n" + "".join(traceback.format_exception(exc_type, exc, tb))
            )
            return False
        (self.path / "config.json").write_text(json.dumps(self.cfg.resolved(), indent=2, sort_keys=True))
        (self.path / "VERSION").write_text(__version__ + "\n")
        entries = []
        for f in sorted(set(self.files)):
            if f.is_file():
                entries.append({"file": str(f.relative_to(self.path)), "sha256": _sha(f)})
            elif f.is_dir():
                for g in sorted(f.rglob("*")):
                    if g.is_file():
                        entries.append({"file": str(g.relative_to(self.path)), "sha256": _sha(g)})
        manifest = {"command": self.command, "version": __version__, "files": entries}
        (self.path / "manifest.json").write_text(json.dumps(manifest, indent=2))
        return False


def _sha(p: Path) -> str:
    return hashlib.sha256(p.read_bytes()).hexdigest()


def _require(path, what):
    if not path:
        raise ConfigError(f"{what} is not set")
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} {path} does not exist")
    return Path(path)


def _mats(cfg: RunConfig) -> SensingMatrixSet:
    return SensingMatrixSet.generate(
        cfg.sensing.m_key, cfg.sensing.m_nonkey, cfg.ingest.block_size**2, cfg.seed_for(cfg.sensing.seed)
    )


def _train_set(cfg: RunConfig):
    gops = read_dataset(_require(cfg.data.train, "data.train"))
    return make_sequence_set(stack_gops(gops), _mats(cfg))


# -- commands -----------------------------------------------------------------


def cmd_ingest(cfg: RunConfig) -> Path:
    ing = cfg.ingest
    with RunDir(cfg, "ingest") as run:
        inputs = [Path(p) for p in ing.inputs]
        if ing.synthetic_clips:
            from .synthetic import synthetic_corpus

            inputs = synthetic_corpus(run.path / "clips", ing.synthetic_clips, ing.synthetic_frames, seed=cfg.seed)
        if not inputs:
            raise ConfigError("ingest.inputs is empty")
        for p in inputs:
            _require(p, "input clip")
        gops, clips = ingest_corpus(inputs, tuple(ing.crop), ing.block_size, ing.T, ing.workers)
        if ing.holdout >= len(gops) and ing.holdout:
            raise ConfigError(f"holdout {ing.holdout} leaves no training GOPs out of {len(gops)}")
        cut = len(gops) - ing.holdout
        write_dataset(gops[:cut], run.path / "train", clips)
        run.add(run.path / "train")
        if ing.holdout:
            write_dataset(gops[cut:], run.path / "test", clips)
            run.add(run.path / "test")
    return run.path


def cmd_pretrain(cfg: RunConfig) -> Path:
    with RunDir(cfg, "pretrain") as run:
        data = _train_set(cfg)
        tc = cfg.train_config("pretrain")
        res = pretrain_key_cnn(*key_pairs(data), tc, cfg.model_config(), cfg.seed, run.add(run.path / "log.jsonl"))
        ck = run.add(run.path / "key_cnn.ckpt")
        save_checkpoint(res.key_cnn, ck, cfg.model_config(), res.opt_state, _mats(cfg).meta(), tc)
    return ck


def _train_arm(cfg: RunConfig, run: RunDir, mode: str, name: str) -> Path:
    data = _train_set(cfg)
    pretrained = None
    if cfg.train.pretrained:
        pretrained = load_checkpoint(_require(cfg.train.pretrained, "train.pretrained"), cfg.model_config()).module
    tc = cfg.train_config("full")
    res = train_full(data, tc, cfg.model_config(), pretrained, cfg.seed, mode, run.add(run.path / f"{name}.log.jsonl"))
    ck = run.add(run.path / f"{name}.ckpt")
    save_checkpoint(res.net, ck, cfg.model_config(), res.opt_state, _mats(cfg).meta(), tc, {"mode": mode})
    return ck


def cmd_train(cfg: RunConfig) -> Path:
    with RunDir(cfg, "train") as run:
        ck = _train_arm(cfg, run, cfg.train.mode, "decoder")
    return ck


def _load_decoder(path, cfg: RunConfig | None = None):
    ck = load_checkpoint(_require(path, "checkpoint"))
    if ck.kind != "decoder":
        raise CheckpointError(f"{path} is not a decoder checkpoint")
    if cfg is not None and ck.model_config.block_size != cfg.ingest.block_size:
        raise CheckpointError(f"{path} has block size {ck.model_config.block_size}, config wants {cfg.ingest.block_size}")
    if not ck.sensing:
        raise CheckpointError(f"{path} carries no sensing metadata")
    return ck.module, SensingMatrixSet.from_meta(ck.sensing)


def _checkpoint_map(cfg: RunConfig) -> dict:
    mapping = {float(k): v for k, v in cfg.eval.checkpoints.items()}
    labels = [float(c) for c in cfg.eval.cr_labels]
    missing = [c for c in labels if c not in mapping]
    if missing:
        raise ConfigError(f"eval.checkpoints lacks CR labels {missing}")
    return {c: _load_decoder(mapping[c], cfg) for c in labels}


def cmd_eval(cfg: RunConfig) -> MetricsReport:
    with RunDir(cfg, "eval") as run:
        models = _checkpoint_map(cfg)
        gops = read_dataset(_require(cfg.data.test, "data.test"))
        labels = [float(c) for c in cfg.eval.cr_labels]
        report = evaluate_model(
            models, gops, labels, cfg.eval.snr_levels, cfg.seed_for(cfg.eval.seed), cfg.sensing.noise_mode
        )
        report.context = {
            "reference_psnr": {"25": 26.87, "50": 25.09, "100": 24.23},
            "note": "reference values come from full-scale UCF-101 training",
        }
        for f in report.write(run.path):
            run.add(f)
        run.add(plot_psnr_vs_snr(report, run.path / "psnr_vs_snr.png"))
    return report


def cmd_bench(cfg: RunConfig, checkpoint=None) -> dict:
    with RunDir(cfg, "bench") as run:
        path = checkpoint or next(iter(cfg.eval.checkpoints.values()), None)
        net, _ = _load_decoder(path, cfg)
        stats = runtime_bench(net, cfg.eval.bench_repeats)
        out = run.add(run.path / "runtime.json")
        out.write_text(json.dumps(stats, indent=2, sort_keys=True))
    return stats


def cmd_ablate(cfg: RunConfig, full_ckpt=None, cnn_ckpt=None) -> dict:
    """Paired CSVideoNet vs CNN-only comparison; missing arms are trained with equal budgets."""
    with RunDir(cfg, "ablate") as run:
        if full_ckpt is None:
            full_ckpt = _train_arm(cfg, run, "full", "csvideonet")
        if cnn_ckpt is None:
            cnn_ckpt = _train_arm(cfg, run, "cnn_only", "cnn_only")
        gops = read_dataset(_require(cfg.data.test, "data.test"))
        label = float(cfg.eval.cr_labels[0]) if cfg.eval.cr_labels else 0.0
        arms = {}
        for arm, path in (("full", full_ckpt), ("cnn_only", cnn_ckpt)):
            model = _load_decoder(path, cfg)
            arms[arm] = evaluate_model({label: model}, gops, [label], ["clean"], cfg.seed_for(cfg.eval.seed), arm=arm)
        result = {
            "cr": label,
            "csvideonet_psnr": arms["full"].cells[0].psnr,
            "cnn_only_psnr": arms["cnn_only"].cells[0].psnr,
            "csvideonet_ssim": arms["full"].cells[0].ssim,
            "cnn_only_ssim": arms["cnn_only"].cells[0].ssim,
            "n": arms["full"].cells[0].n,
        }
        result["psnr_gain"] = result["csvideonet_psnr"] - result["cnn_only_psnr"]
        out = run.add(run.path / "ablation.json")
        out.write_text(json.dumps(result, indent=2, sort_keys=True))
    return result


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON or YAML run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path)
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    common.add_argument("--threads", type=int, help="pin torch threads (fixed execution mode)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="csvideonet", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="build block/GOP datasets")
    sub.add_parser("pretrain", parents=[common], help="pretrain the key CNN")
    p = sub.add_parser("train", parents=[common], help="train the full decoder")
    p.add_argument("--pretrained", type=Path, help="key-CNN checkpoint")
    p.add_argument("--no-pretrain", action="store_true", help="train from scratch")
    p = sub.add_parser("eval", parents=[common], help="metric sweep over CR labels and SNRs")
    p.add_argument("--checkpoint", action="append", default=[], metavar="CR=PATH")
    p = sub.add_parser("bench", parents=[common], help="runtime per 160x160 frame")
    p.add_argument("--checkpoint", type=Path)
    p = sub.add_parser("ablate", parents=[common], help="CSVideoNet vs CNN-only")
    p.add_argument("--full", type=Path, help="full-decoder checkpoint")
    p.add_argument("--cnn-only", type=Path, help="CNN-only checkpoint")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.override, args.seed, args.out)
        if args.command == "train":
            if args.pretrained:
                cfg.train.pretrained = str(args.pretrained)
            if args.no_pretrain:
                cfg.train.pretrained = None
        if args.command == "eval":
            for item in args.checkpoint:
                if "=" not in item:
                    raise ConfigError(f"--checkpoint expects CR=PATH, got {item!r}")
                k, v = item.split("=", 1)
                cfg.eval.checkpoints[k] = v
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    set_fixed_execution_mode(args.threads)
    try:
        if args.command == "ingest":
            print(cmd_ingest(cfg))
        elif args.command == "pretrain":
            print(cmd_pretrain(cfg))
        elif args.command == "train":
            print(cmd_train(cfg))
        elif args.command == "eval":
            print(cmd_eval(cfg).to_table(), end="")
        elif args.command == "bench":
            print(json.dumps(cmd_bench(cfg, args.checkpoint), indent=2))
        elif args.command == "ablate":
            print(json.dumps(cmd_ablate(cfg, args.full, args.cnn_only), indent=2))
    except _VALIDATION_ERRORS as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
