"""Command-line entry point: synth, features, train, eval, profile."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from ..diffcore import Rng
from ..energy import profile
from ..network import build_model, count_parameters, load_checkpoint, save_checkpoint
from ..network.checkpoint import CheckpointError, atomic_write
from ..training import FeatureSet, evaluate, train
from .archive import FeatureArchive, build_features, read_archive, write_archive
from .config import RunConfig
from .eegb import read_dataset, write_eegb
from .synth import SynthConfig, synth_dataset

DEFAULT_SEED = 200
DTYPES = {"float64": torch.float64, "float32": torch.float32}


def _overrides(items: list[str] | None) -> list[tuple[str, str]]:
    out = []
    for item in items or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out.append((k.strip(), v.strip()))
    return out


def load_config(args) -> RunConfig:
    pairs = _overrides(getattr(args, "set", None))
    if args.seed is not None:
        pairs.append(("seed", str(args.seed)))
    return RunConfig.load(args.config, pairs)


def cmd_synth(args) -> int:
    seed = DEFAULT_SEED if args.seed is None else args.seed
    cfg = SynthConfig(args.subjects, args.trials, args.seconds, args.sample_rate, args.difficulty, seed)
    out = Path(args.out)
    for rec in synth_dataset(cfg):
        write_eegb(out / f"subject{rec.subject:02d}.eegb", rec)
    print(f"wrote {cfg.subjects} recordings to {out}")
    return 0


def features_for(cfg: RunConfig) -> FeatureArchive:
    d = cfg.data
    if d.features and Path(d.features).exists():
        return read_archive(d.features)
    if not d.data_dir:
        raise SystemExit("config needs data_dir (EEGB directory) or an existing features archive")
    archive = build_features(read_dataset(d.data_dir), d.split_mode, d.window_seconds, d.overlap,
                             cfg.train.seed, d.holdout_subject, d.purge_boundary, cfg.model.map_size)
    if d.features:
        write_archive(d.features, archive)
    return archive


def cmd_features(args) -> int:
    cfg = load_config(args)
    d = cfg.data
    if not d.data_dir or not d.features:
        raise SystemExit("features needs data_dir and features in the config")
    archive = build_features(read_dataset(d.data_dir), d.split_mode, d.window_seconds, d.overlap,
                             cfg.train.seed, d.holdout_subject, d.purge_boundary, cfg.model.map_size)
    write_archive(d.features, archive)
    counts = {s: int(archive.mask(s).sum()) for s in ("train", "val", "test")}
    print(f"wrote {len(archive)} windows to {d.features} {counts}")
    return 0


def _check_shapes(cfg: RunConfig, archive: FeatureArchive) -> None:
    _, c, t = archive.e_s.shape
    m = cfg.model
    if (c, t) != (m.channels, m.window):
        raise SystemExit(f"archive windows are {c}x{t}, model config expects {m.channels}x{m.window}")


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.data.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _log(msg: str) -> None:
    print(msg, flush=True)


def run_training(cfg: RunConfig, archive: FeatureArchive, log=_log):
    _check_shapes(cfg, archive)
    torch.manual_seed(cfg.train.seed)
    model = build_model(cfg.model, cfg.train.seed, DTYPES[cfg.data.precision])
    tr, va = archive.feature_set("train"), archive.feature_set("val")

    def report(rec):
        log(f"epoch {rec.epoch} lr {rec.lr:.3g} train_loss {rec.train_loss:.4f} "
            f"train_acc {rec.train_acc:.3f} val_loss {rec.val_loss:.4f} val_acc {rec.val_acc:.3f}")

    history = train(model, tr, va, cfg.train, on_epoch=report)
    test = archive.feature_set("test")
    if len(test):
        history.test = evaluate(model, test, cfg.train.eval_batch_size)
    return model, history


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = _out(cfg)
    model, history = run_training(cfg, features_for(cfg))
    save_checkpoint(model, out / "checkpoint.s2mf")
    atomic_write(out / "history.jsonl", history.to_text().encode())
    atomic_write(out / "run.cfg", cfg.to_text().encode())
    if history.test is not None:
        print(f"test accuracy {history.test.accuracy:.4f} sd {history.test.sd:.4f}")
    return 0


def _load_model(cfg: RunConfig, path: str | None):
    ckpt = Path(path) if path else Path(cfg.data.out_dir) / "checkpoint.s2mf"
    model = load_checkpoint(ckpt)
    if model.cfg != cfg.model:
        raise CheckpointError(f"checkpoint {ckpt} was built with a different model config")
    return model.to(DTYPES[cfg.data.precision])


def cmd_eval(args) -> int:
    cfg = load_config(args)
    archive = features_for(cfg)
    _check_shapes(cfg, archive)
    if args.untrained:
        model = build_model(cfg.model, cfg.train.seed, DTYPES[cfg.data.precision])
    else:
        model = _load_model(cfg, args.checkpoint)
    res = evaluate(model, archive.feature_set(args.split), cfg.train.eval_batch_size)
    record = {"split": args.split, "accuracy": res.accuracy, "sd": res.sd,
              "window_accuracy": res.window_accuracy, "loss": res.loss,
              "per_subject": {str(k): v for k, v in res.per_subject.items()}}
    atomic_write(_out(cfg) / f"eval_{args.split}.jsonl", (json.dumps(record) + "\n").encode())
    print(json.dumps(record))
    return 0


def profile_batch(cfg: RunConfig, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    """First windows of the test split if an archive is available, else seeded noise."""
    m, n = cfg.model, cfg.data.profile_batch
    d = cfg.data
    if (d.features and Path(d.features).exists()) or d.data_dir:
        data: FeatureSet = features_for(cfg).feature_set("test")
        idx = np.arange(min(n, len(data)))
        e_s, e_f, _ = data.batch(idx, dtype)
        return e_s, e_f
    rng = Rng(cfg.train.seed).spawn(7)
    e_s = torch.from_numpy(rng.normal((n, m.channels, m.window))).to(dtype)
    e_f = torch.from_numpy(rng.normal((n, m.bands, m.map_size, m.map_size))).to(dtype)
    return e_s, e_f


def cmd_profile(args) -> int:
    cfg = load_config(args)
    dtype = DTYPES[cfg.data.precision]
    if args.checkpoint or (Path(cfg.data.out_dir) / "checkpoint.s2mf").exists():
        model = _load_model(cfg, args.checkpoint)
    else:
        model = build_model(cfg.model, cfg.train.seed, dtype)
    report = profile(model, profile_batch(cfg, dtype), cfg.data.e_ac_pj)
    text = f"params {count_parameters(model)}\n" + report.to_text()
    atomic_write(_out(cfg) / "energy.txt", text.encode())
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="s2mformer", description=__doc__)
    p.add_argument("--seed", type=int, default=None, help=f"global seed (default {DEFAULT_SEED})")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic EEGB recordings")
    s.add_argument("--out", required=True)
    s.add_argument("--subjects", type=int, default=4)
    s.add_argument("--trials", type=int, default=6)
    s.add_argument("--seconds", type=float, default=60.0)
    s.add_argument("--sample-rate", type=float, default=128.0)
    s.add_argument("--difficulty", type=float, default=1.0)
    s.set_defaults(func=cmd_synth)

    for name, func, helptext in (("features", cmd_features, "extract CSP / DE features"),
                                 ("train", cmd_train, "train a model"),
                                 ("eval", cmd_eval, "evaluate a checkpoint"),
                                 ("profile", cmd_profile, "theoretical energy report")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--config")
        c.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        if name in ("eval", "profile"):
            c.add_argument("--checkpoint")
        if name == "eval":
            c.add_argument("--split", default="test", choices=("train", "val", "test"))
            c.add_argument("--untrained", action="store_true", help="evaluate a freshly initialised model")
        c.set_defaults(func=func)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
