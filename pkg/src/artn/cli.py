"""``artn`` command line: train, gradcheck, sweep and gendata.

Exit codes: 0 success, 1 run failure (divergence, gradient check failure,
every sweep cell failed), 2 usage, config or input errors.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import config as cfgmod
from . import gradcheck
from .config import ConfigError
from .data import (DomainDataset, FormatError, ShiftSpec, add_gaussian_noise, make_blobs_pair,
                   make_two_moons_pair, read_idx, read_sparse_bow, write_idx, write_sparse_bow)
from .harness import (DivergenceError, Task, TrainConfig, grad_norm_summary, long_format,
                      metrics_csv_text, run_lambda_sweep, run_noise_sweep,
                      run_regularizer_ablation, train, write_table_csv)
from .model import build_model
from .nn import parameter_arrays, save_checkpoint

log = logging.getLogger("artn")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
SWEEP_KINDS = ("noise", "lambda", "ablation")


# ---------------------------------------------------------------- helpers


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _describe(ds: DomainDataset) -> dict:
    return {"name": ds.name, "rows": len(ds), "dim": ds.dim, "sha256": ds.fingerprint()}


def _require(cfg: dict, *keys: str) -> None:
    for k in keys:
        if not cfg[k]:
            raise ConfigError(f"{k} is required when data.kind = {cfg['data.kind']!r}")


def absolutize_paths(cfg: dict) -> dict:
    """Data paths become absolute so a manifest works from any directory."""
    out = dict(cfg)
    for k in ("data.source_images", "data.source_labels", "data.target_images",
              "data.target_labels", "data.source_path", "data.target_path"):
        if out[k]:
            out[k] = str(Path(out[k]).resolve())
    return out


def shift_from_config(cfg: dict) -> ShiftSpec:
    return ShiftSpec(rotation=cfg["shift.rotation"], translation=tuple(cfg["shift.translation"]),
                     scale=cfg["shift.scale"], noise_std=cfg["shift.noise_std"], seed=cfg["shift.seed"])


def synthetic_pair(cfg: dict) -> tuple:
    kind = cfg["data.kind"]
    if kind == "blobs":
        return make_blobs_pair(cfg["data.classes"], cfg["data.n_per_class"], cfg["data.dim"],
                               shift_from_config(cfg), cfg["data.seed"],
                               center_spread=cfg["data.center_spread"],
                               cluster_std=cfg["data.cluster_std"])
    if kind == "moons":
        if cfg["shift.translation"] or cfg["shift.scale"] != 1.0:
            raise ConfigError("two-moons targets support shift.rotation and shift.noise_std only")
        source, target = make_two_moons_pair(cfg["data.n_samples"], cfg["data.moons_noise"],
                                             cfg["shift.rotation"], cfg["data.seed"])
        target = replace(add_gaussian_noise(target, cfg["shift.noise_std"], cfg["shift.seed"]),
                         name=target.name)
        return source, target
    raise ConfigError(f"data.kind = {kind!r} is not a synthetic generator")


def load_datasets(cfg: dict) -> tuple:
    kind = cfg["data.kind"]
    if kind in ("blobs", "moons"):
        return synthetic_pair(cfg)
    if kind == "idx":
        _require(cfg, "data.source_images", "data.source_labels", "data.target_images")
        source = read_idx(cfg["data.source_images"], cfg["data.source_labels"], 0, "source")
        target = read_idx(cfg["data.target_images"], cfg["data.target_labels"] or None, 1, "target")
    else:
        _require(cfg, "data.source_path", "data.target_path", "data.bow_dim")
        source = read_sparse_bow(cfg["data.source_path"], cfg["data.bow_dim"], 0, "source")
        target = read_sparse_bow(cfg["data.target_path"], cfg["data.bow_dim"], 1, "target")
    if source.dim != target.dim:
        raise FormatError(f"source width {source.dim} differs from target width {target.dim}")
    return source, replace(target, labels_hidden=True)


def n_classes_of(source: DomainDataset, target: DomainDataset) -> int:
    return max(source.n_classes, target.n_classes, 2)


def model_factory(cfg: dict, in_width: int, n_classes: int):
    def make(seed: int):
        return build_model(in_width, cfg["model.feature_widths"], n_classes,
                           classifier_hidden=cfg["model.classifier_hidden"],
                           domain_hidden=cfg["model.domain_hidden"],
                           batch_norm=cfg["model.batch_norm"],
                           residual_stride=cfg["model.residual_stride"], seed=seed,
                           transform_activation=cfg["model.transform_activation"])
    return make


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(epochs=cfg["train.epochs"], batch_size=cfg["train.batch_size"],
                       learning_rate=cfg["train.learning_rate"], momentum=cfg["train.momentum"],
                       lam=cfg["train.lambda"], beta=cfg["train.beta"],
                       grl_schedule=cfg["train.grl_schedule"], seed=cfg["train.seed"],
                       eval_every=cfg["train.eval_every"], method=cfg["train.method"])


def _manifest(command: str, cfg: dict, source, target, artifacts: dict, started: float,
              extra: Optional[dict] = None) -> bytes:
    doc = {
        "tool": "artn",
        "version": __version__,
        "command": command,
        "config": cfg,
        "datasets": {"source": _describe(source), "target": _describe(target)},
        "artifacts": artifacts,
        **(extra or {}),
        "duration_seconds": round(time.perf_counter() - started, 3),
    }
    return (json.dumps(doc, indent=2) + "\n").encode("utf-8")


def _resolve(args) -> dict:
    return absolutize_paths(cfgmod.load(args.config, args.overrides, args.seed))


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    started = time.perf_counter()
    cfg = _resolve(args)
    source, target = load_datasets(cfg)
    tc = train_config(cfg)
    model = model_factory(cfg, source.dim, n_classes_of(source, target))(tc.seed)
    out = Path(args.out)

    def progress(rec):
        if rec.target_acc is not None or rec.source_acc is not None:
            log.info("epoch %d step %d total %.4f source_acc %s target_acc %s", rec.epoch, rec.step,
                     rec.total, rec.source_acc, rec.target_acc)

    result = train(model, tc, source, target, on_record=progress)
    csv_bytes = metrics_csv_text(result.records).encode("utf-8")
    arrays = {}
    for prefix, ps in (("g.", model.g), ("t.", model.t), ("c.", model.c), ("d.", model.d)):
        arrays.update(parameter_arrays(ps, prefix))
    metrics_path, ckpt_path = out / "metrics.csv", out / "checkpoint.bin"
    _atomic_write(metrics_path, csv_bytes)
    out.mkdir(parents=True, exist_ok=True)
    tmp_ckpt = out / ".checkpoint.bin.tmp"
    save_checkpoint(tmp_ckpt, arrays)
    os.replace(tmp_ckpt, ckpt_path)
    last = result.records[-1]
    extra = {"metrics_sha256": _sha256(csv_bytes), "steps": len(result.records),
             "final": {"source_acc": last.source_acc, "target_acc": last.target_acc},
             "grad_norm": asdict(grad_norm_summary(result.records))}
    artifacts = {"metrics_csv": str(metrics_path.resolve()), "checkpoint": str(ckpt_path.resolve())}
    _atomic_write(out / "manifest.json", _manifest("train", cfg, source, target, artifacts, started, extra))
    print(f"source_acc={last.source_acc} target_acc={last.target_acc} steps={len(result.records)}")
    print(f"wrote {metrics_path}, {ckpt_path}, {out / 'manifest.json'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = list(gradcheck.ALL_CHECKS) if args.scope == "all" else [args.scope]
    failing = []
    for name in names:
        r = gradcheck.run_check(name)
        print(f"{name:<24} worst_rel_error={r.worst_rel_error:.3e} tol={r.tolerance:.0e} "
              f"{'ok' if r.ok else 'FAIL'}")
        if not r.ok:
            failing.append(name)
    if failing:
        print(f"gradient check failed for: {', '.join(failing)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_sweep(args) -> int:
    started = time.perf_counter()
    cfg = _resolve(args)
    source, target = load_datasets(cfg)
    task = Task(source, target, model_factory(cfg, source.dim, n_classes_of(source, target)))
    base = train_config(cfg)
    seeds = tuple(cfg["sweep.seeds"])
    extra = {}
    if args.kind == "noise":
        rows = run_noise_sweep(task, base, cfg["sweep.stds"], seeds, tuple(cfg["sweep.methods"]))
        ids = ["sigma"]
    elif args.kind == "lambda":
        rows = run_lambda_sweep(task, base, cfg["sweep.lambdas"], seeds)
        ids = ["lambda"]
    else:
        if base.beta <= 0:
            raise ConfigError("train.beta: the ablation needs a positive value")
        ab = run_regularizer_ablation(task, base, seeds)
        rows = ab.rows()
        ids = ["seed", "variant"]
        extra["ablation"] = {
            "mean_target_acc_with_reg": float(np.mean(ab.acc_with)),
            "mean_target_acc_without_reg": float(np.mean(ab.acc_without)),
            "mean_grad_std_with_reg": ab.mean_std_with,
            "mean_grad_std_without_reg": ab.mean_std_without,
            "seeds_with_higher_grad_std": [s for s, a, b in zip(seeds, ab.grad_with, ab.grad_without)
                                           if a.std > b.std],
        }
        print(json.dumps(extra["ablation"], indent=2))
    out = Path(args.out)
    table, long_ = out / f"sweep_{args.kind}.csv", out / f"sweep_{args.kind}_long.csv"
    _atomic_write(table, _table_bytes(rows))
    _atomic_write(long_, _table_bytes(long_format(rows, ids)))
    artifacts = {"table_csv": str(table.resolve()), "long_csv": str(long_.resolve())}
    _atomic_write(out / "manifest.json",
                  _manifest(f"sweep {args.kind}", cfg, source, target, artifacts, started, extra))
    print(_table_bytes(rows).decode("utf-8"), end="")
    ok = sum(1 for r in rows if r["status"] == "ok")
    if ok == 0:
        print("every sweep cell failed", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _table_bytes(rows) -> bytes:
    buf = io.StringIO()
    write_table_csv(rows, buf)
    return buf.getvalue().encode("utf-8")


def quantize_pair(source: DomainDataset, target: DomainDataset) -> tuple:
    """Map both domains jointly onto 0..255 so the shift between them survives."""
    lo = float(min(source.features.min(), target.features.min()))
    hi = float(max(source.features.max(), target.features.max()))
    span = hi - lo if hi > lo else 1.0

    def q(ds):
        return np.clip(np.rint((ds.features - lo) / span * 255.0), 0, 255).astype(np.uint8)
    return q(source), q(target), lo, hi


def cmd_gendata(args) -> int:
    cfg = cfgmod.load(args.config, args.overrides, args.seed)
    source, target = synthetic_pair(cfg)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".artn-write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        print(f"error: cannot write to {out}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    fmt = cfg["gendata.format"]
    description = {"tool": "artn", "version": __version__, "format": fmt,
                   "generator": {k: v for k, v in cfg.items() if k.startswith(("data.", "shift."))},
                   "rows": {"source": len(source), "target": len(target)}, "dim": source.dim}
    if fmt == "idx":
        if max(source.n_classes, target.n_classes) > 256:
            raise ConfigError("IDX labels are single bytes; data.classes must be <= 256")
        qs, qt, lo, hi = quantize_pair(source, target)
        files = {}
        for name, q, ds in (("source", qs, source), ("target", qt, target)):
            img, lab = out / f"{name}-images.idx", out / f"{name}-labels.idx"
            write_idx(img, q.reshape(len(ds), 1, ds.dim), lab, ds.class_labels)
            files[f"{name}_images"], files[f"{name}_labels"] = img, lab
        description["quantization"] = {"low": lo, "high": hi, "levels": 256}
        data_keys = {"data.kind": "idx", **{f"data.{k}": str(v.resolve()) for k, v in files.items()}}
    else:
        if max(source.n_classes, target.n_classes) > 2:
            raise ConfigError("sparse text export holds binary labels; use a two-class generator")
        files = {"source_path": out / "source.txt", "target_path": out / "target.txt"}
        write_sparse_bow(files["source_path"], source)
        write_sparse_bow(files["target_path"], target)
        data_keys = {"data.kind": "bow", "data.bow_dim": source.dim,
                     **{f"data.{k}": str(v.resolve()) for k, v in files.items()}}
    description["files"] = {p.name: _sha256(p.read_bytes()) for p in files.values()}
    description["config"] = data_keys
    _atomic_write(out / "description.json", (json.dumps(description, indent=2) + "\n").encode("utf-8"))
    _atomic_write(out / "data.toml", cfgmod.to_text(data_keys).encode("utf-8"))
    print(f"wrote {len(source)} source and {len(target)} target rows to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="artn", description="Adversarial residual transform networks")
    parser.add_argument("--version", action="version", version=f"artn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default: Optional[str] = "artn-out"):
        p.add_argument("--config", metavar="PATH", help="config file or run manifest")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, help=f"training seed; beats the file and ${cfgmod.SEED_ENV}")
        p.add_argument("--out", metavar="DIR", default=out_default, help="output directory")
        p.add_argument("-q", "--quiet", action="store_true", help="only print results")

    common(sub.add_parser("train", help="train one model"))
    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("scope", nargs="?", default="all", help="op name or 'all'")
    g.add_argument("-q", "--quiet", action="store_true")
    s = sub.add_parser("sweep", help="noise, lambda or regularizer-ablation sweep")
    s.add_argument("kind", choices=SWEEP_KINDS)
    common(s)
    common(sub.add_parser("gendata", help="write a synthetic domain pair to disk"))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.command == "gradcheck" and args.scope != "all" and args.scope not in gradcheck.ALL_CHECKS:
        parser.error(f"unknown op {args.scope!r}; choose 'all' or one of: "
                     f"{', '.join(gradcheck.ALL_CHECKS)}")
    handler = {"train": cmd_train, "gradcheck": cmd_gradcheck, "sweep": cmd_sweep,
               "gendata": cmd_gendata}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
