"""Command-line entry points: synth, train, eval, ablate, verify.

Batch tooling only: progress lines go to stderr, results go to files in
the configured output directory (or stdout for eval/verify reports).
Every command is deterministic given its inputs, except the wall-clock
field in summaries.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, load_json, resolve_dataset
from .data import SynthSpec, synth_write
from .errors import ConfigError, CsafmError, DimensionError
from .fusion import FusionVariant
from .model import FpvCsafmModel, UnimodalClassifier, load, save
from .tensor import Rng, derive_seed
from .train import cir, class_major, history_csv, make_split, predict, train_loop


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr)


def _worker_cap() -> int:
    env = os.environ.get("CSAFM_THREADS", "")
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise ConfigError(f"CSAFM_THREADS must be an integer, got {env!r}") from None
        if cap < 1:
            raise ConfigError(f"CSAFM_THREADS must be >= 1, got {cap}")
        return cap
    return os.cpu_count() or 1


def _build_model(cfg: RunConfig, dataset) -> object:
    labels = [s.label for s in dataset]
    classes = max(labels) + 1
    fp_size = (dataset[0].fp.h, dataset[0].fp.w)
    fv_size = (dataset[0].fv.h, dataset[0].fv.w)
    rng = Rng(derive_seed(cfg.seed, "init"))
    if cfg.modality == "fused":
        return FpvCsafmModel.build(
            classes=classes, fp_size=fp_size, fv_size=fv_size,
            variant=cfg.variant, rng=rng, r1=cfg.r1, r2=cfg.r2,
            width_multiplier=cfg.width_multiplier,
            literal_double_mul=cfg.literal_double_mul,
        )
    size = fp_size if cfg.modality == "fp" else fv_size
    return UnimodalClassifier.build(
        classes=classes, image_size=size, modality=cfg.modality,
        rng=rng, width_multiplier=cfg.width_multiplier,
    )


def run_training(cfg: RunConfig, quiet: bool = False):
    """Train per config; returns (model, result). Shared by train and ablate."""
    dataset = resolve_dataset(cfg)
    model = _build_model(cfg, dataset)

    def report(epoch, loss, val):
        if not quiet:
            _progress(f"epoch {epoch}/{cfg.epochs} loss {loss:.6f} val_cir {val:.2f}")

    result = train_loop(model, dataset, cfg, progress=report)
    return model, result


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()
    model, result = run_training(cfg)
    wall = time.monotonic() - t0
    save(model, out / "weights.csafm")
    (out / "history.csv").write_text(history_csv(result.history), encoding="utf-8")
    summary = {
        "variant": cfg.variant.name,
        "modality": cfg.modality,
        "seed": cfg.seed,
        "best_val_cir": result.best_val_cir,
        "test_cir": result.test_cir,
        "epochs_run": len(result.history),
        "wall_seconds": round(wall, 3),
    }
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _progress(f"wrote {out / 'weights.csafm'}, history.csv, summary.json")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    dataset = resolve_dataset(cfg)
    model = load(args.weights)
    samples = class_major(dataset)
    labels = np.array([s.label for s in samples])
    classes = int(labels.max()) + 1
    if model.classes != classes:
        raise DimensionError(
            f"weights were trained for {model.classes} classes, dataset has {classes}"
        )
    counts = np.bincount(labels, minlength=classes)
    split = make_split(int(counts[0]), classes, cfg.seed, tuple(cfg.split))
    test_cir = cir(predict(model, samples, split.test, cfg.batch), labels[split.test])
    print(json.dumps({"test_cir": test_cir, "n_test": len(split.test)}, sort_keys=True))
    return 0


_ABLATION_ORDER = [v.name for v in FusionVariant]


def _ablate_parallel(base: dict, out: Path, workers: int) -> dict[str, tuple[float, float]]:
    """Train each variant in its own CLI subprocess, at most `workers` at once."""
    vdir = out / "variants"
    vdir.mkdir(parents=True, exist_ok=True)
    env = dict(os.environ)
    pkg_parent = str(Path(__file__).resolve().parent.parent)
    env["PYTHONPATH"] = pkg_parent + os.pathsep + env.get("PYTHONPATH", "")
    pending = list(_ABLATION_ORDER)
    running: dict[str, subprocess.Popen] = {}
    rows: dict[str, tuple[float, float]] = {}
    while pending or running:
        while pending and len(running) < workers:
            variant = pending.pop(0)
            cfg_path = vdir / f"{variant}.json"
            cfg_path.write_text(json.dumps(
                {**base, "variant": variant, "out_dir": str(vdir / variant)}))
            running[variant] = subprocess.Popen(
                [sys.executable, "-m", "csafm.cli", "train", "--config", str(cfg_path)],
                stdout=subprocess.DEVNULL, stderr=subprocess.PIPE, env=env,
            )
        done = None
        while done is None:
            done = next((v for v, p in running.items() if p.poll() is not None), None)
            if done is None:
                time.sleep(0.05)
        proc = running.pop(done)
        _, err = proc.communicate()
        if proc.returncode != 0:
            tail = err.decode(errors="replace").strip().splitlines()[-3:]
            raise ConfigError(
                f"variant {done} failed (exit {proc.returncode}): " + " | ".join(tail)
            )
        summary = json.loads((vdir / done / "summary.json").read_text())
        rows[done] = (summary["best_val_cir"], summary["test_cir"])
        _progress(f"{done}: test_cir {summary['test_cir']:.2f}")
    return rows


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = cfg.to_dict()
    base["modality"] = "fused"
    if args.parallel:
        rows = _ablate_parallel(base, out, min(len(_ABLATION_ORDER), _worker_cap()))
    else:
        rows = {}
        for variant in _ABLATION_ORDER:
            run_cfg = RunConfig.from_dict({**base, "variant": variant})
            _, result = run_training(run_cfg, quiet=True)
            rows[variant] = (result.best_val_cir, result.test_cir)
            _progress(f"{variant}: test_cir {result.test_cir:.2f}")
    lines = ["variant,best_val_cir,test_cir"]
    lines += [f"{v},{rows[v][0]:.6f},{rows[v][1]:.6f}" for v in _ABLATION_ORDER]
    (out / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _progress(f"wrote {out / 'ablation.csv'}")
    return 0


def cmd_synth(args) -> int:
    spec = SynthSpec.from_dict(load_json(args.spec)) if args.spec else SynthSpec()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = Rng(derive_seed(args.seed, "synthdata"))
    n = synth_write(spec, rng, out)
    _progress(f"wrote {n} PGM files across {spec.classes} classes under {out}")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_all
    return 0 if run_all() else 1


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None):
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="csafm",
        description="Two-modality attention-fusion classifier: data synthesis, "
                    "training, evaluation, ablation sweeps, and self-verification.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic paired-PGM dataset")
    p.add_argument("--spec", help="JSON synthesis spec (defaults built in)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train one model per a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default=None, help="override config out_dir")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="test-split CIR of saved weights")
    p.add_argument("--weights", required=True)
    p.add_argument("--config", required=True, help="config naming the dataset/split")
    p.add_argument("--seed", type=int, default=None, help="override split seed")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train every fusion variant; emit a CSV table")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default=None, help="override config out_dir")
    p.add_argument("--parallel", action="store_true",
                   help="train variants in worker processes (CSAFM_THREADS caps)")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("verify", help="run the built-in oracle/gradient checks")
    p.set_defaults(fn=cmd_verify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CsafmError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
