"""Command-line entry point: ``pldpirl <command> [options]``.

Exit status is 0 on success, 1 when the work itself fails (bad data,
invalid hyperparameters, corrupt checkpoints, a failing gradient check) and
2 for usage errors (unknown command or option, unknown config key).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint
from .config import ConfigError, Settings
from .data import DatasetManifest, generate_synthetic, histogram_probe_accuracy, load_split
from .gradsuite import REGISTRY, run_suite
from .metrics import MetricsReport
from .trainer import (
    FinetuneResult,
    TrainHistory,
    evaluate_classifier,
    finetune,
    load_classifier,
    TrainingError,
    pretext_train,
    supervised_baseline_train,
)

log = logging.getLogger("pldpirl")

SWEEP_COLUMNS = ["tau", "lambda", "seed", "top1", "top2", "f1_macro", "sensitivity_macro", "specificity_macro"]
RESOLVED_CONFIG = "config.resolved"
RUN_MANIFEST = "run_manifest.txt"


class UsageError(Exception):
    pass


class RunDir:
    """Output directory that records every artifact written into it."""

    def __init__(self, root, settings: Settings):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.artifacts: List[str] = []
        settings.write(self.path(RESOLVED_CONFIG))

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        rel = p.relative_to(self.root).as_posix()
        if rel not in self.artifacts:
            self.artifacts.append(rel)
        return p

    def close(self) -> None:
        self.path(RUN_MANIFEST).write_text("".join(a + "\n" for a in self.artifacts))


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------
def _load_data(manifest_path, split: str, image_size: int):
    manifest = DatasetManifest.read(manifest_path)
    x, y, _ = load_split(manifest, split, image_size)
    return x, y


def _write_history(run: RunDir, history: TrainHistory, stem: str) -> None:
    history.write_csv(run.path(f"{stem}.csv"))
    history.write_json(run.path(f"{stem}.json"))


def _write_metrics(run: RunDir, report: MetricsReport, name: str = "metrics.json") -> None:
    run.path(name).write_text(report.to_json() + "\n")


def _pretrain(settings: Settings, manifest_path):
    x, _ = _load_data(manifest_path, "train", settings["encoder.input_size"])
    return pretext_train(settings.pretext(), x)


def _supervised(settings: Settings, manifest_path, pretrained) -> FinetuneResult:
    size = settings["encoder.input_size"]
    tx, ty = _load_data(manifest_path, "train", size)
    vx, vy = _load_data(manifest_path, "val", size)
    if pretrained is None:
        return supervised_baseline_train(settings.finetune("baseline"), tx, ty, vx, vy)
    return finetune(settings.finetune("finetune"), pretrained, tx, ty, vx, vy)


def _evaluate(settings: Settings, manifest_path, state, split: str = "test") -> MetricsReport:
    clf = load_classifier(settings.finetune(), state)
    x, y = _load_data(manifest_path, split, settings["encoder.input_size"])
    return evaluate_classifier(clf, x, y)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_gen_data(args, settings: Settings, run: RunDir) -> int:
    cfg = settings.synth()
    manifest = generate_synthetic(cfg, run.root)
    for e in manifest.entries:
        run.path(e.path)
    run.path("manifest.csv")
    run.path("synth_meta.csv")
    x, y, _ = load_split(manifest, None)
    splits = np.array([e.split for e in manifest.entries])
    acc = histogram_probe_accuracy(x[splits == "train"], y[splits == "train"], x[splits != "train"], y[splits != "train"])
    counts = {s: int(np.sum(splits == s)) for s in ("train", "val", "test")}
    run.path("difficulty.json").write_text(json.dumps({"histogram_probe_accuracy": acc, "split_counts": counts}, indent=2) + "\n")
    print(f"wrote {len(manifest.entries)} images to {run.root} (train/val/test = "
          f"{counts['train']}/{counts['val']}/{counts['test']}); histogram probe accuracy {acc:.1f}%")
    return 0


def cmd_pretrain(args, settings: Settings, run: RunDir) -> int:
    res = _pretrain(settings, args.data)
    checkpoint.save(run.path("pretrain.ckpt"), res.state)
    _write_history(run, res.history, "history")
    h = res.history
    print(f"pretext training: {len(h.records)} epochs, final loss {h.records[-1].loss:.4f}, "
          f"best epoch {h.best_epoch}; checkpoint {run.root / 'pretrain.ckpt'}")
    return 0


def _finish_supervised(run: RunDir, res: FinetuneResult, label: str) -> int:
    checkpoint.save(run.path("classifier.ckpt"), res.state)
    _write_history(run, res.history, "history")
    h = res.history
    print(f"{label}: {len(h.records)} epochs ({h.stop_reason}), best epoch {h.best_epoch}; "
          f"checkpoint {run.root / 'classifier.ckpt'}")
    return 0


def cmd_finetune(args, settings: Settings, run: RunDir) -> int:
    pretrained = checkpoint.load(args.checkpoint)
    return _finish_supervised(run, _supervised(settings, args.data, pretrained), "fine-tuning")


def cmd_train_baseline(args, settings: Settings, run: RunDir) -> int:
    return _finish_supervised(run, _supervised(settings, args.data, None), "baseline training")


def cmd_evaluate(args, settings: Settings, run: RunDir) -> int:
    report = _evaluate(settings, args.data, checkpoint.load(args.checkpoint), args.split)
    _write_metrics(run, report)
    print(f"{args.split}: top1 {report.top1:.2f} top2 {report.top2:.2f} f1 {report.f1_macro:.2f} "
          f"sens {report.sensitivity_macro:.2f} spec {report.specificity_macro:.2f} (n={report.n_samples})")
    return 0


def sweep_cell(raw: Dict[str, str], manifest_path: str, out_dir: str, tau: float, lam: float, seed: int) -> Dict[str, float]:
    """One grid cell: pretrain, fine-tune and evaluate on the test split."""
    settings = Settings({**raw, "loss.tau": repr(tau), "loss.lambda": repr(lam), "seed": str(seed)})
    run = RunDir(out_dir, settings)
    pre = _pretrain(settings, manifest_path)
    checkpoint.save(run.path("pretrain.ckpt"), pre.state)
    _write_history(run, pre.history, "pretrain_history")
    ft = _supervised(settings, manifest_path, pre.state)
    checkpoint.save(run.path("classifier.ckpt"), ft.state)
    _write_history(run, ft.history, "finetune_history")
    report = _evaluate(settings, manifest_path, ft.state, "test")
    _write_metrics(run, report)
    run.close()
    row = {"tau": tau, "lambda": lam, "seed": seed}
    row.update({k: getattr(report, k) for k in SWEEP_COLUMNS[3:]})
    return row


def sweep_grid(settings: Settings) -> List[Tuple[float, float, int]]:
    return [(t, l, s) for s in settings["sweep.seeds"] for t in settings["sweep.taus"] for l in settings["sweep.lambdas"]]


def cmd_sweep(args, settings: Settings, run: RunDir) -> int:
    if args.parallel < 1:
        raise UsageError("--parallel must be at least 1")
    grid = sweep_grid(settings)
    if not grid:
        raise ConfigError("sweep grid is empty")
    manifest = str(Path(args.data).resolve())
    jobs = []
    for tau, lam, seed in grid:
        cell = f"cells/seed{seed}_tau{tau:g}_lambda{lam:g}"
        jobs.append((dict(settings.raw), manifest, str(run.root / cell), tau, lam, seed))
    if args.parallel == 1:
        rows = [sweep_cell(*job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            futures = [pool.submit(sweep_cell, *job) for job in jobs]
            rows = [f.result() for f in futures]
    for job in jobs:
        cell_dir = Path(job[2])
        for rel in (cell_dir / RUN_MANIFEST).read_text().split():
            run.path((cell_dir / rel).relative_to(run.root).as_posix())
    with open(run.path("sweep.csv"), "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        wr.writeheader()
        for row in rows:
            wr.writerow({k: (repr(float(v)) if k not in ("seed",) else int(v)) for k, v in row.items()})
    print(f"sweep: {len(rows)} cells written to {run.root / 'sweep.csv'}")
    return 0


def cmd_gradcheck(args, settings: Settings, run: Optional[RunDir]) -> int:
    names = args.ops.split(",") if args.ops else None
    unknown = sorted(set(names or ()) - set(REGISTRY))
    if unknown:
        raise UsageError(f"unknown gradient checks: {', '.join(unknown)} (known: {', '.join(sorted(REGISTRY))})")
    report = run_suite(args.trials, settings["seed"], args.eps, names)
    lines = report.lines()
    print("\n".join(lines))
    print(f"{'PASS' if report.passed else 'FAIL'}: {len(report.results)} checks, "
          f"{args.trials} trials each, {report.seconds:.1f}s")
    if run is not None:
        run.path("gradcheck.txt").write_text("\n".join(lines) + "\n")
    return 0 if report.passed else 1


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")

    parser = argparse.ArgumentParser(prog="pldpirl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, func, help_, out_required=True):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--out", required=out_required, help="output directory")
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data, "write a synthetic dataset and its manifest")
    p = add("pretrain", cmd_pretrain, "self-supervised pretext training")
    p.add_argument("--data", required=True, help="dataset manifest.csv")
    p = add("finetune", cmd_finetune, "fine-tune a pretrained encoder with a classification head")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="pretrain checkpoint")
    p = add("train-baseline", cmd_train_baseline, "supervised training from random initialization")
    p.add_argument("--data", required=True)
    p = add("evaluate", cmd_evaluate, "score a classifier checkpoint and write metrics.json")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="classifier checkpoint")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p = add("sweep", cmd_sweep, "tau x lambda grid of pretrain + finetune + evaluate")
    p.add_argument("--data", required=True)
    p.add_argument("--parallel", type=int, default=1, help="grid cells to run concurrently")
    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every differentiable op", out_required=False)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--ops", help="comma-separated subset of checks")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code) if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        settings = Settings.load(args.config, overrides)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"pldpirl: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"pldpirl: error: {exc}", file=sys.stderr)
        return 1

    run = None
    try:
        if args.out is not None:
            run = RunDir(args.out, settings)
        code = args.func(args, settings, run)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"pldpirl: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError, ArithmeticError, TrainingError) as exc:
        print(f"pldpirl: error: {exc}", file=sys.stderr)
        code = 1
    finally:
        if run is not None:
            run.close()
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
