"""Command-line harness: ``modalfuse <command> --config run.cfg --out DIR``.

Every command writes ``metrics.csv`` with the header in ``CSV_HEADER``.
Exit codes: 0 success, 2 configuration error, 3 data or file-format error,
4 numeric failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import config as cfgmod
from .asm import AsmParams, score_modalities
from .data import SegDataset
from .encoder import check_params, init_params
from .errors import ConfigError, CoverageError, DataError, FormatError, NumericError, ShapeError
from .fileio import (
    atomic_write_bytes,
    read_checkpoint,
    read_dataset,
    read_tensor,
    write_checkpoint,
    write_dataset,
    write_label,
)
from .metrics import compute_miou
from .pipeline import FusionStrategy, count_efficiency, evaluate, evaluate_subsets, subset_label
from .pseudo_label import pseudo_label_dataset
from .synth import generate
from .tensor import Tensor
from .training import train_supervised
from .uda import adapt

log = logging.getLogger("modalfuse")

CSV_HEADER = ("run_id", "command", "subset", "class", "iou", "miou", "loss_adapt", "loss_kl", "flops", "params", "epoch")
SCORE_HEADER = ("run_id", "stage", "sample", "modality", "score", "batch_mean", "dropped")
COMMANDS = ("gen-data", "train", "eval", "adapt", "vote", "flops", "score")
EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if not math.isfinite(value):
            return ""  # absent class; numeric cells are always finite
        return f"{value:.10g}"
    return str(value)


def csv_bytes(header: Sequence[str], rows: Iterable[dict]) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        unknown = set(row) - set(header)
        if unknown:
            raise ValueError(f"columns not in header: {sorted(unknown)}")
        writer.writerow([_cell(row.get(col)) for col in header])
    return buf.getvalue().encode()


class Run:
    """State shared by one command invocation."""

    def __init__(self, command: str, conf: cfgmod.RunConfig, out: Path, plots: bool):
        self.command = command
        self.conf = conf
        self.out = out
        self.plots = plots
        self.run_id = conf.run_id(command)
        self.rows: list[dict] = []

    def row(self, **cells) -> None:
        self.rows.append({"run_id": self.run_id, "command": self.command, **cells})

    def write_metrics(self, name: str = "metrics.csv") -> Path:
        path = self.out / name
        atomic_write_bytes(path, csv_bytes(CSV_HEADER, self.rows))
        return path

    def dataset(self, key: str) -> SegDataset:
        return read_dataset(self.conf[key])

    def checkpoint(self, key: str, num_classes: int):
        params = read_checkpoint(self.conf[key])
        check_params(params, self.conf.encoder(num_classes))
        return params


# --------------------------------------------------------------------------- commands


def cmd_gen_data(run: Run) -> None:
    spec = run.conf.scene()
    n_train, n_test = run.conf["train_count"], run.conf["test_count"]
    splits = {
        "source_train": generate(spec, n_train, "source"),
        "source_test": generate(spec, n_test, "source", start=n_train),
        "target_train": generate(spec, n_train, "target"),
        "target_test": generate(spec, n_test, "target", start=n_train),
    }
    for name, ds in splits.items():
        write_dataset(run.out / name, ds)
        log.info("wrote %d samples to %s", len(ds), run.out / name)


def cmd_train(run: Run) -> None:
    data = run.dataset("train_data")
    enc = run.conf.encoder(data.num_classes)
    tc = run.conf.train()
    result = train_supervised(data, tc, run.conf.strategy(), enc, params=init_params(enc, seed=tc.seed))
    label = subset_label(data.modalities)
    for epoch, loss in enumerate(result.epoch_losses):
        run.row(subset=label, loss_adapt=loss, params=result.params.count(), epoch=epoch)
    if run.conf["eval_data"] is not None:
        report = evaluate(result.params, run.dataset("eval_data"), run.conf.strategy(), enc, batch_size=tc.batch_size, seed=tc.seed)
        _metric_rows(run, label, report, epoch=len(result.epoch_losses) - 1)
    write_checkpoint(run.out / "model.egc", result.params)
    if run.plots:
        from .plotting import plot_losses

        plot_losses(run.out / "loss.png", {"train": result.epoch_losses})


def _metric_rows(run: Run, subset: str, report, **extra) -> None:
    for c, iou in enumerate(report.per_class_iou):
        run.row(subset=subset, **{"class": c}, iou=iou, **extra)
    run.row(subset=subset, miou=report.miou, **extra)


def _subsets(run: Run, modalities: Sequence[str]):
    subsets = run.conf["subsets"]
    if subsets == ():
        return [tuple(modalities)]
    return subsets


def cmd_eval(run: Run) -> None:
    data = run.dataset("eval_data")
    enc = run.conf.encoder(data.num_classes)
    params = run.checkpoint("checkpoint", data.num_classes)
    results = evaluate_subsets(
        params, data, _subsets(run, data.modalities), run.conf.strategy(), enc,
        batch_size=run.conf["batch_size"], seed=run.conf["seed"],
    )
    per_class = Run(run.command, run.conf, run.out, False)
    for sub, report in results:
        run.row(subset=subset_label(sub), miou=report.miou, params=params.count())
        _metric_rows(per_class, subset_label(sub), report)
    per_class.write_metrics("per_class.csv")
    if run.plots:
        from .plotting import plot_subsets

        plot_subsets(run.out / "subsets.png", [(subset_label(s), r.miou) for s, r in results])


def cmd_adapt(run: Run) -> None:
    target = run.dataset("target_data")
    enc = run.conf.encoder(target.num_classes)
    teacher = run.checkpoint("teacher", target.num_classes)
    student = run.checkpoint("student_init", target.num_classes) if run.conf["student_init"] else teacher
    eval_data = run.dataset("eval_data") if run.conf["eval_data"] is not None else None
    strategy = run.conf.strategy()
    ac = run.conf.adapt()
    before = teacher.checksum()
    result = adapt(teacher, student, target, ac, strategy, enc, eval_dataset=eval_data)
    if teacher.checksum() != before:
        raise RuntimeError("teacher parameters changed during adaptation")
    label = subset_label(target.modalities)
    for rec in result.history:
        run.row(subset=label, miou=rec.target_miou, loss_adapt=rec.loss_adapt, loss_kl=rec.loss_kl, epoch=rec.epoch)
    write_checkpoint(run.out / "student.egc", result.student)
    if run.plots:
        from .plotting import plot_losses

        curves = {
            "loss_adapt": [r.loss_adapt for r in result.history],
            "loss_kl": [r.loss_kl for r in result.history],
        }
        if eval_data is not None:
            curves["target_miou"] = result.miou_curve
        plot_losses(run.out / "adapt.png", curves)


def cmd_vote(run: Run) -> None:
    data = run.dataset("eval_data")
    enc = run.conf.encoder(data.num_classes)
    params = run.checkpoint("checkpoint", data.num_classes)
    pc = run.conf.pseudo()
    for sub in _subsets(run, data.modalities):
        mods = data.subset_names(sub)
        view = SegDataset(mods, data.num_classes, list(data))
        labels, cov = pseudo_label_dataset(params, view, pc, run.conf.strategy(), enc, run.conf["batch_size"], run.conf["seed"])
        name = subset_label(mods)
        for i, lab in enumerate(labels):
            write_label(run.out / "labels" / name / f"{i:06d}.egl", lab)
        report = compute_miou(labels, data.labels(), data.num_classes)
        _metric_rows(run, name, report)
        log.info("%s: coverage %.4f, pseudo-label mIoU %.4f", name, cov, report.miou)


def cmd_flops(run: Run) -> None:
    conf = run.conf
    enc = conf.encoder()
    params = init_params(enc, seed=conf["seed"])
    shape = (conf["flops_batch"], enc.input_channels, conf["height"], conf["width"])
    n = len(conf["modalities"])
    strategies = [FusionStrategy.average()] if conf["flops_compare"] else []
    if conf.strategy() not in strategies:
        strategies.append(conf.strategy())
    bars = []
    for strat in strategies:
        report = count_efficiency(params, strat, shape, enc, n)
        run.row(subset=strat.label, flops=report.flops, params=report.param_count)
        bars.append((strat.label, report.flops))
    if run.plots:
        from .plotting import plot_flops

        plot_flops(run.out / "flops.png", bars)


def cmd_score(run: Run) -> None:
    conf = run.conf
    stage = conf["score_stage"]
    enc = conf.encoder()
    if not 0 <= stage < enc.num_stages:
        raise ConfigError(f"score_stage {stage} outside [0, {enc.num_stages})")
    params = run.checkpoint("checkpoint", enc.num_classes)
    root = Path(conf["features"])
    feats = {}
    for m in conf["modalities"]:
        path = root / f"{m}.egt"
        if not path.is_file():
            raise DataError(f"missing feature file {path}")
        feats[m] = Tensor(read_tensor(path))
    report = score_modalities(feats, AsmParams.from_model(params, stage))
    rows = []
    for b in range(report.per_sample_scores.shape[0]):
        for j, m in enumerate(report.names):
            rows.append({
                "run_id": run.run_id, "stage": stage, "sample": b, "modality": m,
                "score": report.per_sample_scores[b, j], "batch_mean": report.batch_means[j],
                "dropped": int(j == report.drop_index),
            })
    atomic_write_bytes(run.out / "scores.csv", csv_bytes(SCORE_HEADER, rows))


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "adapt": cmd_adapt,
    "vote": cmd_vote,
    "flops": cmd_flops,
    "score": cmd_score,
}


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modalfuse", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--out", help="output directory (overrides the 'out' key)")
    p.add_argument("--seed", type=int, help="overrides the 'seed' key")
    p.add_argument("--subset", help="eval/vote: comma list of modalities, overrides 'subsets'")
    p.add_argument("--plots", action="store_true", help="also render PNG figures next to the CSV")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run_command(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        conf = cfgmod.load(args.config)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        if args.subset is not None:
            if args.command not in ("eval", "vote"):
                raise ConfigError("--subset applies to eval and vote only")
            overrides["subsets"] = "+".join(m.strip() for m in args.subset.split(","))
        if args.out is not None:
            overrides["out"] = args.out
        conf = conf.with_overrides(**overrides)
        conf.require(args.command)
        run = Run(args.command, conf, Path(conf["out"]), args.plots)
        HANDLERS[args.command](run)
        if args.command not in ("gen-data", "score"):
            run.write_metrics()
    except (ConfigError, CoverageError) as exc:
        print(f"modalfuse: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, DataError, ShapeError, FileNotFoundError) as exc:
        print(f"modalfuse: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"modalfuse: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
