"""Command line entry point: ``taskaug <command> ...``."""

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import data as D
from .experiment import (DEFAULT_BASELINE_PAIRS, METHODS, collect_figures, emit_report,
                         format_table, load_results, run_matrix, summarize)
from .generative import load_generator, save_generator
from .segmentation import dice_per_structure, predict_volume, save_segmenter
from .training import (AUG_MODES, TrainConfig, TrainingData, desk_config, dump_config,
                       load_config, train_augmentor_joint, train_segmenter_augmented)

log = logging.getLogger("taskaug")

KIND_NAMES = {"gd": "deformation", "gi": "intensity"}


def _config(args) -> TrainConfig:
    base = desk_config() if getattr(args, "desk", False) else TrainConfig()
    if getattr(args, "config", None):
        base = load_config(args.config, base)
    return base


def _training_data(args, cfg):
    records = D.load_records(args.data_dir)
    split = D.read_split(args.split)
    labelled = D.sample_labelled_subset(split, args.n_labelled, args.labelled_run)
    log.info("labelled subjects: %s", ", ".join(labelled))
    return records, split, TrainingData.from_split(records, split, labelled)


def cmd_synth(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rec in D.make_synthetic_dataset(args.n_subjects, args.seed):
        D.save_record(rec, out / f"{rec.subject_id}.npz")
    print(f"wrote {args.n_subjects} synthetic subjects to {out}")


def cmd_preprocess(args):
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = D.ingest_directory(args.input_dir, args.phase)
    if not records:
        sys.exit(f"no subjects found in {args.input_dir}")
    for rec in records:
        try:
            pre = D.preprocess_volume(rec, args.target_spacing, args.size)
        except D.DegenerateVolume as exc:
            log.warning("skipping %s: %s", rec.subject_id, exc)
            continue
        D.save_record(pre, out / f"{rec.subject_id}.npz")
    print(f"preprocessed {len(records)} subjects into {out}")


def cmd_make_splits(args):
    split = D.make_split(D.load_records(args.data_dir), args.seed)
    D.write_split(split, args.out)
    print(f"wrote split to {args.out}")


def cmd_train_aug(args):
    cfg = _config(args)
    if args.dump_config:
        print(dump_config(cfg), end="")
        return
    _, _, data = _training_data(args, cfg)
    result = train_augmentor_joint(KIND_NAMES[args.kind], data, cfg)
    save_generator(result.generator, args.out)
    print(f"saved {args.kind} generator to {args.out} "
          f"(mean |output| {result.probe_magnitude_start:.3f} -> {result.probe_magnitude_end:.3f})")


def cmd_train_seg(args):
    cfg = _config(args)
    cfg = cfg.with_aug_mode(args.aug_mode) if args.aug_mode else cfg
    if args.dump_config:
        print(dump_config(cfg), end="")
        return
    _, _, data = _training_data(args, cfg)
    generators = {}
    for path in filter(None, (args.generators or "").split(",")):
        gen = load_generator(path)
        generators[gen.kind] = gen
    result = train_segmenter_augmented(generators, data, cfg)
    save_segmenter(result.net, args.out, cfg.unet_widths)
    print(f"best validation Dice {result.best_val_dice:.4f} at iteration "
          f"{result.state.best_iteration}; saved to {args.out}")
    if args.metrics:
        with open(args.metrics, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["subject_id", "structure", "dice"])
            for rec in data.test:
                scores = dice_per_structure(predict_volume(result.net, rec.image), rec.labels)
                for struct, value in scores.items():
                    writer.writerow([rec.subject_id, struct, f"{value:.6f}"])


def cmd_experiment_run(args):
    cfg = _config(args)
    records = D.load_records(args.data_dir)
    split = D.read_split(args.split)
    methods = args.methods.split(",")
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        sys.exit(f"unknown methods {unknown}; choose from {', '.join(METHODS)}")
    for n_l in (int(n) for n in args.n_labelled.split(",")):
        run_matrix(methods, records, split, cfg, n_l, out_dir=args.out,
                   n_subsets=args.subsets, n_restarts=args.restarts,
                   save_predictions=args.save_predictions)
    print(format_table(summarize(load_results(args.out), DEFAULT_BASELINE_PAIRS)), end="")


def cmd_experiment_report(args):
    results = load_results(args.in_dir)
    summaries = summarize(results, DEFAULT_BASELINE_PAIRS, pairing=args.pairing)
    panels, sheets = collect_figures(args.in_dir) if args.figures else ((), ())
    out = Path(args.out or Path(args.in_dir) / "report")
    written = emit_report(summaries, out, panels, sheets)
    if not args.table_csv:
        (out / "table.csv").unlink()
        written = [p for p in written if p.name != "table.csv"]
    print(format_table(summaries), end="")
    print(f"{len(written)} files written to {out}")


def build_parser():
    p = argparse.ArgumentParser(prog="taskaug", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic phantom dataset")
    s.add_argument("--n-subjects", type=int, default=60)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="normalize, resample and crop raw subjects")
    s.add_argument("--input-dir", required=True)
    s.add_argument("--output-dir", required=True)
    s.add_argument("--phase", default="ES", choices=["ES", "ED"])
    s.add_argument("--target-spacing", type=float, default=D.TARGET_SPACING)
    s.add_argument("--size", type=int, default=D.TARGET_SIZE)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("make-splits", help="group-balanced dataset split")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_splits)

    def training_args(s):
        s.add_argument("--config")
        s.add_argument("--desk", action="store_true", help="start from the desk-scale preset")
        s.add_argument("--dump-config", action="store_true")
        s.add_argument("--data-dir")
        s.add_argument("--split")
        s.add_argument("--n-labelled", type=int, default=1, choices=[1, 3])
        s.add_argument("--labelled-run", type=int, default=0)
        s.add_argument("--out")

    s = sub.add_parser("train-aug", help="phase 1: train a deformation or intensity generator")
    s.add_argument("--kind", choices=sorted(KIND_NAMES), default="gd")
    training_args(s)
    s.set_defaults(func=cmd_train_aug)

    s = sub.add_parser("train-seg", help="phase 2: train a segmenter with frozen generators")
    s.add_argument("--generators", help="comma-separated generator checkpoints")
    s.add_argument("--aug-mode", choices=sorted(AUG_MODES))
    s.add_argument("--metrics", help="CSV of per-subject test Dice")
    training_args(s)
    s.set_defaults(func=cmd_train_seg)

    e = sub.add_parser("experiment", help="run matrix and reports")
    esub = e.add_subparsers(dest="experiment_command", required=True)
    s = esub.add_parser("run")
    s.add_argument("--methods", required=True, help="comma-separated: " + ",".join(METHODS))
    s.add_argument("--n-labelled", default="1,3")
    s.add_argument("--out", required=True)
    s.add_argument("--data-dir", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--config")
    s.add_argument("--desk", action="store_true")
    s.add_argument("--subsets", type=int, default=5)
    s.add_argument("--restarts", type=int, default=3)
    s.add_argument("--save-predictions", action="store_true")
    s.set_defaults(func=cmd_experiment_run)
    s = esub.add_parser("report")
    s.add_argument("--in", dest="in_dir", required=True)
    s.add_argument("--out")
    s.add_argument("--table-csv", action="store_true")
    s.add_argument("--figures", action="store_true")
    s.add_argument("--pairing", choices=["subject", "run"], default="subject")
    s.set_defaults(func=cmd_experiment_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if getattr(args, "dump_config", False):
        args.func(args)
        return 0
    for name in ("data_dir", "split", "out"):
        if hasattr(args, name) and getattr(args, name) is None and args.command.startswith("train"):
            sys.exit(f"--{name.replace('_', '-')} is required")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
