"""``discn`` command line: data generation, training, evaluation and suites."""
import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ConfigurationError, DatasetIOError, IntegrityError, TrainingDivergedError
from .harness import (ExperimentConfig, desk_config, evaluate, export_roc, load_config_file,
                      run_experiment, run_suite, split_folds)
from .model import VARIANTS
from .head import FUSERS
from .synth import generate_dataset, parse_divergence, read_dataset, write_dataset

log = logging.getLogger("discn")

# flag name -> TrainConfig field
TRAIN_FLAGS = {"lr": "lr", "momentum": "momentum", "batch_size": "batch_size",
               "weight_decay": "weight_decay", "epochs": "max_epochs", "strip_length": "strip_length",
               "up_strips": "up_strips", "seed": "seed", "variant": "variant", "fuser": "fuser",
               "folds": "n_folds", "grad_clip": "grad_clip"}


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--data", required=True, help="dataset directory written by gen-data")
    p.add_argument("--config", help="INI file with [train]/[saa]/[head] sections")
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--epochs", type=int, help="max epochs")
    p.add_argument("--strip-length", type=int)
    p.add_argument("--up-strips", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--folds", type=int, help="number of CV folds")
    p.add_argument("--grad-clip", type=float)


def build_config(args, data) -> ExperimentConfig:
    """Desk defaults, then the config file, then explicit flags; shapes follow the data."""
    cfg = desk_config()
    if getattr(args, "config", None):
        cfg = load_config_file(args.config, cfg)
    over = {field: getattr(args, flag) for flag, field in TRAIN_FLAGS.items()
            if getattr(args, flag, None) is not None}
    train = replace(cfg.train, **over)
    m = data.manifest
    saa = replace(cfg.saa, image_size=m.size, channels=m.channels)
    head = replace(cfg.head, image_size=m.size, in_channels=m.channels, n_stimuli=m.n_stimuli)
    return ExperimentConfig(train, saa, head)


def cmd_gen_data(args):
    ds = generate_dataset(seed=args.seed, size=args.size, n_stimuli=args.n_stimuli,
                          n_subjects=args.n_subjects, n_normals=args.n_normals,
                          divergence=parse_divergence(args.divergence))
    root = write_dataset(ds, args.out)
    print(f"wrote {len(ds.manifest.subjects)} subjects, {len(ds.manifest.normal_ids)} normals to {root}")


def cmd_train(args):
    data = read_dataset(args.data)
    cfg = build_config(args, data)
    out = Path(args.out)
    folds = [args.fold] if args.fold is not None else None
    rep = run_experiment(cfg, data, out, checkpoint_dir=out / "checkpoints", folds=folds)
    _print_summary(rep.summary)


def cmd_eval(args):
    from .checkpoint import load_checkpoint
    from .harness import TrainConfig
    data = read_dataset(args.data)
    model = load_checkpoint(args.checkpoint)
    manifest = json.loads((Path(args.checkpoint) / "manifest.json").read_text())
    extra = manifest.get("extra", {})
    fold_index = args.fold if args.fold is not None else extra.get("fold", 0)
    seed = args.seed if args.seed is not None else extra.get("seed", 0)
    n_folds = args.folds or TrainConfig().n_folds
    fold = split_folds(data.manifest, seed, n_folds).folds[fold_index]
    ev = evaluate(model, fold, data)
    print(json.dumps({"fold": fold_index, "metrics": ev["metrics"]}, indent=2, sort_keys=True))
    if args.roc:
        export_roc(ev["roc"], args.roc)


def _suite(args, configs):
    data = read_dataset(args.data)
    seeds = args.seeds
    base = build_config(args, data)
    resolved = {}
    for name, train_kw in configs.items():
        resolved[name] = replace(base, train=replace(base.train, **train_kw))
    table = run_suite(resolved, data, seeds=seeds, out_dir=args.out)
    print((Path(args.out) / "table.csv").read_text(), end="")
    return table


def cmd_ablate(args):
    _suite(args, {v: {"variant": v, "fuser": "MLP" if v == "noSEA" else "SEA"} for v in args.variants})


def cmd_suite(args):
    _suite(args, {f: {"variant": "DISCN", "fuser": f} for f in args.fusers})


def cmd_roc_export(args):
    rep = json.loads(Path(args.report).read_text())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for f in rep["folds"]:
        export_roc(f["roc"], out / f"roc_fold{f['fold']}.csv")
    print(f"wrote {len(rep['folds'])} ROC files to {out}")


def _print_summary(summary):
    for metric, cell in summary.items():
        mean = "null" if cell["mean"] is None else f"{cell['mean']:.3f}±{cell['std']:.3f}"
        print(f"{metric:10s} {mean}")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="discn", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a seeded synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--stimuli", "--n-stimuli", dest="n_stimuli", type=int, default=5)
    g.add_argument("--subjects", "--n-subjects", dest="n_subjects", type=int, default=40)
    g.add_argument("--normals", "--n-normals", dest="n_normals", type=int, default=8)
    g.add_argument("--divergence", default="high", help="none/low/medium/high or a number in [0, 1]")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="cross-validate one variant; writes report.json and checkpoints")
    _add_train_flags(t)
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--fuser", choices=FUSERS)
    t.add_argument("--fold", type=int, help="run only this fold")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a saved checkpoint on its test fold")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True, help="fold checkpoint directory")
    e.add_argument("--fold", type=int)
    e.add_argument("--seed", type=int, help="fold-split seed (default: the one stored in the checkpoint)")
    e.add_argument("--folds", type=int)
    e.add_argument("--roc", help="optional CSV path for the ROC points")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="module ablation table (DISCN vs noDEP/noNOR/noRES/noSEA)")
    _add_train_flags(a)
    a.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    a.add_argument("--seeds", nargs="+", type=int, default=[0])
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("suite", help="fuser comparison table (MLP/LSTM/GRU/SEA)")
    _add_train_flags(s)
    s.add_argument("--fusers", nargs="+", choices=FUSERS, default=["MLP", "LSTM", "GRU", "SEA"])
    s.add_argument("--seeds", nargs="+", type=int, default=[0])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_suite)

    r = sub.add_parser("roc-export", help="re-export per-fold ROC CSVs from a report.json")
    r.add_argument("--report", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_roc_export)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigurationError, IntegrityError, DatasetIOError) as exc:
        print(f"discn: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"discn: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
