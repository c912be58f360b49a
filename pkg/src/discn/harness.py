"""Training, cross-validation and reporting."""
import configparser
import copy
import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .errors import ConfigurationError, TrainingDivergedError
from .head import FUSERS, HeadConfig, bce_from_logits, bce_loss
from .metrics import METRICS, aggregate, evaluate_scores, roc_points
from .model import VARIANTS, DISCNModel
from .optim import MomentumSGD
from .saa import SaaConfig
from .synth import AD, Dataset, DatasetManifest, memory_hash
from .tensorio import save_tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 5e-3
    momentum: float = 0.9
    batch_size: int = 16
    weight_decay: float = 1e-4
    max_epochs: int = 30
    strip_length: int = 5
    up_strips: int = 2
    seed: int = 0
    variant: str = "DISCN"
    fuser: str = "SEA"
    val_fraction: float = 0.2
    n_folds: int = 5
    dump_dir: Optional[str] = None
    # L2 norm cap applied separately to saa_depth, saa_gaze and head; None disables
    grad_clip: Optional[float] = 0.3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.fuser not in FUSERS:
            raise ConfigurationError(f"unknown fuser {self.fuser!r}")
        if self.variant == "noSEA":
            if self.fuser not in ("SEA", "MLP"):
                raise ConfigurationError("noSEA replaces serial attention with an MLP; fuser must be MLP")
            self.fuser = "MLP"
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 0 or self.strip_length < 1 \
                or self.up_strips < 1 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigurationError("training hyperparameters out of range")
        if not 0 < self.val_fraction < 1 or self.n_folds < 2:
            raise ConfigurationError("val_fraction must be in (0, 1) and n_folds >= 2")


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    saa: SaaConfig = field(default_factory=SaaConfig)
    head: HeadConfig = field(default_factory=HeadConfig)

    def model_head(self) -> HeadConfig:
        return replace(self.head, fuser=self.train.fuser)

    def to_dict(self):
        return {"train": asdict(self.train), "saa": self.saa.to_dict(), "head": self.model_head().to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(TrainConfig(**d.get("train", {})), SaaConfig.from_dict(d["saa"]) if "saa" in d else SaaConfig(),
                   HeadConfig.from_dict(d["head"]) if "head" in d else HeadConfig())


def desk_config(**train_overrides) -> ExperimentConfig:
    """Desk-scale defaults for 64 x 64 inputs on a single CPU core."""
    return ExperimentConfig(
        TrainConfig(**train_overrides),
        SaaConfig(image_size=64, schedule=((4, 0, 4), (2, 0, 2), (2, 0, 2)), attn_dim=16),
        HeadConfig(image_size=64, channels=(8, 16, 32), d1=64, d2=32, d4=16),
    )


# config files ---------------------------------------------------------------

def _coerce(value: str, ftype, default):
    kind = type(default) if default is not None else str
    if value.strip().lower() in ("none", "null"):
        return None
    if kind is bool:
        return value.strip().lower() in ("1", "true", "yes", "on")
    if kind is tuple:
        return tuple(json.loads(value))
    if default is None and not value.strip():
        return None
    return kind(value)


def load_config_file(path, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """INI-style file with optional [train], [saa] and [head] sections.

    Values are parsed by the type of the field's default; tuples such as
    ``schedule`` or ``channels`` are JSON lists.
    """
    base = copy.deepcopy(base or ExperimentConfig())
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigurationError(f"cannot read config file {path}")
    parts = {"train": base.train, "saa": base.saa, "head": base.head}
    updated = {}
    for section, obj in parts.items():
        if not parser.has_section(section):
            updated[section] = obj
            continue
        known = {f.name: getattr(obj, f.name) for f in fields(obj)}
        kw = {}
        for key, value in parser.items(section):
            if key not in known:
                raise ConfigurationError(f"{path}: unknown key [{section}] {key}")
            kw[key] = _coerce(value, None, known[key])
        updated[section] = replace(obj, **kw)
    return ExperimentConfig(updated["train"], updated["saa"], updated["head"])


# folds ----------------------------------------------------------------------

@dataclass
class Fold:
    index: int
    train_ids: List[str]
    test_ids: List[str]


@dataclass
class FoldPlan:
    folds: List[Fold]
    labels: Dict[str, int]     # as stored: AD=0, NC=1


def split_folds(manifest: DatasetManifest, seed: int, n_folds: int = 5) -> FoldPlan:
    labels = manifest.labels
    ad = sorted(i for i, l in labels.items() if l == AD)
    nc = sorted(i for i, l in labels.items() if l != AD)
    if len(ad) != len(nc):
        raise ConfigurationError(f"unbalanced subject set: {len(ad)} AD vs {len(nc)} NC")
    if len(ad) % n_folds:
        raise ConfigurationError(f"{len(ad)} subjects per class cannot be split into {n_folds} equal folds")
    rng = np.random.default_rng([seed, 17])
    ad_chunks = np.split(rng.permutation(ad), n_folds)
    nc_chunks = np.split(rng.permutation(nc), n_folds)
    folds = []
    for k in range(n_folds):
        test = sorted(list(ad_chunks[k]) + list(nc_chunks[k]))
        train = sorted(i for i in labels if i not in test)
        folds.append(Fold(k, train, test))
    return FoldPlan(folds, labels)


def carve_validation(train_ids: Sequence[str], labels: Dict[str, int], fraction: float, seed: int, fold: int):
    rng = np.random.default_rng([seed, 29, fold])
    val = []
    for cls in (AD, 1 - AD):
        members = sorted(i for i in train_ids if labels[i] == cls)
        n = max(1, int(round(fraction * len(members))))
        val += list(rng.permutation(members)[:n])
    val = sorted(val)
    return [i for i in train_ids if i not in val], val


# early stopping -------------------------------------------------------------

def up_stop_epoch(curve: Sequence[float], strip_length: int = 5, up_strips: int = 2) -> Optional[int]:
    """First (1-based) epoch at which the UP criterion fires, or None.

    Validation error is inspected at the end of every strip; the criterion
    fires once it has risen over ``up_strips`` successive strips.
    """
    rises = 0
    for t in range(2 * strip_length, len(curve) + 1, strip_length):
        if curve[t - 1] > curve[t - 1 - strip_length]:
            rises += 1
            if rises >= up_strips:
                return t
        else:
            rises = 0
    return None


def early_stop_check(curve: Sequence[float], strip_length: int = 5, up_strips: int = 2) -> bool:
    if not len(curve):
        raise ValueError("validation curve is empty")
    return up_stop_epoch(curve, strip_length, up_strips) is not None


# training -------------------------------------------------------------------

@dataclass
class TrainResult:
    model: DISCNModel
    curve: List[Dict[str, float]]
    best_epoch: int
    stopped_epoch: int
    val_ids: List[str]
    initial_train_loss: Optional[float] = None


def build_model(cfg: ExperimentConfig, seed: int) -> DISCNModel:
    torch.manual_seed(seed)
    return DISCNModel(cfg.saa, cfg.model_head(), cfg.train.variant)


def ad_targets(data: Dataset, ids) -> torch.Tensor:
    return (data.labels_of(ids) == AD).float()


def predict_proba(model: DISCNModel, data: Dataset, ids: Sequence[str], batch_size: int = 16) -> np.ndarray:
    """P(AD) per subject, evaluated in eval mode."""
    was_training = model.training
    model.eval()
    out = []
    with torch.no_grad():
        pre, com = model.reference(data.stimuli, data.normals_tensor())
        for start in range(0, len(ids), batch_size):
            chunk = list(ids[start:start + batch_size])
            out.append(model.classify_subjects(pre, com, data.heat_batch(chunk))[:, 0])
    model.train(was_training)
    return torch.cat(out).numpy().astype(np.float64) if out else np.zeros(0)


def mean_loss(model, data, ids, batch_size=16) -> float:
    p = torch.from_numpy(predict_proba(model, data, ids, batch_size))
    return float(bce_loss(p, ad_targets(data, ids)))


def _dump_batch(cfg: TrainConfig, data: Dataset, ids, fold_index, epoch) -> str:
    import tempfile
    root = Path(cfg.dump_dir) if cfg.dump_dir else Path(tempfile.mkdtemp(prefix="discn-nan-"))
    root = root / f"fold{fold_index}_epoch{epoch}"
    save_tensor(root / "heat.dscnt", data.heat_batch(ids))
    (root / "subjects.json").write_text(json.dumps(list(ids)))
    return str(root)


def train_fold(fold: Fold, data: Dataset, cfg: ExperimentConfig, eval_train: bool = False) -> TrainResult:
    tc = cfg.train
    labels = data.manifest.labels
    train_ids, val_ids = carve_validation(fold.train_ids, labels, tc.val_fraction, tc.seed, fold.index)
    model = build_model(cfg, tc.seed * 1000 + fold.index)
    init_loss = mean_loss(model, data, train_ids) if eval_train else None
    curve = []
    best_state, best_val, best_epoch = copy.deepcopy(model.state_dict()), float("inf"), 0
    if tc.max_epochs == 0:
        return TrainResult(model, curve, 0, 0, val_ids, init_loss)
    opt = MomentumSGD(model.named_parameters(), tc.lr, tc.momentum, tc.weight_decay)
    rng = np.random.default_rng([tc.seed, 41, fold.index])
    normals = data.normals_tensor()
    stopped = tc.max_epochs
    for epoch in range(1, tc.max_epochs + 1):
        model.train()
        order = list(rng.permutation(train_ids))
        losses = []
        for start in range(0, len(order), tc.batch_size):
            ids = order[start:start + tc.batch_size]
            opt.zero_grad()
            pre, com = model.reference(data.stimuli, normals)
            z = model.classify_subjects(pre, com, data.heat_batch(ids), logits=True)
            loss = bce_from_logits(z, ad_targets(data, ids))
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss in fold {fold.index}, epoch {epoch}",
                                            _dump_batch(tc, data, ids, fold.index, epoch))
            loss.backward()
            if tc.grad_clip:
                for part in model.children():
                    torch.nn.utils.clip_grad_norm_(part.parameters(), tc.grad_clip)
            opt.step()
            losses.append(loss.item() * len(ids))
        entry = {"epoch": epoch, "train_loss": sum(losses) / len(order),
                 "val_loss": mean_loss(model, data, val_ids)}
        if eval_train:
            entry["train_eval_loss"] = mean_loss(model, data, train_ids)
        curve.append(entry)
        log.debug("fold %d epoch %d %s", fold.index, epoch, entry)
        if entry["val_loss"] < best_val:
            best_val, best_epoch = entry["val_loss"], epoch
            best_state = copy.deepcopy(model.state_dict())
        if early_stop_check([c["val_loss"] for c in curve], tc.strip_length, tc.up_strips):
            stopped = epoch
            break
    model.load_state_dict(best_state)
    return TrainResult(model, curve, best_epoch, stopped, val_ids, init_loss)


# evaluation -----------------------------------------------------------------

def evaluate(model: DISCNModel, fold: Fold, data: Dataset) -> dict:
    if not all(torch.isfinite(p).all() for p in model.parameters()):
        raise ValueError("model weights are not finite")
    ids = list(fold.test_ids)
    scores = predict_proba(model, data, ids)
    y = (data.labels_of(ids) == AD).int().numpy()
    metrics = evaluate_scores(scores, y)
    return {
        "metrics": metrics,
        "roc": roc_points(scores, y),
        "scores": {i: float(s) for i, s in zip(ids, scores)},
    }


# experiments ----------------------------------------------------------------

def _run_fold(args):
    fold, data, cfg, ckpt_root = args
    t0 = time.perf_counter()
    res = train_fold(fold, data, cfg)
    ev = evaluate(res.model, fold, data)
    if ckpt_root is not None:
        from .checkpoint import save_checkpoint
        save_checkpoint(res.model, Path(ckpt_root) / f"fold{fold.index}",
                        extra={"fold": fold.index, "seed": cfg.train.seed, "best_epoch": res.best_epoch})
    return {
        "fold": fold.index,
        "metrics": ev["metrics"],
        "roc": ev["roc"],
        "scores": ev["scores"],
        "best_epoch": res.best_epoch,
        "stopped_epoch": res.stopped_epoch,
        "n_train": len(fold.train_ids) - len(res.val_ids),
        "n_val": len(res.val_ids),
        "n_test": len(fold.test_ids),
        "curve": res.curve,
    }, time.perf_counter() - t0


@dataclass
class ExperimentReport:
    config: dict
    dataset_hash: str
    folds: List[dict]
    summary: Dict[str, Dict[str, Optional[float]]]
    runtime: float = 0.0
    status: str = "ok"
    error: Optional[str] = None

    def to_json(self) -> dict:
        """Everything except wall-clock runtime, so reruns are byte-identical."""
        return {
            "schema": "discn-report/1",
            "status": self.status,
            "error": self.error,
            "positive_class": "AD",
            "config": self.config,
            "dataset_hash": self.dataset_hash,
            "folds": self.folds,
            "summary": self.summary,
        }

    def mean(self, metric: str) -> Optional[float]:
        return self.summary[metric]["mean"]


def parallel_folds() -> int:
    try:
        return max(1, int(os.environ.get("DISCN_THREADS", "1")))
    except ValueError:
        return 1


def write_report(report: ExperimentReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    for f in report.folds:
        export_roc(f["roc"], out / f"roc_fold{f['fold']}.csv")
    (out / "run_manifest.json").write_text(json.dumps({
        "config": report.config, "dataset_hash": report.dataset_hash,
        "seed": report.config["train"]["seed"], "runtime_s": report.runtime, "status": report.status,
    }, indent=2, sort_keys=True) + "\n")
    return out / "report.json"


def export_roc(points, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr"])
        for fpr, tpr in points:
            w.writerow([repr(float(fpr)), repr(float(tpr))])


def run_experiment(cfg: ExperimentConfig, data: Dataset, out_dir=None, checkpoint_dir=None,
                   folds: Optional[Sequence[int]] = None) -> ExperimentReport:
    """Cross-validate ``cfg`` on ``data``; ``folds`` restricts which folds run."""
    t0 = time.perf_counter()
    plan = split_folds(data.manifest, cfg.train.seed, cfg.train.n_folds)
    report = ExperimentReport(cfg.to_dict(), memory_hash(data), [], {})
    chosen = [f for f in plan.folds if folds is None or f.index in folds]
    jobs = [(fold, data, cfg, checkpoint_dir) for fold in chosen]
    try:
        workers = min(parallel_folds(), len(jobs))
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for res, _ in pool.map(_run_fold, jobs):
                    report.folds.append(res)
        else:
            for job in jobs:
                res, dt = _run_fold(job)
                log.info("fold %d done in %.1fs: %s", res["fold"], dt, res["metrics"])
                report.folds.append(res)
    except Exception as exc:
        report.status, report.error = "failed", f"{type(exc).__name__}: {exc}"
        report.summary = aggregate([f["metrics"] for f in report.folds])
        report.runtime = time.perf_counter() - t0
        if out_dir is not None:
            write_report(report, out_dir)
        raise
    report.summary = aggregate([f["metrics"] for f in report.folds])
    report.runtime = time.perf_counter() - t0
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def run_suite(configs: Dict[str, ExperimentConfig], data: Dataset, seeds: Sequence[int] = (0,),
              out_dir=None) -> Dict[str, Dict[str, Dict[str, Optional[float]]]]:
    """Run every named config over the same folds and seeds.

    With several seeds the fold metrics of all seeds are pooled before the
    mean and std are taken. Returns ``{column: {metric: {mean, std}}}``.
    """
    table = {}
    for name, cfg in configs.items():
        per_fold = []
        for seed in seeds:
            c = replace(cfg, train=replace(cfg.train, seed=seed))
            sub = None if out_dir is None else Path(out_dir) / name / f"seed{seed}"
            rep = run_experiment(c, data, sub)
            per_fold += [f["metrics"] for f in rep.folds]
        table[name] = aggregate(per_fold)
    if out_dir is not None:
        write_table(table, Path(out_dir) / "table.csv")
    return table


METRIC_LABELS = {"accuracy": "Accuracy", "recall": "Recall", "precision": "Precision",
                 "f1": "F1-score", "auc": "AUC"}


def format_cell(cell) -> str:
    if cell["mean"] is None:
        return "null"
    return f"{cell['mean']:.2f}±{cell['std']:.2f}"


def write_table(table, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(table)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Metrics"] + cols)
        for m in METRICS:
            w.writerow([METRIC_LABELS[m]] + [format_cell(table[c][m]) for c in cols])
