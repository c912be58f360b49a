import json
import statistics
from dataclasses import replace

import pytest
import torch

from discn import cli
from discn.checkpoint import load_checkpoint, save_checkpoint
from discn.errors import ConfigurationError, IntegrityError, TrainingDivergedError
from discn.harness import (ExperimentConfig, TrainConfig, build_model, carve_validation, desk_config, early_stop_check,
                           evaluate, load_config_file, mean_loss, run_experiment, run_suite, split_folds,
                           train_fold, up_stop_epoch)
from discn.synth import AD, DatasetManifest, generate_dataset

from conftest import tiny_config


def manifest(n_subjects):
    subs = [{"id": f"s{i:03d}", "label": AD if i < n_subjects // 2 else 1 - AD} for i in range(n_subjects)]
    return DatasetManifest(1, 8, 3, 0, 1.0, ["x"], subs, [])


@pytest.mark.parametrize("n,test_per_class,train_per_class", [(100, 10, 40), (40, 4, 16)])
def test_split_folds_arithmetic(n, test_per_class, train_per_class):
    m = manifest(n)
    plan = split_folds(m, seed=0)
    assert len(plan.folds) == 5
    seen = []
    for f in plan.folds:
        test_labels = [plan.labels[i] for i in f.test_ids]
        train_labels = [plan.labels[i] for i in f.train_ids]
        assert test_labels.count(AD) == test_labels.count(1 - AD) == test_per_class
        assert train_labels.count(AD) == train_labels.count(1 - AD) == train_per_class
        assert not set(f.test_ids) & set(f.train_ids)
        seen += f.test_ids
    assert sorted(seen) == sorted(m.subject_ids) and len(set(seen)) == n
    assert split_folds(m, 0).folds[2].test_ids == plan.folds[2].test_ids
    assert split_folds(m, 1).folds[2].test_ids != plan.folds[2].test_ids


def test_split_folds_errors():
    m = manifest(40)
    m.subjects = m.subjects[:-1]
    with pytest.raises(ConfigurationError):
        split_folds(m, 0)
    with pytest.raises(ConfigurationError):
        split_folds(manifest(12), 0)


def test_validation_carve_is_stratified():
    m = manifest(40)
    fold = split_folds(m, 0).folds[0]
    train, val = carve_validation(fold.train_ids, m.labels, 0.2, 0, 0)
    assert sorted(train + val) == sorted(fold.train_ids)
    assert [m.labels[i] for i in val].count(AD) == 3 == [m.labels[i] for i in val].count(1 - AD)


# hand-traced UP-criterion stops: (curve, strip, k, expected epoch)
UP_CASES = [
    ([.5, .4, .3, .35, .4], 1, 2, 5),
    ([1.0 - 0.01 * i for i in range(30)], 5, 2, None),
    ([.9, .8, .7, .6, .5, .6, .5, .4, .3, .55, .5, .6, .7, .6, .65], 5, 2, 15),
    ([.6, .5, .4, .55, .3, .2], 2, 1, 4),
    ([.5, .6, .4, .7, .3, .8, .2], 1, 3, None),
]


@pytest.mark.parametrize("curve,strip,k,expected", UP_CASES)
def test_up_criterion_traces(curve, strip, k, expected):
    assert up_stop_epoch(curve, strip, k) == expected
    assert early_stop_check(curve, strip, k) == (expected is not None)


def test_up_criterion_k1_is_first_rise():
    curve = [.5, .4, .45, .3]
    assert up_stop_epoch(curve, 1, 1) == 3
    with pytest.raises(ValueError):
        early_stop_check([])


def test_train_config_rules():
    assert TrainConfig(variant="noSEA").fuser == "MLP"
    with pytest.raises(ConfigurationError):
        TrainConfig(variant="noSEA", fuser="GRU")
    for bad in (dict(lr=0), dict(batch_size=0), dict(variant="noXYZ"), dict(fuser="CNN"), dict(momentum=1.0),
                dict(val_fraction=0.0), dict(n_folds=1)):
        with pytest.raises(ConfigurationError):
            TrainConfig(**bad)
    assert ExperimentConfig(TrainConfig(variant="noSEA")).model_head().fuser == "MLP"


def test_config_file(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[train]\nlr = 0.01\nmax_epochs = 7\ngrad_clip = none\nvariant = noDEP\n"
                    "[saa]\nschedule = [[4, 0, 4], [2, 0, 2], [1, 0, 1]]\n[head]\nchannels = [4, 8]\nresidual = false\n")
    cfg = load_config_file(path, tiny_config())
    assert cfg.train.lr == 0.01 and cfg.train.max_epochs == 7 and cfg.train.grad_clip is None
    assert cfg.train.variant == "noDEP" and cfg.saa.schedule == ((4, 0, 4), (2, 0, 2), (1, 0, 1))
    assert cfg.head.channels == (4, 8) and cfg.head.residual is False
    assert cfg.saa.attn_dim == tiny_config().saa.attn_dim
    path.write_text("[train]\nlearning_rate = 1\n")
    with pytest.raises(ConfigurationError):
        load_config_file(path)
    with pytest.raises(ConfigurationError):
        load_config_file(tmp_path / "missing.ini")


def test_config_dict_roundtrip():
    cfg = tiny_config(variant="noRES")
    back = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back.to_dict() == cfg.to_dict()


# training -------------------------------------------------------------------

def test_zero_epochs_keeps_init(tiny_data):
    cfg = tiny_config(max_epochs=0)
    fold = split_folds(tiny_data.manifest, 0).folds[0]
    res = train_fold(fold, tiny_data, cfg)
    fresh = build_model(cfg, fold.index)
    assert res.curve == [] and res.best_epoch == 0
    for k, v in fresh.state_dict().items():
        assert torch.equal(v, res.model.state_dict()[k])


def test_training_is_bit_identical(tiny_data):
    cfg = tiny_config(max_epochs=2)
    fold = split_folds(tiny_data.manifest, 0).folds[1]
    a, b = train_fold(fold, tiny_data, cfg), train_fold(fold, tiny_data, cfg)
    assert a.curve == b.curve
    for k, v in a.model.state_dict().items():
        assert torch.equal(v, b.model.state_dict()[k])


def test_first_epoch_reduces_loss():
    # two SGD steps on a toy set are too noisy; desk scale gives 26 training subjects per fold
    data = generate_dataset(seed=0, size=64, divergence=1.0)
    drops = []
    for seed in range(3):
        cfg = desk_config(max_epochs=1, seed=seed)
        fold = split_folds(data.manifest, seed).folds[0]
        res = train_fold(fold, data, cfg, eval_train=True)
        drops.append(res.initial_train_loss - res.curve[0]["train_eval_loss"])
    assert statistics.median(drops) > 0


def test_nan_loss_dumps_batch(tiny_data, tmp_path, monkeypatch):
    import discn.harness as H
    monkeypatch.setattr(H, "bce_from_logits", lambda z, t: (z * float("nan")).sum())
    cfg = tiny_config(max_epochs=1, dump_dir=str(tmp_path))
    fold = split_folds(tiny_data.manifest, 0).folds[0]
    with pytest.raises(TrainingDivergedError) as info:
        train_fold(fold, tiny_data, cfg)
    dump = tmp_path / "fold0_epoch1"
    assert info.value.dump_dir == str(dump)
    assert (dump / "heat.dscnt").is_file() and json.loads((dump / "subjects.json").read_text())


def test_failed_run_flushes_partial_report(tiny_data, tmp_path, monkeypatch):
    import discn.harness as H
    real = H.train_fold

    def flaky(fold, *a, **kw):
        if fold.index == 1:
            raise TrainingDivergedError("boom")
        return real(fold, *a, **kw)

    monkeypatch.setattr(H, "train_fold", flaky)
    with pytest.raises(TrainingDivergedError):
        run_experiment(tiny_config(max_epochs=1), tiny_data, tmp_path)
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["status"] == "failed" and "boom" in rep["error"] and len(rep["folds"]) == 1


def test_evaluate_rejects_nonfinite_weights(tiny_data):
    cfg = tiny_config()
    model = build_model(cfg, 0)
    with torch.no_grad():
        next(model.parameters()).fill_(float("nan"))
    with pytest.raises(ValueError):
        evaluate(model, split_folds(tiny_data.manifest, 0).folds[0], tiny_data)


def test_checkpoint_roundtrip(tiny_data, tmp_path):
    model = build_model(tiny_config(variant="noDEP"), 4)
    save_checkpoint(model, tmp_path / "ck", extra={"fold": 2})
    back = load_checkpoint(tmp_path / "ck")
    assert back.variant == "noDEP" and back.saa_depth is None
    for k, v in model.state_dict().items():
        assert torch.equal(v, back.state_dict()[k])
    ids = tiny_data.manifest.subject_ids[:3]
    assert mean_loss(model, tiny_data, ids) == mean_loss(back, tiny_data, ids)
    (tmp_path / "ck" / "head.classifier.fc2.bias.dscnt").unlink()
    with pytest.raises(Exception):
        load_checkpoint(tmp_path / "ck")
    m = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    m["schema"] = "other"
    (tmp_path / "ck" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "ck")


@pytest.fixture(scope="module")
def tiny_report(tiny_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return run_experiment(tiny_config(max_epochs=1), tiny_data, out), out


def test_report_structure(tiny_report):
    rep, out = tiny_report
    js = json.loads((out / "report.json").read_text())
    assert js["status"] == "ok" and js["positive_class"] == "AD" and len(js["folds"]) == 5
    assert "runtime" not in js and json.loads((out / "run_manifest.json").read_text())["runtime_s"] > 0
    for f in js["folds"]:
        assert f["n_test"] == 2 and f["n_train"] + f["n_val"] == 8
        for m, v in f["metrics"].items():
            assert v is None or 0 <= v <= 1
        xs, ys = zip(*f["roc"])
        assert f["roc"][0] == [0.0, 0.0] and f["roc"][-1] == [1.0, 1.0]
        assert list(xs) == sorted(xs) and list(ys) == sorted(ys)
        assert (out / f"roc_fold{f['fold']}.csv").read_text().startswith("fpr,tpr\n")
    for cell in js["summary"].values():
        assert cell["std"] is None or cell["std"] >= 0


def test_report_is_byte_identical(tiny_report, tiny_data, tmp_path):
    _, out = tiny_report
    run_experiment(tiny_config(max_epochs=1), tiny_data, tmp_path)
    assert (tmp_path / "report.json").read_bytes() == (out / "report.json").read_bytes()


def test_run_suite_table(tiny_data, tmp_path):
    cfg = tiny_config(max_epochs=1)
    table = run_suite({"DISCN": cfg, "copy": cfg, "noSEA": replace(cfg, train=replace(cfg.train, variant="noSEA"))},
                      tiny_data, seeds=[0], out_dir=tmp_path)
    assert table["DISCN"] == table["copy"]
    rows = (tmp_path / "table.csv").read_text().splitlines()
    assert rows[0] == "Metrics,DISCN,copy,noSEA"
    assert [r.split(",")[0] for r in rows[1:]] == ["Accuracy", "Recall", "Precision", "F1-score", "AUC"]
    assert (tmp_path / "noSEA" / "seed0" / "report.json").is_file()


# command line ---------------------------------------------------------------

@pytest.fixture(scope="module")
def cli_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert cli.main(["gen-data", "--out", str(root), "--seed", "2", "--size", "16", "--stimuli", "3",
                     "--subjects", "10", "--normals", "2"]) == 0
    return root


def test_cli_train_and_eval(cli_data, tmp_path, capsys):
    out = tmp_path / "train"
    assert cli.main(["train", "--data", str(cli_data), "--out", str(out), "--epochs", "1", "--fold", "3",
                     "--batch-size", "4"]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert [f["fold"] for f in rep["folds"]] == [3] and rep["config"]["train"]["max_epochs"] == 1
    capsys.readouterr()
    roc = tmp_path / "roc.csv"
    assert cli.main(["eval", "--data", str(cli_data), "--checkpoint", str(out / "checkpoints" / "fold3"),
                     "--roc", str(roc)]) == 0
    ev = json.loads(capsys.readouterr().out)
    assert ev["fold"] == 3 and ev["metrics"] == rep["folds"][0]["metrics"]
    assert roc.read_text().startswith("fpr,tpr")
    assert cli.main(["roc-export", "--report", str(out / "report.json"), "--out", str(tmp_path / "rocs")]) == 0
    assert (tmp_path / "rocs" / "roc_fold3.csv").read_text() == (out / "roc_fold3.csv").read_text()


def test_cli_config_file_and_flags(cli_data, tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[train]\nmax_epochs = 4\nlr = 0.02\n[head]\nd1 = 8\n")
    args = cli.make_parser().parse_args(["train", "--data", str(cli_data), "--out", "x", "--config", str(ini),
                                         "--epochs", "2", "--variant", "noNOR"])
    from discn.synth import read_dataset
    cfg = cli.build_config(args, read_dataset(cli_data))
    assert cfg.train.max_epochs == 2 and cfg.train.lr == 0.02 and cfg.train.variant == "noNOR"
    assert cfg.head.d1 == 8 and cfg.head.image_size == 16 and cfg.head.n_stimuli == 3


def test_cli_errors(tmp_path, capsys):
    assert cli.main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2
    assert "manifest.json" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["train", "--data", "x", "--out", "y", "--variant", "bogus"])
