import json

import numpy as np
import pytest

from favoa.cli import apply_overrides, build_run_config, main
from favoa.errors import ConfigError


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture
def workdir(tmp_path):
    gen = write(tmp_path / "gen.json", {"seed": 3, "output_dir": "data", "generator": {"scenes": 10}})
    assert main(["gen-data", gen]) == 0
    return tmp_path


def run_cfg(workdir, **extra):
    cfg = {"seed": 3, "output_dir": "run", "dataset": "data", "train": {"epochs": 2, "gamma_0": 1e-3}}
    cfg.update(extra)
    return write(workdir / "run.json", cfg)


class TestConfig:
    def test_overrides(self):
        raw = apply_overrides({"seed": 1}, ["train.epochs=3", "model.d_c=8", "split=train", "train.gamma_0=1e-3"])
        assert raw["train"] == {"epochs": 3, "gamma_0": 1e-3} and raw["model"]["d_c"] == 8 and raw["split"] == "train"

    def test_seed_required(self):
        with pytest.raises(ConfigError, match="seed"):
            build_run_config({"output_dir": "x"})

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="d_x"):
            build_run_config({"seed": 0, "output_dir": "x", "model": {"d_x": 3}})

    def test_bad_override(self):
        with pytest.raises(ConfigError):
            apply_overrides({}, ["no-equals-sign"])


def test_gen_data_creates_dir_and_is_reproducible(tmp_path, capsys):
    cfg = write(tmp_path / "g.json", {"seed": 1, "output_dir": "deep/nested/out", "generator": {"scenes": 4}})
    assert main(["gen-data", cfg]) == 0
    assert "4 scenes" in capsys.readouterr().out
    first = (tmp_path / "deep/nested/out/manifest.json").read_bytes()
    assert main(["gen-data", cfg]) == 0
    assert (tmp_path / "deep/nested/out/manifest.json").read_bytes() == first


def test_malformed_config(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"seed": 1,\n  "output_dir": }')
    assert main(["gen-data", str(path)]) == 2
    assert "line 2, column" in capsys.readouterr().err


def test_train_eval_analyze(workdir, capsys):
    cfg = run_cfg(workdir)
    assert main(["train", cfg]) == 0
    out = capsys.readouterr().out
    assert "schedule: epoch 0 rate 0.001" in out
    run = workdir / "run"
    for name in ("params.bin", "report.jsonl", "checkpoint.bin", "run_config.json"):
        assert (run / name).exists()
    assert len((run / "report.jsonl").read_text().splitlines()) == 2

    assert main(["eval", cfg, "--params", str(run / "params.bin"), "--set", "output_dir=ev"]) == 0
    metrics = json.loads((workdir / "ev/metrics.json").read_text())
    assert {"map", "auc", "balanced_accuracy"} <= set(metrics)
    assert main(["eval", cfg, "--scores", str(workdir / "ev/scores.csv"), "--set", "output_dir=ev2"]) == 0
    assert json.loads((workdir / "ev2/metrics.json").read_text()) == metrics

    assert main(["analyze", cfg, "--params", str(run / "params.bin"), "--bin-width", "0.5",
                 "--set", "output_dir=an"]) == 0
    hist = (workdir / "an/histogram.csv").read_text().splitlines()[1:]
    assert len(hist) == 2
    n_rows = len((workdir / "an/contributions.csv").read_text().splitlines()) - 1
    assert sum(int(line.split(",")[1]) for line in hist) == n_rows == metrics["count"]
    degs = [float(l.split(",")[1]) for l in (workdir / "an/contributions.csv").read_text().splitlines()[1:]]
    assert all(0 <= d <= 1 for d in degs)


def test_paper_schedule_echo(workdir, capsys):
    cfg = run_cfg(workdir, train={"epochs": 11})
    assert main(["train", cfg, "--set", "output_dir=paper"]) == 0
    out = capsys.readouterr().out
    assert "schedule: epoch 0 rate 3e-06" in out and "schedule: epoch 10 rate 3e-07" in out


def test_resume_continues_report(workdir):
    cfg = run_cfg(workdir, train={"epochs": 4, "gamma_0": 1e-3})
    assert main(["train", cfg, "--set", "output_dir=full"]) == 0
    assert main(["train", cfg, "--set", "output_dir=part", "--set", "train.epochs=2"]) == 0
    assert main(["train", cfg, "--set", "output_dir=part", "--resume", str(workdir / "part/checkpoint.bin")]) == 0
    assert (workdir / "part/report.jsonl").read_bytes() == (workdir / "full/report.jsonl").read_bytes()
    assert (workdir / "part/params.bin").read_bytes() == (workdir / "full/params.bin").read_bytes()


def test_missing_params(workdir):
    assert main(["eval", run_cfg(workdir), "--params", str(workdir / "nope.bin")]) == 2


def test_undefined_metric_exit(workdir):
    scores = workdir / "s.csv"
    scores.write_text("entry_id,score,label\na,0.1,not_speaking\nb,0.7,not_speaking\n")
    assert main(["eval", run_cfg(workdir), "--scores", str(scores)]) == 4


def test_nan_abort_exit(workdir, monkeypatch):
    import favoa.train as tr

    real = tr.minibatch_gradients

    def poisoned(*args):
        total, grads = real(*args)
        grads["head.b"] = grads["head.b"] * np.nan
        return total, grads

    monkeypatch.setattr(tr, "minibatch_gradients", poisoned)
    assert main(["train", run_cfg(workdir)]) == 3


def test_untrained_auc_near_chance(tmp_path):
    from favoa.data import FeatureStoreProvider, featurize, load_dataset
    from favoa.metrics import roc_auc
    from favoa.model import FavoaParams, ModelConfig, predict
    from favoa.synth import GeneratorConfig, generate

    generate(GeneratorConfig(seed=17, scenes=60, prevalence=0.48, not_audible_rate=0.0, val_fraction=1.0), tmp_path)
    ds = load_dataset(tmp_path)
    cfg = ModelConfig()
    fs = featurize(ds, FeatureStoreProvider(ds), ds.split("val")[:500], 3, 2, 1)
    assert len(fs) == 500
    q, _ = predict(FavoaParams.init(cfg, 17), cfg, fs.context, fs.voice)
    assert 0.4 <= roc_auc(q, fs.labels) <= 0.6


def test_gradcheck_corrupt_names_op(capsys):
    assert main(["gradcheck", "--seeds", "1", "--samples", "4", "--corrupt", "tanh"]) == 1
    out = capsys.readouterr().out
    assert "FAIL op:tanh" in out and "failed:" in out
