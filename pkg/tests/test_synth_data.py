import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from favoa.data import (
    FeatureStoreProvider,
    entry_context,
    featurize,
    load_dataset,
    read_features,
    write_features,
)
from favoa.errors import ConfigError, ContractError, FormatError
from favoa.synth import (
    AMBIGUOUS,
    CLEAR,
    SPEAKING,
    GeneratorConfig,
    World,
    generate,
    generate_scenes,
    scenario_fixture,
)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def mouth_projection(scenes, cfg):
    world = World.from_config(cfg)
    xs, ys = [], []
    for sc in scenes:
        for (tid, f), lab in sc.speaking.items():
            xs.append(float(sc.u[(tid, f)][cfg.face_dims:] @ world.mouth_pattern))
            ys.append(int(lab == SPEAKING))
    return np.array(xs), np.array(ys)


def logistic_probe(x_train, y_train, x_test, steps=400, lr=0.5, l2=1e-3):
    mu, sd = x_train.mean(0), x_train.std(0) + 1e-12
    A = np.hstack([(x_train - mu) / sd, np.ones((len(x_train), 1))])
    B = np.hstack([(x_test - mu) / sd, np.ones((len(x_test), 1))])
    w = np.zeros(A.shape[1])
    for _ in range(steps):
        p = 1 / (1 + np.exp(-A @ w))
        w -= lr * (A.T @ (p - y_train) / len(A) + l2 * w)
    return (B @ w > 0).astype(int)


class TestFeatureFiles:
    @given(hnp.arrays(np.float64, st.tuples(st.integers(0, 5), st.integers(1, 4)),
                      elements=st.floats(allow_nan=False, allow_infinity=False)))
    def test_round_trip(self, rows):
        import tempfile, pathlib

        with tempfile.TemporaryDirectory() as d:
            path = pathlib.Path(d) / "f.bin"
            write_features(path, rows)
            assert read_features(path).tobytes() == rows.tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "f.bin"
        path.write_bytes(b"NOTFEATS" + bytes(8))
        with pytest.raises(FormatError, match="magic"):
            read_features(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "f.bin"
        write_features(path, np.ones((2, 3)))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FormatError):
            read_features(path)


class TestGenerator:
    def test_byte_identical(self, tmp_path):
        cfg = GeneratorConfig(seed=5, scenes=6)
        generate(cfg, tmp_path / "a")
        generate(cfg, tmp_path / "b")
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_seed_changes_output(self, tmp_path):
        generate(GeneratorConfig(seed=1, scenes=3), tmp_path / "a")
        generate(GeneratorConfig(seed=2, scenes=3), tmp_path / "b")
        assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "b")

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            GeneratorConfig(noise=-1).validate()
        with pytest.raises(ConfigError):
            GeneratorConfig(ambiguous_fraction=1.5).validate()

    def test_clear_sigma_zero_threshold_probe(self):
        cfg = GeneratorConfig(seed=2, scenes=40, noise=0.0, ambiguous_fraction=0.0)
        x, y = mouth_projection(generate_scenes(cfg), cfg)
        assert y.any() and not y.all()
        assert np.array_equal((x > 0.6).astype(int), y)

    def test_ambiguous_mouth_ignores_label(self):
        cfg = GeneratorConfig(seed=4, scenes=300, noise=0.0, ambiguous_fraction=1.0)
        x, y = mouth_projection(generate_scenes(cfg), cfg)
        # the channel is drawn without reference to the label
        assert abs(x[y == 1].mean() - x[y == 0].mean()) < 0.05

    def test_prevalence(self):
        cfg = GeneratorConfig(seed=8, scenes=300)
        labels = [lab == SPEAKING for sc in generate_scenes(cfg) for lab in sc.speaking.values()]
        assert abs(np.mean(labels) - cfg.prevalence) < 0.05

    def test_distinct_codes_within_scene(self):
        for sc in generate_scenes(GeneratorConfig(seed=3, scenes=30, persons_per_scene=3, prevalence=0.25)):
            codes = [p.code for p in sc.persons]
            for i in range(len(codes)):
                for j in range(i + 1, len(codes)):
                    assert not np.allclose(codes[i], codes[j])

    def test_ambiguous_u_probe_at_baseline(self):
        cfg = GeneratorConfig(seed=21, scenes=260, ambiguous_fraction=1.0)
        feats, ys = [], []
        for sc in generate_scenes(cfg):
            for (tid, f), lab in sorted(sc.speaking.items()):
                feats.append(sc.u[(tid, f)])
                ys.append(int(lab == SPEAKING))
        X, y = np.array(feats), np.array(ys)
        n_test = 1000
        assert len(y) > n_test + 1000
        pred = logistic_probe(X[n_test:], y[n_test:], X[:n_test])
        acc = np.mean(pred == y[:n_test])
        baseline = max(y[:n_test].mean(), 1 - y[:n_test].mean())
        assert abs(acc - baseline) <= 0.05


class TestFixtures:
    def test_wrong_gender(self):
        sc = scenario_fixture("wrong_gender")
        assert all(sc.positives_at(f) == 1 for f in sc.frames)
        a, b = (p.code for p in sc.persons)
        np.testing.assert_array_equal(a, -b)

    def test_multiple_speakers(self):
        sc = scenario_fixture("multiple_speakers")
        assert all(sc.positives_at(f) == 2 for f in sc.frames)

    def test_low_resolution(self):
        floor = 0.01
        cfg = GeneratorConfig()
        sc = scenario_fixture("low_resolution", noise_floor=floor)
        mouths = np.array([v[cfg.face_dims:] for v in sc.u.values()])
        assert mouths.var() <= floor ** 2 * 1.5

    def test_unknown(self):
        with pytest.raises(ContractError):
            scenario_fixture("too_dark")


class TestDataset:
    def test_load_and_entries(self, tiny_dataset):
        ds = load_dataset(tiny_dataset)
        assert ds.dims == {"u": 32, "a": 16}
        assert len(ds.split("train")) + len(ds.split("val")) == len(ds.entries)
        assert len({e.entry_id for e in ds.entries}) == len(ds.entries)

    def test_bad_manifest(self, tmp_path):
        (tmp_path / "manifest.json").write_text('{"format": "favoa-dataset",\n "version": }')
        with pytest.raises(FormatError, match="line 2"):
            load_dataset(tmp_path)
        (tmp_path / "manifest.json").write_text(json.dumps({"format": "other", "version": 1}))
        with pytest.raises(FormatError):
            load_dataset(tmp_path)

    def test_provider_is_frozen_and_deterministic(self, tiny_dataset):
        ds = load_dataset(tiny_dataset)
        prov = FeatureStoreProvider(ds)
        assert prov.frozen
        assert all(not t.requires_grad for t in prov.parameters().values())
        e = ds.entries[3]
        c1, a1 = entry_context(ds, prov, e, {"L": 3, "S": 2, "tau": 1})
        c2, a2 = entry_context(ds, prov, e, {"L": 3, "S": 2, "tau": 1})
        assert c1.data.data.tobytes() == c2.data.data.tobytes() and a1.data.tobytes() == a2.data.tobytes()
        assert c1.speaker_order[0] == e.track_id

    def test_featurize_target_token(self, tiny_dataset):
        ds = load_dataset(tiny_dataset)
        prov = FeatureStoreProvider(ds)
        entries = ds.split("val")[:20]
        fs = featurize(ds, prov, entries, 3, 2, 1)
        assert fs.context.shape == (20, 6, 32) and fs.voice.shape == (20, 16)
        for i, e in enumerate(entries):
            np.testing.assert_array_equal(fs.context[i, 2], prov.raw_u((e.scene_id, e.track_id, e.frame)))
