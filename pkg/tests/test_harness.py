import csv
from dataclasses import replace

import numpy as np
import pytest

from spenet import diff
from spenet.geom import PointCloud
from spenet.harness import train as train_mod
from spenet.harness.data import SHAPES, generate_synthetic_dataset, sample_shape
from spenet.harness.export import (
    ATTENTION_HEADER,
    LOSS_HEADER,
    attention_labels,
    export_attention,
    export_encodings,
    export_loss_curves,
)
from spenet.harness.matrix import (
    LONG_HEADER,
    REGIME_NAMES,
    REGIMES,
    VARIANT_NAMES,
    RegimeMatrix,
    fingerprint,
    run_regime_matrix,
)
from spenet.harness.presets import MatrixSetup, desk_matrix_setup
from spenet.harness.train import (
    History,
    Prepared,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    sample_rotation,
    train,
)
from spenet.net import NetworkConfig, init_parameters

TINY = dict(stage_channels=(6, 12, 18, 24, 30), num_points=48, k=8, base_radius=0.25,
            num_classes=2, dropout=0.0)


def tiny(variant="sel", **kw):
    return NetworkConfig(**(TINY | {"variant": variant} | kw))


@pytest.fixture(scope="module")
def toy():
    return generate_synthetic_dataset(("sphere", "cube"), per_class=5, points=48, seed=3)


# ---------------------------------------------------------------------------
# data


def test_split_arithmetic():
    ds = generate_synthetic_dataset(("cube", "cone", "torus", "pyramid", "sphere"), 100, 32)
    assert (len(ds.train), len(ds.test)) == (400, 100)
    labels = np.array([c.label for c in ds.test])
    assert np.array_equal(np.bincount(labels), [20] * 5)


def test_dataset_is_deterministic():
    a = generate_synthetic_dataset(("cone", "torus"), 3, 64, seed=9)
    b = generate_synthetic_dataset(("cone", "torus"), 3, 64, seed=9)
    for x, y in zip(a.train + a.test, b.train + b.test):
        assert np.array_equal(x.positions, y.positions) and x.label == y.label and x.id == y.id
    c = generate_synthetic_dataset(("cone", "torus"), 3, 64, seed=10)
    assert not np.array_equal(a.train[0].positions, c.train[0].positions)


def test_sphere_points_lie_on_the_unit_sphere():
    p = sample_shape("sphere", 500, np.random.default_rng(0))
    np.testing.assert_allclose(np.linalg.norm(p, axis=1), 1, atol=1e-12)


@pytest.mark.parametrize("name", SHAPES)
def test_every_shape_samples_normalized_clouds(name):
    ds = generate_synthetic_dataset((name,), 1, 256)
    p = ds.train[0].positions if ds.train else ds.test[0].positions
    assert p.shape == (256, 3)
    assert np.linalg.norm(p, axis=1).max() == pytest.approx(1.0)


def test_dataset_errors():
    with pytest.raises(ValueError, match="unknown shape"):
        generate_synthetic_dataset(("blob",), 2, 16)
    with pytest.raises(ValueError):
        generate_synthetic_dataset(("cube",), 0, 16)


# ---------------------------------------------------------------------------
# training


def test_train_config_validation():
    for bad in (dict(epochs=0), dict(lr=-1.0), dict(label_smoothing=1.0), dict(optimizer="x"),
                dict(batch_size=1), dict(schedule="step"), dict(scale_range=(1.0,))):
        with pytest.raises(ValueError, match="invalid TrainConfig"):
            TrainConfig(**bad)


def test_cosine_schedule():
    cfg = TrainConfig(lr=0.1, epochs=4)
    assert cfg.lr_at(0) == pytest.approx(0.1)
    assert cfg.lr_at(2) == pytest.approx(0.05)
    assert TrainConfig(lr=0.1, schedule="constant").lr_at(7) == 0.1


def test_rotation_sampling():
    assert np.array_equal(sample_rotation("none", 3), np.eye(3))
    R = sample_rotation("z", 3)
    assert R[2, 2] == pytest.approx(1.0)
    assert np.array_equal(sample_rotation("so3", 3), sample_rotation("so3", 3))
    with pytest.raises(ValueError):
        sample_rotation("x", 0)


def test_one_epoch_on_ten_samples(toy):
    state = init_parameters(tiny(), 0)
    state, hist = train(state, toy.train[:10], TrainConfig(epochs=1, batch_size=4))
    assert len(hist.loss) == len(hist.accuracy) == 1
    assert np.isfinite(hist.loss[0]) and hist.wall_time > 0
    assert state.epoch == 1


@pytest.mark.parametrize("optimizer", ["adamw", "sgd"])
def test_zero_learning_rate_leaves_parameters_unchanged(toy, optimizer):
    state = init_parameters(tiny(), 0)
    before = {k: t.data.copy() for k, t in state.params.items()}
    train(state, toy.train, TrainConfig(epochs=2, lr=0.0, batch_size=4, optimizer=optimizer), "z")
    assert all(np.array_equal(before[k], state.params[k].data) for k in before)


def test_toy_loss_decreases_monotonically(toy):
    state = init_parameters(tiny("ari"), 0)
    cfg = TrainConfig(epochs=5, lr=0.01, batch_size=8, schedule="constant", label_smoothing=0.0)
    _, hist = train(state, toy.train, cfg)
    assert all(b < a for a, b in zip(hist.loss, hist.loss[1:]))


def test_training_is_deterministic(toy):
    cfg = TrainConfig(epochs=2, batch_size=4)
    runs = [train(init_parameters(tiny(), 0), toy.train, cfg, "so3")[1].loss for _ in range(2)]
    assert runs[0] == runs[1]


def test_augmented_training_runs(toy):
    cfg = TrainConfig(epochs=1, batch_size=4, scale_range=(0.8, 1.2), noise=0.01)
    _, hist = train(init_parameters(tiny(), 0), toy.train, cfg, "z")
    assert np.isfinite(hist.loss[0])


def test_periodic_evaluation(toy):
    cfg = TrainConfig(epochs=3, batch_size=4, eval_every=2)
    _, hist = train(init_parameters(tiny(), 0), toy.train, cfg, test_data=toy.test)
    assert np.isnan(hist.accuracy[0]) and not np.isnan(hist.accuracy[1])
    assert not np.isnan(hist.accuracy[2])


def test_divergence_is_reported(toy, monkeypatch):
    real = diff.cross_entropy
    calls = {"n": 0}

    def flaky(logits, labels, smoothing=0.0):
        calls["n"] += 1
        out = real(logits, labels, smoothing)
        if calls["n"] > 2:
            out.data = np.asarray(np.nan, dtype=out.data.dtype)
        return out

    monkeypatch.setattr(diff, "cross_entropy", flaky)
    with pytest.raises(TrainingDiverged) as info:
        train(init_parameters(tiny(), 0), toy.train, TrainConfig(epochs=3, batch_size=4))
    assert (info.value.epoch, info.value.last_finite_epoch) == (1, 0)


def test_training_rejects_bad_input(toy):
    with pytest.raises(ValueError):
        train(init_parameters(tiny(), 0), toy.train[:1], TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train(init_parameters(tiny(), 0), toy.train, TrainConfig(epochs=1), "y")


# ---------------------------------------------------------------------------
# evaluation


def _fake_items(labels):
    return [Prepared(PointCloud(np.zeros((1, 3)), label=int(l)), None, None) for l in labels]


def test_evaluate_with_random_logits_is_at_chance(monkeypatch):
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 5, 4000)
    monkeypatch.setattr(train_mod, "predict", lambda *a, **k: rng.standard_normal((4000, 5)))
    acc = evaluate(init_parameters(tiny(num_classes=5), 0), _fake_items(labels))
    assert abs(acc - 0.2) < 0.03


def test_evaluate_with_memorized_labels_is_perfect(monkeypatch):
    labels = np.arange(50) % 5
    monkeypatch.setattr(train_mod, "predict", lambda *a, **k: np.eye(5)[labels])
    assert evaluate(init_parameters(tiny(num_classes=5), 0), _fake_items(labels)) == 1.0


def test_evaluate_is_deterministic_and_side_effect_free(toy):
    state = init_parameters(tiny(), 0)
    bufs = {k: v.copy() for k, v in state.buffers.items()}
    a = evaluate(state, toy.test, "so3", seed=4)
    assert a == evaluate(state, toy.test, "so3", seed=4)
    assert 0 <= a <= 1
    assert all(np.array_equal(bufs[k], state.buffers[k]) for k in bufs)


def test_evaluate_empty_set_errors():
    with pytest.raises(ValueError, match="non-empty"):
        evaluate(init_parameters(tiny(), 0), [])


# ---------------------------------------------------------------------------
# regime matrix


def test_regimes_map_exactly():
    assert REGIMES == {"nn": ("none", "none"), "zz": ("z", "z"), "zso3": ("z", "so3"),
                       "so3so3": ("so3", "so3")}
    assert list(REGIME_NAMES.values()) == ["N/N", "Z/Z", "Z/SO3", "SO3/SO3"]


@pytest.fixture(scope="module")
def small_matrix(toy):
    return run_regime_matrix(tiny(), TrainConfig(epochs=1, batch_size=4), toy,
                             ("ari",), ("zso3", "so3so3"), (0,))


def test_matrix_fills_requested_cells(small_matrix):
    assert set(small_matrix.cells) == {("ari", "zso3", 0), ("ari", "so3so3", 0)}
    assert not small_matrix.failures
    assert all(0 <= v <= 1 for v in small_matrix.cells.values())
    assert small_matrix.param_counts["ari"] > 0


def test_matrix_csv_layout(small_matrix, tmp_path):
    small_matrix.write_table(tmp_path / "t.csv")
    small_matrix.write_long(tmp_path / "l.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["variant", "params", "Z/SO3", "SO3/SO3"]
    assert rows[1][0] == VARIANT_NAMES["ari"] == "ARI-only"
    assert next(csv.reader(open(tmp_path / "l.csv"))) == list(LONG_HEADER)
    back = RegimeMatrix.read_long(tmp_path / "l.csv")
    assert back.cells == small_matrix.cells


def test_matrix_records_failures_and_continues(toy, monkeypatch):
    from spenet.harness import matrix as matrix_mod
    real = matrix_mod.train

    def picky(state, *a, **k):
        if state.config.variant == "cd":
            raise RuntimeError("boom")
        return real(state, *a, **k)

    monkeypatch.setattr(matrix_mod, "train", picky)
    m = run_regime_matrix(tiny(), TrainConfig(epochs=1, batch_size=4), toy, ("cd", "zri"),
                          ("nn",), (0,))
    assert "boom" in m.failures[("cd", "nn", 0)]
    assert np.isnan(m.accuracy("cd", "nn")) and not np.isnan(m.accuracy("zri", "nn"))


def test_matrix_rejects_unknown_names(toy):
    with pytest.raises(ValueError, match="variant"):
        run_regime_matrix(tiny(), TrainConfig(epochs=1), toy, ("xyz",), ("nn",), (0,))
    with pytest.raises(ValueError, match="regime"):
        run_regime_matrix(tiny(), TrainConfig(epochs=1), toy, ("cd",), ("zx",), (0,))


def test_fingerprint_tracks_configuration():
    s = MatrixSetup()
    assert s.fingerprint() == MatrixSetup().fingerprint()
    other = desk_matrix_setup(epochs=30)
    assert other.fingerprint() != s.fingerprint()
    assert other.net.maskout_epochs == 10
    assert fingerprint(s.net, s.train, s.data_spec(), ("cd",), ("nn",), (0,)) != s.fingerprint()


def test_desk_defaults():
    s = MatrixSetup()
    assert s.net.stage_channels == (12, 24, 48, 96, 192)
    assert (s.train.epochs, s.net.maskout_epochs, s.points, len(s.classes)) == (60, 20, 512, 5)


# ---------------------------------------------------------------------------
# exports


def test_attention_label_argmax():
    assert attention_labels(np.array([[0.9, 0.1, 0.2]])).tolist() == [0]
    assert attention_labels(np.array([[0.3, 0.3, 0.1]])).tolist() == [0]


def test_attention_inside_maskout_is_all_ari(toy, tmp_path):
    state = init_parameters(tiny(maskout_epochs=5), 0)
    rows = export_attention(state, toy.test[0], tmp_path / "a.csv", epoch=2)
    assert {r[3] for r in rows} == {"ARI"}
    assert all(r[4] == 0 and r[5] == 0 and 0 < r[6] < 1 for r in rows)
    assert len(rows) == state.config.stage_points[0]
    header = next(csv.reader(open(tmp_path / "a.csv")))
    assert header == list(ATTENTION_HEADER)


def test_attention_after_maskout_partitions_points(toy):
    state = init_parameters(tiny(maskout_epochs=5), 0)
    rows = export_attention(state, toy.test[0], stage=2, epoch=5)
    _, counts = np.unique([r[3] for r in rows], return_counts=True)
    assert counts.sum() == state.config.stage_points[1]
    assert any(r[4] > 0 for r in rows)


def test_attention_errors(toy):
    with pytest.raises(ValueError, match="stage"):
        export_attention(init_parameters(tiny(), 0), toy.test[0], stage=6)
    with pytest.raises(ValueError, match="selection"):
        export_attention(init_parameters(tiny("cd"), 0), toy.test[0])


def test_loss_curve_export(tmp_path):
    hists = {"cd": History(loss=[1.5, 1.0, 0.1 + 0.2]), "sel": History(loss=[2.0, 1.2, 0.7])}
    assert export_loss_curves(hists, tmp_path / "l.csv") == 6
    rows = list(csv.reader(open(tmp_path / "l.csv")))
    assert rows[0] == list(LOSS_HEADER)
    assert rows[3] == ["cd", "2", repr(0.1 + 0.2)]
    assert float(rows[3][2]) == hists["cd"].loss[2]


@pytest.mark.parametrize("kind,width", [("cd", 3), ("zri", 5), ("ari", 8)])
def test_encoding_export(toy, tmp_path, kind, width):
    enc = export_encodings(toy.train[0], kind, 0.3, 4, tmp_path / "e.csv")
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert len(rows[0]) == 2 + width and rows[0][:2] == ["query", "neighbor"]
    assert len(rows) == 1 + 48 * 4 and enc.shape == (48, 4, width)
