import json

import numpy as np
import pytest

from lpbnn.autodiff import Tape, Tensor
from lpbnn.config import (
    ConfigError,
    DatasetSpec,
    ExperimentConfig,
    config_from_pairs,
    dump_config,
    load_config,
    parse_pairs,
)
from lpbnn.data import blob_centers, generate_dataset, load_dataset_dir, write_dataset_dir
from lpbnn.evaluate import evaluate, passes_for
from lpbnn.experiment import ExperimentError, run_config, run_experiment, stability_sweep, sweep_table
from lpbnn.metrics import accuracy
from lpbnn.models import Network, load_model
from lpbnn.train import batch_loss, learning_rate_at, member_slices, sgd_step, train, worker_count


def small_config(kind="lpbnn", **changes):
    ds = DatasetSpec(n_train=128, n_test=200, n_classes=3, input_dim=4,
                     corruption_severities=[1, 2], corruption_noise=[0.5, 1.0])
    cfg = ExperimentConfig(model_kind=kind, J=2, latent_dim=4, layer_widths=[16], learning_rate=0.05,
                           lr_decay_epochs=[], epochs=2, batch_size=32, dataset=ds)
    return cfg.replace(**changes)


def config_text(cfg):
    return dump_config(cfg)


# ----------------------------------------------------------------- data


def test_dataset_is_determined_by_seed():
    spec = small_config().dataset
    a, b, c = generate_dataset(spec, 3), generate_dataset(spec, 3), generate_dataset(spec, 4)
    np.testing.assert_array_equal(a.train.x, b.train.x)
    np.testing.assert_array_equal(a.corrupted[2].x, b.corrupted[2].x)
    assert not np.allclose(a.train.x, c.train.x)
    assert a.ood.y is None and len(a.ood) == spec.n_test
    assert np.bincount(a.train.y).tolist() == [43, 43, 42]


def test_zero_noise_corruption_is_exact_copy():
    spec = DatasetSpec(input_dim=3, n_train=10, n_test=20, corruption_severities=[1, 2],
                       corruption_noise=[0.0, 0.5])
    data = generate_dataset(spec, 0)
    np.testing.assert_array_equal(data.corrupted[1].x, data.test.x)
    assert not np.allclose(data.corrupted[2].x, data.test.x)


def test_ood_split_is_separated_from_training_support():
    spec = DatasetSpec(input_dim=4, n_train=300, n_test=300)
    data = generate_dataset(spec, 0)
    centers = blob_centers(spec, 0)

    def dist(x):
        return np.min(np.linalg.norm(x[:, None, :] - centers[None], axis=2), axis=1)

    # a single distance threshold separates the splits with zero errors
    assert dist(data.test.x).max() < dist(data.ood.x).min()


def test_dataset_csv_roundtrip(tmp_path):
    data = generate_dataset(small_config().dataset, 1)
    back = load_dataset_dir(write_dataset_dir(tmp_path / "d", data))
    np.testing.assert_array_equal(back.train.x, data.train.x)
    np.testing.assert_array_equal(back.test.y, data.test.y)
    assert back.ood.y is None
    assert sorted(back.corrupted) == [1, 2]
    np.testing.assert_array_equal(back.corrupted[2].x, data.corrupted[2].x)
    with pytest.raises(FileNotFoundError):
        load_dataset_dir(tmp_path / "nope")


def test_dataset_spec_validation():
    with pytest.raises(ConfigError):
        DatasetSpec(corruption_severities=[1, 2], corruption_noise=[0.5, 0.5]).validate()
    with pytest.raises(ConfigError):
        DatasetSpec(n_classes=1).validate()
    with pytest.raises(ConfigError):
        DatasetSpec(kind="file").validate()


# --------------------------------------------------------------- config


def test_config_file_roundtrip(tmp_path):
    cfg = small_config(freeze_fast=True, weight_decay_fast=1e-3)
    path = tmp_path / "c.txt"
    path.write_text("# comment\n" + config_text(cfg))
    assert load_config(path) == cfg


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="unknown key"):
        config_from_pairs({"learning_rat": "0.1"})
    with pytest.raises(ConfigError, match="bad value"):
        config_from_pairs({"epochs": "many"})
    with pytest.raises(ConfigError, match="multiple of J"):
        config_from_pairs({"J": "3", "batch_size": "128"})
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.txt")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_pairs("a = 1\na = 2")
    with pytest.raises(ExperimentError, match=r"\[config\]"):
        run_experiment(tmp_path / "missing.txt", out_dir=tmp_path)


def test_learning_rate_schedule():
    cfg = small_config(learning_rate=0.1, lr_decay_epochs=[2, 3], lr_decay_ratio=0.1)
    assert [learning_rate_at(cfg, e) for e in (1, 2)] == [0.1, 0.1]
    assert np.isclose(learning_rate_at(cfg, 3), 0.01) and np.isclose(learning_rate_at(cfg, 4), 0.001)


def test_member_slices_are_contiguous():
    np.testing.assert_array_equal(member_slices(6, 3), [0, 0, 1, 1, 2, 2])


# ------------------------------------------------------------- training


def test_deterministic_model_fits_separable_blobs():
    cfg = small_config("deterministic", epochs=25, learning_rate=0.1, class_std=0.3)
    data = generate_dataset(cfg.dataset, 0)
    record = train(cfg, data)
    probs = record.model.predict(data.train.x)
    assert accuracy(probs.mean(axis=0), data.train.y) >= 0.99


def test_zero_epochs_leaves_initialization_untouched():
    cfg = small_config(epochs=0)
    record = train(cfg)
    assert record.history == [] and record.divergence_epoch is None
    fresh = Network.build(cfg, 4, 3)
    for a, b in zip(record.model.snapshot(), fresh.snapshot()):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("kind", ["deterministic", "meanfield", "batchensemble", "lpbnn"])
def test_training_is_deterministic(kind):
    cfg = small_config(kind)
    a, b = train(cfg), train(cfg)
    assert a.history == b.history
    for x, y in zip(a.model.snapshot(), b.model.snapshot()):
        np.testing.assert_array_equal(x, y)


@pytest.mark.parametrize("kind", ["deterministic", "meanfield", "batchensemble", "lpbnn"])
def test_small_step_decreases_loss_on_fixed_batch(kind):
    cfg = small_config(kind)
    data = generate_dataset(cfg.dataset, 0)
    model = Network.build(cfg, data.input_dim, data.n_classes)
    x, y = data.train.x[:32], data.train.y[:32]
    stream = ("fixed",)

    def loss():
        with Tape():
            return batch_loss(model, cfg, Tensor(x), y, member_slices(32, model.J), stream, 4).total

    before = loss()
    sgd_step(model, cfg, x, y, 1e-4, stream, 4)
    assert loss() < before


def test_huge_learning_rate_records_divergence():
    cfg = small_config("deterministic", learning_rate=1e100, epochs=5)
    record = train(cfg)
    assert record.divergence_epoch is not None
    assert record.divergence_epoch == 1 and record.history == []
    assert all(np.all(np.isfinite(a)) for a in record.model.snapshot())


def test_zero_learning_rate_sweep_matches_untrained_model():
    cfg = small_config("deterministic")
    (row,) = stability_sweep(cfg, [0.0], kinds=("deterministic",))
    data = generate_dataset(cfg.dataset, cfg.seed)
    model = Network.build(cfg, data.input_dim, data.n_classes)
    probs = model.predict(data.test.x, cfg.eval_seed, ("eval", "test"))
    assert row.final_accuracy == accuracy(probs.mean(axis=0), data.test.y)
    assert row.divergence_epoch is None
    assert sweep_table([row]).splitlines()[1].startswith("deterministic,0.0,0,")


def test_worker_count_from_environment(monkeypatch):
    monkeypatch.setenv("LPBNN_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("LPBNN_THREADS", "many")
    assert worker_count() == 1


def test_parallel_deep_ensemble_matches_serial(monkeypatch):
    cfg = small_config("deepensemble", epochs=1)
    monkeypatch.setenv("LPBNN_THREADS", "1")
    serial = train(cfg)
    monkeypatch.setenv("LPBNN_THREADS", "2")
    parallel = train(cfg)
    assert serial.history == parallel.history
    for a, b in zip(serial.model.members, parallel.model.members):
        for x, y in zip(a.snapshot(), b.snapshot()):
            np.testing.assert_array_equal(x, y)


# ----------------------------------------------------------- evaluation


def test_evaluation_pass_counts():
    cfg = small_config("lpbnn", epochs=0)
    data = generate_dataset(cfg.dataset, 0)
    model = Network.build(cfg, data.input_dim, data.n_classes)
    batches, report = evaluate(model, data, 0)
    assert batches[0].probs.shape == (2, 200, 3)
    assert passes_for(model, 2) == 3
    assert evaluate(model, data, 2)[0][0].probs.shape[0] == 6
    assert [b.severity for b in batches] == [0, 0, 1, 2] and batches[1].ood
    mf = Network.build(small_config("meanfield", J=3), data.input_dim, data.n_classes)
    assert evaluate(mf, data, 0)[0][0].probs.shape[0] == 3


def test_evaluation_seed_changes_little():
    cfg = small_config("lpbnn", epochs=5, n_test=2000)
    data = generate_dataset(cfg.dataset, 0)
    model = train(cfg, data).model
    a = evaluate(model, data, 0, seed=1)[1].metrics["accuracy"]
    b = evaluate(model, data, 0, seed=2)[1].metrics["accuracy"]
    assert abs(a - b) < 0.02


def test_deterministic_report_flags_diversity():
    cfg = small_config("deterministic", epochs=1)
    data = generate_dataset(cfg.dataset, 0)
    _, report = evaluate(train(cfg, data).model, data)
    assert "q_statistic" not in report.metrics
    assert report.flags


def test_evaluate_rejects_width_mismatch():
    cfg = small_config("deterministic", epochs=0)
    data = generate_dataset(cfg.dataset, 0)
    model = Network.build(cfg, 5, 3)
    with pytest.raises(ValueError, match="width"):
        evaluate(model, data)


# ----------------------------------------------------------- experiment


def _metrics_without_time(path):
    d = json.loads((path / "metrics.json").read_text())
    d["metadata"].pop("timestamp", None)
    return d


def test_run_experiment_artifacts_and_reproducibility(tmp_path):
    cfg_path = tmp_path / "c.txt"
    cfg_path.write_text(config_text(small_config("lpbnn")))
    a = run_experiment(cfg_path, out_dir=tmp_path / "runs")
    b = run_experiment(cfg_path, out_dir=tmp_path / "runs")
    assert a != b
    for name in ("config.txt", "manifest.json", "loss_history.csv", "predictions.csv", "metrics.json",
                 "checkpoints/model.ckpt", "data/train.csv", "data/ood.csv", "data/corrupt_2.csv"):
        assert (a / name).is_file(), name
    assert _metrics_without_time(a) == _metrics_without_time(b)
    assert load_config(a / "config.txt") == load_config(cfg_path)
    assert len((a / "loss_history.csv").read_text().splitlines()) == 3


def test_seed_override_changes_results(tmp_path):
    cfg_path = tmp_path / "c.txt"
    cfg_path.write_text(config_text(small_config("deterministic")))
    a = run_experiment(cfg_path, seed=0, out_dir=tmp_path)
    b = run_experiment(cfg_path, seed=5, out_dir=tmp_path)
    assert _metrics_without_time(a)["metrics"] != _metrics_without_time(b)["metrics"]
    assert json.loads((b / "manifest.json").read_text())["seed"] == 5


def test_checkpoint_reload_reproduces_predictions(tmp_path):
    cfg = small_config("lpbnn")
    out = run_config(cfg, tmp_path)
    model = load_model(out / "checkpoints" / "model.ckpt")
    data = load_dataset_dir(out / "data")
    _, report = evaluate(model, data, cfg.extra_samples, cfg.eval_seed)
    assert report.metrics == json.loads((out / "metrics.json").read_text())["metrics"]


def test_deep_ensemble_writes_member_checkpoints(tmp_path):
    out = run_config(small_config("deepensemble", J=4, epochs=1), tmp_path)
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == [f"member_{j}.ckpt" for j in range(4)]
    assert load_model(out / "checkpoints").J == 4


def test_stage_errors_are_tagged(tmp_path):
    cfg = small_config("deterministic", batch_size=512)
    with pytest.raises(ExperimentError, match=r"^\[train\]"):
        run_config(cfg, tmp_path)
