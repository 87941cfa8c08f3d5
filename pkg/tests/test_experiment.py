import csv
import json

import numpy as np
import pytest

from henselfl.data import load_mnist, read_pgm
from henselfl.exceptions import ConfigError
from henselfl.experiment import (GRID_EPSILONS, REFERENCE_ACCURACY, SUMMARY_HEADER, ExperimentConfig, RunReport,
                                 dump_samples, grid_configs, prepare, run_grid, run_scenario)

TINY = dict(conv_channels=(2, 3), hidden=(8, 6), n_clients=2, rounds=2, batch_size=8)


def tiny_config(mnist_dir, tmp_path, **overrides):
    settings = dict(TINY, data_dir=str(mnist_dir), out_dir=str(tmp_path / "runs"))
    settings.update(overrides)
    return ExperimentConfig(**settings)


@pytest.mark.parametrize("scenario, dimension, percent, base", [(1, 28, 100.0, 256), (2, 14, 25.0, 256),
                                                                (3, 7, 6.25, 16)])
def test_scenario_geometry(scenario, dimension, percent, base):
    config = ExperimentConfig(scenario=scenario, data_dir="x")
    assert config.dimension == dimension
    assert config.data_size_percent == percent
    assert config.base == base
    assert config.architecture().side == dimension


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(scenario=4, data_dir="x")
    with pytest.raises(ConfigError):
        ExperimentConfig(epsilon=0.0, data_dir="x")
    with pytest.raises(ConfigError):
        ExperimentConfig(n_clients=0, data_dir="x")
    with pytest.raises(ConfigError):
        ExperimentConfig(base=1, data_dir="x")


def test_config_hash_is_stable_and_sensitive():
    a = ExperimentConfig(data_dir="x")
    assert a.config_hash() == ExperimentConfig(data_dir="x").config_hash()
    assert a.config_hash() != ExperimentConfig(data_dir="x", lr=0.02).config_hash()
    # training-only settings share the prepared data
    assert a.preparation_hash() == ExperimentConfig(data_dir="x", lr=0.02).preparation_hash()
    assert a.preparation_hash() != ExperimentConfig(data_dir="x", epsilon=1.5).preparation_hash()


def test_fast_mode_settings():
    config = ExperimentConfig.fast(data_dir="x")
    assert (config.train_limit, config.test_limit, config.rounds) == (8000, 2000, 5)
    assert ExperimentConfig.fast(data_dir="x", rounds=3).rounds == 3


def test_grid_order():
    cells = [(c.scenario, c.epsilon) for c in grid_configs(ExperimentConfig(data_dir="x"))]
    assert cells == [(s, e) for s in (1, 2, 3) for e in GRID_EPSILONS]
    assert GRID_EPSILONS == (2.0, 1.5, 1.25)


def test_missing_data_directory_names_path(tmp_path):
    config = ExperimentConfig(data_dir=str(tmp_path / "nowhere"), out_dir=str(tmp_path))
    with pytest.raises(FileNotFoundError, match="nowhere"):
        run_scenario(config)


def test_run_scenario_outputs(mnist_dir, tmp_path):
    config = tiny_config(mnist_dir, tmp_path, scenario=3)
    report = run_scenario(config)
    run_dir = config.run_dir
    assert {p.name for p in run_dir.iterdir()} == {"metrics.csv", "manifest.txt", "report.json", "model.ckpt"}
    rows = list(csv.DictReader((run_dir / "metrics.csv").open()))
    assert [int(r["round"]) for r in rows] == [1, 2]
    assert len(rows[0]["client_grad_norms"].split(";")) == 2
    assert report.train_images == 48 and report.test_images == 16
    assert report.leakage == 2.0 and report.baseline_leakage == 4.0
    assert report.variance == 0.25
    assert len(report.accuracy_per_round) == 2
    assert 0.0 <= report.final_accuracy <= 1.0
    assert RunReport.from_json((run_dir / "report.json").read_text()) == report
    assert "config_hash = " + config.config_hash() in (run_dir / "manifest.txt").read_text()


def test_reports_are_byte_identical_across_runs(mnist_dir, tmp_path):
    first = run_scenario(tiny_config(mnist_dir, tmp_path / "a", scenario=2)).to_json()
    second = run_scenario(tiny_config(mnist_dir, tmp_path / "b", scenario=2), cache=False).to_json()
    assert first == second
    assert "time" not in first


def test_cached_preparation_is_reused(mnist_dir, tmp_path):
    config = tiny_config(mnist_dir, tmp_path, scenario=3)
    clients, test_set = prepare(config)
    assert (config.cache_dir / "client0.npz").exists() and (config.cache_dir / "test_clean.npz").exists()
    again, test_again = prepare(config)
    for a, b in zip(clients, again):
        assert np.array_equal(a.private.images, b.private.images)
        assert np.array_equal(a.indices, b.indices)
    assert np.array_equal(test_set.images, test_again.images)


def test_prepare_counts_one_draw_per_pixel(mnist_dir, tmp_path):
    config = tiny_config(mnist_dir, tmp_path, scenario=2)
    clients, test_set = prepare(config, cache=False)
    assert sum(c.private.noise_draws for c in clients) == 48 * 14 * 14
    assert sorted(np.concatenate([c.indices for c in clients]).tolist()) == list(range(48))


def test_run_grid_summary(mnist_dir, tmp_path):
    base = tiny_config(mnist_dir, tmp_path, rounds=1)
    reports = run_grid(base)
    assert len(reports) == 9
    rows = list(csv.reader((tmp_path / "runs" / "grid_summary.csv").open()))
    assert rows[0] == SUMMARY_HEADER
    assert [(int(r[0]), float(r[3])) for r in rows[1:]] == [(s, e) for s in (1, 2, 3) for e in GRID_EPSILONS]
    col = SUMMARY_HEADER.index("reference_accuracy")
    assert [r[col] for r in rows[1:]] == [REFERENCE_ACCURACY[(int(r[0]), float(r[3]))] for r in rows[1:]]
    variance = [float(r[SUMMARY_HEADER.index("variance")]) for r in rows[1:4]]
    assert variance == pytest.approx([0.25, 1 / 2.25, 0.64])
    per_round = list(csv.reader((tmp_path / "runs" / "grid_accuracy.csv").open()))
    assert len(per_round) == 1 + 9


def test_dump_samples_zero_count(mnist_dir, tmp_path):
    assert dump_samples(tiny_config(mnist_dir, tmp_path), 0) == []
    assert not (tmp_path / "runs").exists()


def test_dump_samples_scenario3_is_7x7(mnist_dir, tmp_path):
    paths = dump_samples(tiny_config(mnist_dir, tmp_path, scenario=3), 3)
    assert len(paths) == 6
    assert all(read_pgm(p).shape == (7, 7) for p in paths)


def test_clean_dump_at_full_resolution_matches_source(mnist_dir, tmp_path):
    paths = dump_samples(tiny_config(mnist_dir, tmp_path, scenario=1), 4)
    source = load_mnist(mnist_dir, "train", 4).images
    clean = [p for p in paths if p.name.endswith("_clean.pgm")]
    for i, path in enumerate(sorted(clean)):
        assert np.array_equal(read_pgm(path), source[i])
    noisy = read_pgm(next(p for p in paths if p.name.endswith("_noisy.pgm")))
    assert noisy.shape == (28, 28)


def test_report_json_sorted_keys(mnist_dir, tmp_path):
    report = run_scenario(tiny_config(mnist_dir, tmp_path, scenario=3, rounds=0))
    data = json.loads(report.to_json())
    assert list(data) == sorted(data)
    assert data["accuracy_per_round"] == [] and 0.0 <= data["final_accuracy"] <= 1.0


def test_evaluation_set_is_compressed_only_by_default(mnist_dir, tmp_path):
    config = tiny_config(mnist_dir, tmp_path, scenario=3)
    report = run_scenario(config)
    assert report.test_treatment == "compressed"
    assert report.final_accuracy == report.clean_test_accuracy
    _, test_set = prepare(config)
    assert test_set.noise_draws == 0
    assert 0.0 <= test_set.images.min() and test_set.images.max() <= 1.0


def test_noise_test_switches_evaluation_set(mnist_dir, tmp_path):
    config = tiny_config(mnist_dir, tmp_path, scenario=3, noise_test=True)
    report = run_scenario(config)
    assert report.test_treatment == "compressed+noised"
    assert report.final_accuracy == report.noisy_test_accuracy
    _, test_set = prepare(config)
    assert test_set.noise_draws == 16 * 49
    assert config.config_hash() != tiny_config(mnist_dir, tmp_path, scenario=3).config_hash()
