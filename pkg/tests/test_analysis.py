import csv
import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from patchcert.analysis import (ANALYSIS_COLUMNS, default_bandwidth, default_top_n, deviation,
                                mean_shift, sin_stats, stability_experiment, winner_points,
                                write_rows)
from patchcert.errors import ConfigError
from patchcert.model import LayerGeom, LayerSpec, ModelSpec, forward
from patchcert.sin import SINConfig

from conftest import random_model


def test_identical_points_one_cluster():
    st_ = mean_shift(np.full((7, 2), 3.0), 1.0)
    assert st_.cluster_count == 1 and st_.max_deviation == 0.0
    assert np.array_equal(st_.centers[0], [3.0, 3.0])


def test_single_point():
    st_ = mean_shift([[2.0, 5.0]], 1.0)
    assert st_.cluster_count == 1 and st_.deviations[0] == 0.0
    assert np.array_equal(st_.centers[0], [2.0, 5.0])


def test_two_blobs():
    rng = np.random.default_rng(0)
    a = rng.normal([0, 0], 0.1, (20, 2))
    b = rng.normal([10, 10], 0.1, (15, 2))
    pts = np.concatenate([a, b])
    st_ = mean_shift(pts, 1.0)
    assert st_.cluster_count == 2
    assert np.abs(st_.centers[0] - a.mean(0)).max() < 0.5
    assert np.abs(st_.centers[1] - b.mean(0)).max() < 0.5
    # nearest-centre assignment oracle
    d = ((pts[:, None] - st_.centers[None]) ** 2).sum(-1)
    assert np.array_equal(d.argmin(1), st_.assignment)
    assert st_.largest() == 0


def test_square_deviation():
    assert deviation([(0, 0), (0, 1), (1, 0), (1, 1)]) == pytest.approx(np.sqrt(0.5))
    st_ = mean_shift([(0, 0), (0, 1), (1, 0), (1, 1)], 1.6)
    assert st_.cluster_count == 1
    assert np.allclose(st_.centers[0], [0.5, 0.5])
    assert st_.deviations[0] == pytest.approx(0.7071067811865476)


@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), min_size=1, max_size=40))
def test_deviation_two_pass_oracle(pts):
    n = len(pts)
    cx = sum(p[0] for p in pts) / n
    cy = sum(p[1] for p in pts) / n
    ref = (sum((p[0] - cx) ** 2 + (p[1] - cy) ** 2 for p in pts) / n) ** 0.5
    assert deviation(pts) == pytest.approx(ref, abs=1e-6)


@given(st.integers(0, 10_000), st.integers(-20, 20), st.integers(-20, 20))
def test_translation_equivariance(seed, dr, dc):
    rng = np.random.default_rng(seed)
    pts = rng.integers(0, 12, (15, 2)).astype(float)
    a = mean_shift(pts, 1.6)
    b = mean_shift(pts + [dr, dc], 1.6)
    assert a.cluster_count == b.cluster_count
    assert np.allclose(a.centers + [dr, dc], b.centers, atol=1e-9)
    assert np.allclose(a.deviations, b.deviations, atol=1e-9)


def test_agrees_with_sklearn_on_separated_blobs():
    sk = pytest.importorskip("sklearn.cluster")
    rng = np.random.default_rng(5)
    centers = np.array([[0, 0], [8, 0], [0, 8], [8, 8]], float)
    pts = np.concatenate([rng.normal(c, 0.3, (12, 2)) for c in centers])
    ours = mean_shift(pts, 2.0)
    ref = sk.MeanShift(bandwidth=2.0).fit(pts)
    assert ours.cluster_count == len(ref.cluster_centers_)
    ours_c = sorted(map(tuple, np.round(ours.centers, 1)))
    ref_c = sorted(map(tuple, np.round(ref.cluster_centers_, 1)))
    assert np.allclose(ours_c, ref_c, atol=0.2)


def test_mean_shift_validation():
    with pytest.raises(ConfigError):
        mean_shift(np.zeros((0, 2)), 1.0)
    with pytest.raises(ConfigError):
        mean_shift([[0, 0]], 0.0)


def test_defaults_scale_with_grid():
    assert default_top_n(112, 112) == 200
    assert default_top_n(16, 16) == 4
    assert default_top_n(2, 2) == 1
    assert default_bandwidth(16, 20) == pytest.approx(1.6)


def test_winner_points_and_stats(rng):
    m = random_model(rng, size=8)
    xs = rng.random((3, 3, 8, 8)).astype(np.float32)
    pts, cmap = winner_points(m, xs, SINConfig(0.1), top_n=5)
    assert pts.shape == (3, 5, 2)
    for n in range(3):
        chosen = cmap[n][pts[n][:, 0], pts[n][:, 1]]
        assert chosen.min() >= np.sort(cmap[n].ravel())[-5]
    st_ = sin_stats(m, xs[0], SINConfig(0.1), top_n=5, bandwidth=2.0)
    assert st_.sizes.sum() == 5
    with pytest.raises(ConfigError):
        winner_points(m, xs, SINConfig(0.1), top_n=65)


def _zero_model():
    """Superficial map is identically zero; the dense bias fixes the label to 0."""
    layers = [LayerSpec("conv", LayerGeom(1, 1, 0), np.zeros((1, 1, 1, 1), np.float32), np.zeros(1, np.float32)),
              LayerSpec("relu"), LayerSpec("globalavgpool"),
              LayerSpec("dense", None, np.zeros((2, 1), np.float32), np.array([1, 0], np.float32))]
    return ModelSpec(layers, (1, 6, 6), 2, 1)


def test_stability_skips_empty_maps(caplog):
    xs = np.random.default_rng(0).random((4, 1, 6, 6)).astype(np.float32)
    with caplog.at_level(logging.WARNING):
        res = stability_experiment(_zero_model(), xs, np.zeros(4, int), SINConfig(0.1), patched=xs)
    assert res["skipped"] == 8
    assert "empty superficial map" in caplog.text
    assert res["rows"] == []


def test_stability_rows_and_csv(rng, tmp_path):
    m = random_model(rng, size=8, classes=2)
    xs = rng.random((10, 3, 8, 8)).astype(np.float32)
    labels = forward(m, xs).labels
    res = stability_experiment(m, xs, labels, SINConfig(0.1), patched=xs, top_n=4, bandwidth=1.6)
    assert res["benign_before"] == 1.0
    assert res["benign_drop"] == pytest.approx(res["patched_before"] - res["patched_after"])
    assert len(res["rows"]) == 20
    path = tmp_path / "a.csv"
    write_rows(path, res["rows"], ["command analyze"])
    lines = path.read_text().splitlines()
    assert lines[0] == "# command analyze"
    rows = list(csv.DictReader(lines[1:]))
    assert list(rows[0]) == ANALYSIS_COLUMNS and len(rows) == 20
