import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchcert.certify import (Alert, Benign, DefenseConfig, _decide, candidate_windows, certify,
                               certify_batch, certify_oracle, detect, detect_batch, occluded_predict,
                               recover)
from patchcert.model import LayerGeom, LayerSpec, ModelSpec, forward
from patchcert.sin import SINConfig, backmap_region, pruned_forward
from patchcert.windows import Window

from conftest import random_model

F = np.float32


def sum_model(size=8, threshold=0.055, classes=2):
    """1x1 identity conv, relu, mean; class 1 iff mean brightness exceeds ``threshold``."""
    w2 = np.zeros((classes, 1), F)
    w2[1, 0] = 1
    b2 = np.zeros(classes, F)
    b2[0] = threshold
    layers = [LayerSpec("conv", LayerGeom(1, 1, 0), np.ones((1, 1, 1, 1), F), np.zeros(1, F)),
              LayerSpec("relu"), LayerSpec("globalavgpool"), LayerSpec("dense", None, w2, b2)]
    return ModelSpec(layers, (1, size, size), classes, 1)


def constant_model(size=16, label=2, classes=3):
    layers = [LayerSpec("conv", LayerGeom(3, 1, 1), np.zeros((2, 1, 3, 3), F), np.zeros(2, F)),
              LayerSpec("relu"), LayerSpec("globalavgpool"),
              LayerSpec("dense", None, np.zeros((classes, 2), F), np.eye(classes, dtype=F)[label])]
    return ModelSpec(layers, (1, size, size), classes, 1)


def center_image(size=8):
    x = np.zeros((1, size, size), F)
    x[0, 3:5, 3:5] = 1
    return x


# -- occluded prediction ----------------------------------------------------

def test_occluded_predict_rejects_bad_windows():
    m = sum_model()
    cfg = DefenseConfig(patch=2, r=2, sin=SINConfig(1.0))
    with pytest.raises(ValueError):
        occluded_predict(m, center_image(), Window(6, 6, 3, 3), cfg)
    with pytest.raises(ValueError):
        occluded_predict(m, center_image(), (0, 0, 2, 2), cfg)


def test_occlusion_of_center_flips_sum_model():
    m = sum_model()
    cfg = DefenseConfig(patch=2, r=2, sin=SINConfig(1.0))
    x = center_image()
    assert forward(m, x).labels[0] == 1
    assert occluded_predict(m, x, Window(0, 0, 3, 3), cfg) == 1
    assert occluded_predict(m, x, Window(2, 2, 3, 3), cfg) == 0


def _region(model, x, cfg):
    _, mask = pruned_forward(model, x, cfg.sin)
    return backmap_region(model, mask, cfg.sin.layer_for(model))


def test_p1_windows_outside_region_keep_label():
    rng = np.random.default_rng(11)
    checked = 0
    for trial in range(30):
        m = random_model(rng, size=12, pool=bool(trial % 2))
        cfg = DefenseConfig(patch=2, r=2, sin=SINConfig(float(rng.uniform(0.03, 0.15))))
        x = rng.random((3, 12, 12)).astype(F)
        base = int(pruned_forward(m, x, cfg.sin)[0].labels[0])
        region = _region(m, x, cfg)
        for t in range(10):
            for l in range(10):
                w = Window(t, l, 3, 3)
                if not region[w.slices].any():
                    assert occluded_predict(m, x, w, cfg) == base
                    checked += 1
    assert checked > 50


@settings(max_examples=40)
@given(st.integers(0, 10_000))
def test_p2_occlusion_locality(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, size=10, pool=bool(seed % 2))
    cfg = DefenseConfig(patch=2, r=2, sin=SINConfig(float(rng.uniform(0.05, 0.5))))
    x = rng.random((3, 10, 10)).astype(F)
    h, w = (int(v) for v in rng.integers(1, 6, 2))
    win = Window(int(rng.integers(0, 11 - h)), int(rng.integers(0, 11 - w)), h, w)
    y = x.copy()
    y[(slice(None),) + win.slices] = rng.random((3, h, w))
    assert occluded_predict(m, x, win, cfg) == occluded_predict(m, y, win, cfg)


# -- certification ----------------------------------------------------------

def test_constant_model_is_certified():
    m = constant_model()
    cfg = DefenseConfig(patch=3, r=3, sin=SINConfig(0.1))
    x = np.random.default_rng(0).random((1, 16, 16)).astype(F)
    res = certify(m, x, 2, cfg)
    assert res.certified and res.failing_window is None
    assert res.evaluated_count == len(candidate_windows(m, _region(m, x, cfg), cfg))
    assert not certify(m, x, 1, cfg).certified


def test_oracle_count_16x16():
    m = constant_model()
    cfg = DefenseConfig(patch=3, r=3, sin=SINConfig(0.1))
    x = np.random.default_rng(0).random((1, 16, 16)).astype(F)
    res = certify_oracle(m, x, 2, cfg)
    assert res.certified and res.evaluated_count == 144


def test_flip_model_not_certified():
    m = sum_model()
    cfg = DefenseConfig(patch=2, r=2, tau=1.0, sin=SINConfig(1.0))
    res = certify(m, center_image(), 1, cfg)
    assert not res.certified
    assert res.failing_window is not None and res.failing_window.intersects(Window(3, 3, 2, 2))
    assert not certify_oracle(m, center_image(), 1, cfg).certified


def test_wrong_base_label_not_certified():
    res = certify(sum_model(), center_image(), 0, DefenseConfig(patch=2, r=2, sin=SINConfig(1.0)))
    assert not res.certified and res.evaluated_count == 0 and res.pruned_label == 1


def test_filtered_certify_implies_oracle_without_merging():
    rng = np.random.default_rng(21)
    for trial in range(25):
        m = random_model(rng, size=8, classes=2)
        cfg = DefenseConfig(patch=2, r=2, tau=1.0, sin=SINConfig(0.1))
        x = rng.random((3, 8, 8)).astype(F)
        y = int(pruned_forward(m, x, cfg.sin)[0].labels[0])
        a, b = certify(m, x, y, cfg), certify_oracle(m, x, y, cfg)
        assert a.certified == b.certified
        if a.certified:
            assert a.evaluated_count <= b.evaluated_count


def test_batch_matches_single_and_chunking(rng):
    m = random_model(rng, size=8, classes=2)
    xs = rng.random((6, 3, 8, 8)).astype(F)
    cfg = DefenseConfig(patch=2, r=2, sin=SINConfig(0.1))
    ys = [0, 1, 0, 1, 0, 1]
    batch = certify_batch(m, xs, ys, cfg)
    small = certify_batch(m, xs, ys, DefenseConfig(patch=2, r=2, sin=SINConfig(0.1), chunk=3))
    for n in range(6):
        single = certify(m, xs[n], ys[n], cfg)
        assert batch[n].certified == small[n].certified == single.certified
        assert batch[n].failing_window == small[n].failing_window == single.failing_window


# -- detection and recovery -------------------------------------------------

def test_certified_image_detects_benign():
    m = constant_model()
    cfg = DefenseConfig(patch=3, r=3, sin=SINConfig(0.1))
    x = np.random.default_rng(0).random((1, 16, 16)).astype(F)
    out = detect(m, x, cfg)
    assert isinstance(out, Benign) and out.label == 2


def test_flip_model_alerts_and_recovers_with_zero_image():
    m = sum_model()
    cfg = DefenseConfig(patch=2, r=2, tau=1.0, sin=SINConfig(1.0))
    out = detect(m, center_image(), cfg)
    assert isinstance(out, Alert) and out.suspect_windows
    assert all(w.intersects(Window(3, 3, 2, 2)) for w in out.suspect_windows)
    assert out.recovered_label == recover(m, center_image(), out, cfg) == 0


def test_recover_whole_image_is_zero_input_prediction(rng):
    m = random_model(rng, size=8)
    cfg = DefenseConfig(patch=2, r=2, sin=SINConfig(0.2))
    x = rng.random((3, 8, 8)).astype(F)
    zero = pruned_forward(m, np.zeros_like(x), cfg.sin, exclusion=np.ones((8, 8), bool))[0].labels[0]
    assert recover(m, x, Alert([Window(0, 0, 8, 8)]), cfg) == zero


def test_recover_rejects_benign():
    with pytest.raises(ValueError):
        recover(sum_model(), center_image(), Benign(1), DefenseConfig())
    with pytest.raises(ValueError):
        Alert([])


def test_decide_picks_largest_cluster():
    cfg = DefenseConfig()
    a, b, c, far = Window(0, 0, 2, 2), Window(0, 2, 2, 2), Window(1, 1, 2, 2), Window(8, 8, 2, 2)
    out = _decide(0, [(far, 1), (a, 2), (b, 2), (c, 0), (Window(4, 4, 2, 2), 0)], cfg)
    assert isinstance(out, Alert) and out.strong and out.suspect_windows == [a, b]
    assert isinstance(_decide(0, [(a, 0), (b, 0)], cfg), Benign)


def test_decide_majority_fallback():
    cfg = DefenseConfig(alert_cluster_min=3)
    wins = [Window(0, 0, 2, 2), Window(0, 5, 2, 2), Window(5, 0, 2, 2)]
    out = _decide(0, [(w, 1) for w in wins], cfg)
    assert isinstance(out, Alert) and not out.strong
    assert isinstance(_decide(0, [(wins[0], 1), (wins[1], 0), (wins[2], 0)], cfg), Benign)


def test_detect_batch_deterministic(rng):
    m = random_model(rng, size=8, classes=2)
    xs = rng.random((5, 3, 8, 8)).astype(F)
    cfg = DefenseConfig(patch=2, r=2, sin=SINConfig(0.1))
    a = detect_batch(m, xs, cfg)
    b = [detect(m, x, DefenseConfig(patch=2, r=2, sin=SINConfig(0.1), chunk=2)) for x in xs[::-1]][::-1]
    for u, v in zip(a, b):
        assert type(u) is type(v)
        if u.is_alert:
            assert (u.suspect_windows, u.recovered_label) == (v.suspect_windows, v.recovered_label)
        else:
            assert u.label == v.label
