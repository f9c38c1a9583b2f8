import numpy as np
import pytest
from hypothesis import given, strategies as st

from patchcert.errors import ConfigError
from patchcert.model import LayerGeom, build_model, forward
from patchcert.sin import (SINConfig, backmap_region, backmap_regions, channel_sum, compute_sin_mask,
                           exclusion_set, pruned_forward, pruned_forward_batch, receptive_field,
                           rf_table, topk_masks, winner_count)
from patchcert.windows import Window

from conftest import linear_stack, perturbation_influence, random_geoms, random_model


# -- channel sum ------------------------------------------------------------

def test_channel_sum_single_channel_identity(rng):
    m = rng.random((1, 4, 5))
    assert np.array_equal(channel_sum(m), m[0])


def test_channel_sum_symmetric_example():
    m = np.array([[[1, 2], [3, 4]], [[4, 3], [2, 1]]], dtype=np.float32)
    assert np.array_equal(channel_sum(m), np.full((2, 2), 5, np.float32))


def test_channel_sum_matches_loop_oracle(rng):
    m = rng.standard_normal((8, 6, 7)).astype(np.float32)
    ref = np.zeros((6, 7), np.float32)
    for r in range(6):
        for c in range(7):
            acc = np.float32(m[0, r, c])
            for ch in range(1, 8):
                acc = np.float32(acc + m[ch, r, c])
            ref[r, c] = acc
    assert np.array_equal(channel_sum(m), ref)


def test_channel_sum_from_trace_rejects_flat_layer(rng):
    model = random_model(rng)
    tr = forward(model, rng.random((1, 3, 8, 8)), trace=True)
    assert channel_sum(tr, 1).shape == (1, 8, 8)
    with pytest.raises(ConfigError):
        channel_sum(tr, 5)


# -- winner masks -----------------------------------------------------------

def test_mask_examples():
    cmap = np.array([[1, 5], [3, 2]], dtype=np.float32)
    assert compute_sin_mask(cmap, 0.5).winners == [(0, 1), (1, 0)]
    assert compute_sin_mask(cmap, 1.0).count == 4
    assert compute_sin_mask(cmap, 0.25, exclusion={(0, 1)}).winners == [(1, 0)]


def test_mask_ties_go_to_lexicographically_first():
    assert compute_sin_mask(np.zeros((3, 3)), 0.3).winners == [(0, 0), (0, 1), (0, 2)]


def test_mask_rate_validated():
    with pytest.raises(ConfigError):
        compute_sin_mask(np.zeros((2, 2)), 0.0)
    with pytest.raises(ConfigError):
        SINConfig(1.5)


def test_winner_count_rounding():
    assert winner_count(0.2, 25) == 5
    assert winner_count(0.1, 100) == 10
    assert winner_count(0.01, 10) == 1
    assert winner_count(0.34, 3) == 2


@given(st.integers(1, 7), st.integers(1, 7), st.floats(0.01, 1.0), st.integers(0, 10_000))
def test_mask_cardinality_and_topk_oracle(h, w, rate, seed):
    rng = np.random.default_rng(seed)
    cmap = rng.integers(0, 4, (h, w)).astype(np.float32)  # coarse values force ties
    excl = rng.random((h, w)) < 0.3
    mask = compute_sin_mask(cmap, rate, excl)
    k = winner_count(rate, h * w)
    cands = sorted(((-cmap[r, c], r, c) for r in range(h) for c in range(w) if not excl[r, c]))
    expect = sorted((r, c) for _, r, c in cands[:k])
    assert mask.winners == expect
    assert mask.count == min(k, len(cands))
    assert not (mask.grid & excl).any()


@given(st.floats(1e-3, 1e3), st.integers(0, 10_000))
def test_positive_scaling_keeps_winners(scale, seed):
    rng = np.random.default_rng(seed)
    cmap = rng.random((6, 6))
    assert compute_sin_mask(cmap, 0.2).winners == compute_sin_mask(cmap * scale, 0.2).winners


def test_batched_topk_matches_single(rng):
    maps = rng.random((9, 5, 5)).astype(np.float32)
    excl = rng.random((9, 5, 5)) < 0.4
    got = topk_masks(maps, 6, excl)
    for n in range(9):
        assert np.array_equal(got[n], compute_sin_mask(maps[n], 6 / 25, excl[n]).grid)


# -- receptive fields -------------------------------------------------------

def check_cover(got, ref, geoms, exact=True):
    if exact:
        assert np.array_equal(got, ref), geoms
    else:
        assert not (ref & ~got).any(), geoms


def test_receptive_field_examples():
    assert receptive_field((0, 0), [LayerGeom(3, 1, 1)], [(8, 8)]) == Window(0, 0, 2, 2)
    assert receptive_field((2, 2), [LayerGeom(3, 2, 1)], [(8, 8)]) == Window(3, 3, 3, 3)
    assert receptive_field((4, 5), [LayerGeom(1, 1, 0)], [(8, 8)]) == Window(4, 5, 1, 1)


def test_receptive_field_skips_pointwise_layers():
    geoms = [LayerGeom(3, 1, 1), None, LayerGeom(2, 2, 0)]
    assert receptive_field((1, 1), geoms, [(8, 8), (8, 8), (8, 8)]) == Window(1, 1, 4, 4)


def test_rf_table_matches_perturbation_oracle():
    rng = np.random.default_rng(3)
    for _ in range(25):
        geoms, size = random_geoms(rng)
        m = linear_stack(rng, geoms, size)
        infl = perturbation_influence(m)
        table = rf_table(m, m.superficial_layer)
        for r in range(infl.shape[0]):
            for c in range(infl.shape[1]):
                r0, c0, r1, c1 = table[r, c]
                box = np.zeros(infl.shape[2:], bool)
                box[r0:r1 + 1, c0:c1 + 1] = True
                # with kernel < stride the true field has holes and the box is a superset
                check_cover(box, infl[r, c], geoms, all(g.kernel >= g.stride for g in geoms))


def test_backmap_single_and_disjoint_winners():
    m = linear_stack(np.random.default_rng(0), [LayerGeom(3, 1, 1)], 9)
    grid = np.zeros((9, 9), bool)
    grid[4, 4] = True
    region = backmap_region(m, grid)
    assert region.sum() == 9 and region[3:6, 3:6].all()
    grid[0, 8] = True
    assert backmap_region(m, grid).sum() == 9 + 4


def test_backmap_random_masks_match_oracle():
    rng = np.random.default_rng(4)
    for _ in range(10):
        geoms, size = random_geoms(rng)
        m = linear_stack(rng, geoms, size)
        infl = perturbation_influence(m)
        masks = rng.random((20,) + infl.shape[:2]) < 0.3
        got = backmap_regions(m, masks, m.superficial_layer)
        for mask, region in zip(masks, got):
            check_cover(region, infl[mask].any(axis=0), geoms)


def test_exclusion_set_matches_oracle():
    rng = np.random.default_rng(5)
    for _ in range(10):
        geoms, size = random_geoms(rng)
        m = linear_stack(rng, geoms, size)
        infl = perturbation_influence(m)
        for _ in range(10):
            hh, ww = rng.integers(1, size + 1, 2)
            t, l = rng.integers(0, size - hh + 1), rng.integers(0, size - ww + 1)
            win = Window(int(t), int(l), int(hh), int(ww))
            ref = infl[:, :, t:t + hh, l:l + ww].any(axis=(2, 3))
            check_cover(exclusion_set(m, win), ref, geoms)


# -- pruned inference -------------------------------------------------------

def test_full_rate_equals_plain_forward(rng):
    m = build_model(seed=2)
    x = rng.random((5, 3, 16, 16)).astype(np.float32)
    tr, masks = pruned_forward_batch(m, x, SINConfig(1.0))
    assert masks.all()
    assert np.array_equal(tr.logits, forward(m, x).logits)


def test_full_exclusion_gives_zero_layer_output(rng):
    m = build_model(seed=2)
    x = rng.random((3, 16, 16)).astype(np.float32)
    tr, mask = pruned_forward(m, x, SINConfig(0.2), exclusion=np.ones((16, 16), bool), trace=True)
    assert mask.count == 0
    zero_gate = forward(m, x, gate=lambda h: np.zeros_like(h), gate_layer=1).logits
    assert np.array_equal(tr.logits, zero_gate)
    assert not tr.outputs[1].any()


def test_pruned_layer_is_masked(rng):
    m = build_model(seed=2)
    x = rng.random((3, 16, 16)).astype(np.float32)
    tr, mask = pruned_forward(m, x, SINConfig(0.1), trace=True)
    assert mask.count == winner_count(0.1, 256)
    assert not tr.outputs[1][0][:, ~mask.grid].any()


def test_pixels_outside_region_do_not_matter():
    rng = np.random.default_rng(9)
    for trial in range(40):
        m = random_model(rng, size=10, pool=bool(trial % 2))
        cfg = SINConfig(float(rng.uniform(0.05, 0.3)))
        x = rng.random((3, 10, 10)).astype(np.float32)
        tr, mask = pruned_forward(m, x, cfg)
        outside = ~backmap_region(m, mask, 1)
        y = x.copy()
        y[:, outside] = rng.random((3, int(outside.sum())))
        tr2, mask2 = pruned_forward(m, y, cfg)
        # the winners may only change if an outside pixel reaches their competitors
        if mask2.winners == mask.winners:
            assert np.array_equal(tr.logits, tr2.logits)


def test_superficial_layer_override(rng):
    m = random_model(rng, pool=True)
    assert SINConfig(0.2, layer=2).layer_for(m) == 2
    with pytest.raises(ConfigError):
        SINConfig(0.2, layer=6).layer_for(m)
