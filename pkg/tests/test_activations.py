import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from backdoor_lab import activations as A
from backdoor_lab import model as M
from backdoor_lab.data import InputSetting, make_original_trigger
from backdoor_lab.errors import EvaluationError

nonneg_maps = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 4), st.integers(1, 4)),
                     elements=st.floats(0, 1e3))


def test_norm_examples():
    z = np.zeros((3, 2, 2))
    for p in A.ALL_NORMS:
        assert np.array_equal(A.neuron_norms(z, p), [0, 0, 0])
    single = np.zeros((1, 3, 3))
    single[0, 1, 2] = 2.5
    for p in A.ALL_NORMS:
        assert A.neuron_norms(single, p)[0] == 2.5
    m = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    assert A.neuron_norms(m, "L1")[0] == 10
    assert A.neuron_norms(m, "L2")[0] == pytest.approx(np.sqrt(30))
    assert A.neuron_norms(m, "L2")[0] == pytest.approx(5.4772, abs=1e-4)
    assert A.neuron_norms(m, "Linf")[0] == 4


def test_norms_match_loops():
    rng = np.random.default_rng(0)
    maps = rng.random((2, 3, 4, 5))
    for n in range(2):
        for k in range(3):
            vals = [v for row in maps[n, k] for v in row]
            assert A.neuron_norms(maps, "L1")[n, k] == pytest.approx(sum(vals))
            assert A.neuron_norms(maps, "L2")[n, k] == pytest.approx(sum(v * v for v in vals) ** 0.5)
            assert A.neuron_norms(maps, "Linf")[n, k] == max(vals)


@given(nonneg_maps)
def test_norm_ordering(maps):
    l1, l2, li = (A.neuron_norms(maps, p) for p in A.ALL_NORMS)
    assert np.all(li <= l2 * (1 + 1e-12) + 1e-12)
    assert np.all(l2 <= l1 * (1 + 1e-12) + 1e-12)


@given(nonneg_maps, st.floats(0, 100))
def test_norm_homogeneity(maps, c):
    for p in A.ALL_NORMS:
        np.testing.assert_allclose(A.neuron_norms(maps * c, p), c * A.neuron_norms(maps, p),
                                   rtol=1e-9, atol=1e-9)


def fake_stats(clean_max, trig_max):
    out = []
    for p in A.ALL_NORMS:
        for s, mx in ((InputSetting.CLEAN, clean_max), (InputSetting.CLEAN_ORI, trig_max)):
            norms = np.full((2, 32), mx[p] / 2)
            norms[0, 0] = mx[p]
            out.append(A.ActivationStats(s, p, norms, float(mx[p]), np.linspace(0, 1, 51), np.zeros(50)))
    return out


def test_separation_identical_stats_gives_ones():
    mx = {p: 3.0 for p in A.ALL_NORMS}
    r = A.separation(fake_stats(mx, mx))
    assert all(r.ratio[p.value]["clean_ori"] == 1.0 for p in A.ALL_NORMS)
    assert r.winners["clean_ori"] == ["L1", "L2", "Linf"]


def test_separation_doubled_is_explicit_tie():
    clean = {A.Norm.L1: 10.0, A.Norm.L2: 4.0, A.Norm.LINF: 2.0}
    r = A.separation(fake_stats(clean, {p: 2 * v for p, v in clean.items()}))
    assert all(r.ratio[p.value]["clean_ori"] == 2.0 for p in A.ALL_NORMS)
    assert len(r.winners["clean_ori"]) == 3
    assert json.loads(r.to_json())["channels"] == 32


def test_separation_unique_winner_and_zero_clean():
    clean = {A.Norm.L1: 10.0, A.Norm.L2: 4.0, A.Norm.LINF: 2.0}
    trig = {A.Norm.L1: 11.0, A.Norm.L2: 5.0, A.Norm.LINF: 5.0}
    r = A.separation(fake_stats(clean, trig))
    assert r.winners["clean_ori"] == ["Linf"]
    zero = A.separation(fake_stats({p: 0.0 for p in A.ALL_NORMS}, trig))
    assert zero.ratio["L1"]["clean_ori"] is None and zero.winners["clean_ori"] == []


@pytest.fixture(scope="module")
def toy():
    p = M.init_params(4, (1, 12, 12), 3)
    rng = np.random.default_rng(3)
    p = replace(p, conv3_b=rng.uniform(-0.05, 0.1, 32).astype(np.float32))
    images = rng.random((10, 1, 12, 12)).astype(np.float32)
    return p, images, make_original_trigger((12, 12), 3, 1, 2)


def test_collect_stats_shapes_and_shared_edges(toy):
    p, images, trig = toy
    settings_ = [InputSetting.CLEAN, InputSetting.CLEAN_ORI]
    stats = A.collect_stats(p, images, settings_, trig, None, n_images=8)
    assert len(stats) == 6
    for st_ in stats:
        assert st_.norms.shape == (8, 32)
        assert st_.counts.sum() == 8 * 32
        assert st_.max_value == st_.norms.max()
        assert len(st_.bin_edges) == A.HIST_BINS + 1
    by_p = {}
    for st_ in stats:
        by_p.setdefault(st_.p, []).append(st_.bin_edges)
    for edges in by_p.values():
        assert np.array_equal(edges[0], edges[1])
    csv = A.histogram_csv(stats)
    assert csv.splitlines()[0] == "p,setting,bin_left,bin_right,count"
    assert len(csv.splitlines()) == 1 + 6 * A.HIST_BINS


def test_collect_stats_errors(toy):
    p, images, trig = toy
    with pytest.raises(EvaluationError):
        A.collect_stats(p, images, [InputSetting.CLEAN], n_images=11)
    with pytest.raises(EvaluationError):
        A.collect_stats(p, images, [InputSetting.CLEAN], n_images=0)


def test_activation_grid_layout(toy):
    p, images, _ = toy
    grid = A.activation_grid(p, images[0])
    assert grid.shape == (4 * 3 + 3, 8 * 3 + 7)
    maps = M.forward(p, images[0]).final_conv_maps
    tile = grid[0:3, 4:7]  # channel 1
    peak = maps[1].max()
    expected = maps[1] / peak if peak > 0 else maps[1]
    np.testing.assert_allclose(tile, expected, rtol=1e-6)
    assert np.all(grid[3, :] == 1.0) and np.all(grid[:, 3] == 1.0)
    assert grid[0:3, :].max() <= 1.0


def test_activation_grid_zero_maps_stay_zero(toy):
    p, images, _ = toy
    grid = A.activation_grid(p.with_mask(np.zeros(32, bool)), images[0])
    assert not grid[0:3, 0:3].any()
