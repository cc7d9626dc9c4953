import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradrecon import tensor as T
from gradrecon.errors import ShapeError
from gradrecon.gradients import (FLATTEN_VERSION, FullGradient, GradientPairDataset, LoraGradient,
                                 adapter_hash, average_views, collect_averaged_pairs, collect_pairs, full_gradient,
                                 lora_gradient)
from gradrecon.model import attach_lora, loss_ce, merge_lora, proj_name

from conftest import tiny_model

UNIFORM = np.full(12, 1 / 12)


def test_grad_a_is_exactly_zero_at_init():
    p = tiny_model(dtype=np.float32)
    ads = attach_lora(p, 2)
    g = lora_gradient(p, ads, [1, 2, 3], UNIFORM)
    for ga, gb in g.grads.values():
        assert np.all(ga == 0)
        assert np.any(gb != 0)


def test_grad_b_is_a_transpose_times_full_gradient():
    p = tiny_model()
    ads = attach_lora(p, 2)
    for a in ads:
        a.A = a.A.astype(np.float64)
        a.B = a.B.astype(np.float64)
    lg = lora_gradient(p, ads, [1, 2, 3], UNIFORM)
    fg = full_gradient(p, [1, 2, 3], UNIFORM, [a.key for a in ads])
    for a in ads:
        np.testing.assert_allclose(lg.grads[a.key][1], a.A.T @ fg.grads[a.key], atol=1e-12)


def test_full_gradient_matches_finite_differences():
    p = tiny_model()
    x, key = [3, 1, 4], (1, "v")
    g = full_gradient(p, x, UNIFORM, [key]).grads[key]
    name = proj_name(*key)

    def f(w):
        q = p.copy()
        q.tensors[name] = w
        return loss_ce(q, None, x, UNIFORM)

    num = T.finite_diff_grad(f, p[name], eps=1e-6)
    assert T.grad_close(g, num, 1e-7, 1e-5).all()


def test_full_gradient_is_linear_in_loss_scale():
    p = tiny_model()
    keys = [(0, "q")]
    g1 = full_gradient(p, [1, 2], UNIFORM, keys).grads[keys[0]]
    g3 = full_gradient(p, [1, 2], UNIFORM, keys, scale=3.0).grads[keys[0]]
    np.testing.assert_allclose(g3, 3 * g1, rtol=1e-12, atol=1e-15)


def test_full_gradient_merges_adapters():
    p = tiny_model()
    ads = attach_lora(p, 2)
    ads[0].B = np.ones_like(ads[0].B)
    keys = [(0, "q")]
    a = full_gradient(p, [1, 2], UNIFORM, keys, adapters=ads).grads[keys[0]]
    b = full_gradient(merge_lora(p, ads), [1, 2], UNIFORM, keys).grads[keys[0]]
    np.testing.assert_array_equal(a, b)


def _lg(rng, keys=((0, "q"), (1, "q")), d=4, r=2):
    return LoraGradient({k: (rng.normal(size=(d, r)).astype(np.float32),
                             rng.normal(size=(r, d)).astype(np.float32)) for k in keys})


def test_average_views_single_and_mean(rng):
    g = _lg(rng)
    one = average_views([g])
    assert one.n_views == 1
    for k in g.grads:
        np.testing.assert_array_equal(one.grads[k][0], g.grads[k][0])
    h = _lg(rng)
    avg = average_views([g, h])
    np.testing.assert_allclose(avg.grads[(0, "q")][1], (g.grads[(0, "q")][1] + h.grads[(0, "q")][1]) / 2,
                               rtol=1e-6)
    with pytest.raises(ShapeError):
        average_views([g, _lg(rng, keys=((0, "v"),))])
    with pytest.raises(ValueError):
        average_views([])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 1000))
def test_flatten_round_trip(d, r, seed):
    rng = np.random.default_rng(seed)
    keys = [(1, "v"), (0, "q"), (0, "v")]
    g = _lg(rng, keys, d, r)
    back = LoraGradient.unflatten(g.flatten(), keys, d, r)
    np.testing.assert_array_equal(back.flatten(), g.flatten())
    f = FullGradient({k: rng.normal(size=(d, d)).astype(np.float32) for k in keys})
    np.testing.assert_array_equal(FullGradient.unflatten(f.flatten(), keys, d).flatten(), f.flatten())


def test_flatten_order_is_layer_then_projection_then_a_b():
    d, r = 2, 1
    g = LoraGradient({(1, "q"): (np.full((d, r), 3.0), np.full((r, d), 4.0)),
                      (0, "v"): (np.full((d, r), 2.0), np.full((r, d), 5.0)),
                      (0, "q"): (np.full((d, r), 0.0), np.full((r, d), 1.0))})
    np.testing.assert_array_equal(g.flatten(), [0, 0, 1, 1, 2, 2, 5, 5, 3, 3, 4, 4])


def test_adapter_hash_ignores_depth_but_not_basis():
    p2, p4 = tiny_model(layers=2), tiny_model(layers=4, seed=3)
    assert adapter_hash(attach_lora(p2, 2)) == adapter_hash(attach_lora(p4, 2))
    assert adapter_hash(attach_lora(p2, 2)) != adapter_hash(attach_lora(p2, 2, seed=1))


def test_collect_pairs_and_round_trip(tmp_path):
    p = tiny_model(dtype=np.float32)
    ads = attach_lora(p, 2)
    ex = [([1, 2, 3], UNIFORM), ([4, 5], UNIFORM), ([6], UNIFORM)]
    ds = collect_pairs(p, ads, ex, 2)
    assert len(ds) == 2 and ds.header["flatten_version"] == FLATTEN_VERSION
    assert ds.header["config_hash"] == p.config.hash()
    pair = ds.pair(1)
    ref = full_gradient(p, [4, 5], UNIFORM, ds.keys)
    np.testing.assert_array_equal(pair.full.flatten(), ref.flatten())
    ds.save(tmp_path / "p.r2f")
    back = GradientPairDataset.load(tmp_path / "p.r2f")
    np.testing.assert_array_equal(back.lora, ds.lora)
    np.testing.assert_array_equal(back.full, ds.full)
    assert back.keys == ds.keys
    back.save(tmp_path / "q.r2f")
    assert (tmp_path / "p.r2f").read_bytes() == (tmp_path / "q.r2f").read_bytes()
    with pytest.raises(ValueError):
        collect_pairs(p, ads, ex, 4)


def test_averaged_pairs_reduce_to_single_view_and_stay_consistent():
    p = tiny_model(dtype=np.float32)
    ads = attach_lora(p, 2)
    single = collect_pairs(p, ads, [([1, 2, 3], UNIFORM), ([4, 5], UNIFORM)], 2)
    grouped = collect_averaged_pairs(p, ads, [([[1, 2, 3]], UNIFORM), ([[4, 5]], UNIFORM)], 2)
    np.testing.assert_array_equal(grouped.lora, single.lora)
    np.testing.assert_array_equal(grouped.full, single.full)
    two = collect_averaged_pairs(p, ads, [([[1, 2, 3], [4, 5]], UNIFORM)], 1).pair(0)
    for a in ads:
        np.testing.assert_allclose(two.lora.grads[a.key][1], a.A.T @ two.full.grads[a.key], atol=1e-6)
    with pytest.raises(ValueError):
        collect_averaged_pairs(p, ads, [([], UNIFORM)], 1)


def test_blocks_layout():
    p = tiny_model(dtype=np.float32)
    ads = attach_lora(p, 2)
    ds = collect_pairs(p, ads, [([1, 2], UNIFORM)], 1)
    lo, fu, layers = ds.blocks("v")
    assert lo.shape == (1, 2, 2 * 8 * 2) and fu.shape == (1, 2, 64)
    np.testing.assert_array_equal(layers, [0, 1])
    np.testing.assert_array_equal(fu[0, 1], ds.pair(0).full.grads[(1, "v")].reshape(-1))
