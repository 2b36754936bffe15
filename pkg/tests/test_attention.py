import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dssau.attention import (
    DSSA,
    DssaConfig,
    attend,
    dssa_forward,
    frozen_routing,
    from_regions,
    gather_regions,
    pixel_select,
    project_qkv,
    region_route,
    retained_count,
    to_regions,
)
from dssau.autodiff import Tensor, conv2d
from dssau.errors import ConfigError, DimensionError, ParameterError
from dssau.oracle import dense_attention, grad_check

from conftest import leaf


def _dssa(cfg, seed=0, dtype=np.float64):
    layer = DSSA(cfg, np.random.default_rng(seed))
    return layer.astype(dtype)


# -- config -----------------------------------------------------------------------
def test_k2_rounds_half_up():
    assert retained_count(1 / 8, 4) == 1  # 0.5 rounds up
    assert retained_count(1 / 8, 12) == 2  # 1.5 -> 2
    assert retained_count(1 / 4, 10) == 3  # 2.5 -> 3
    assert retained_count(1.0, 7) == 7


def test_k2_below_one_rejected():
    with pytest.raises(ConfigError):
        retained_count(1 / 16, 7)


@pytest.mark.parametrize("kw", [dict(regions=0), dict(k1=65), dict(k1=0), dict(lam=0.0), dict(lam=1.5)])
def test_invalid_config(kw):
    base = dict(regions=8, k1=4, lam=0.125, heads=1, head_dim=32)
    base.update(kw)
    with pytest.raises(ConfigError):
        DssaConfig(**base)


def test_indivisible_extent_rejected():
    cfg = DssaConfig(regions=4, k1=2, lam=0.5, heads=1, head_dim=8)
    layer = _dssa(cfg)
    with pytest.raises(ParameterError):
        layer(Tensor(np.zeros((1, 10, 8, 8))))


def test_channel_mismatch_rejected():
    cfg = DssaConfig(regions=2, k1=2, lam=0.5, heads=2, head_dim=8)
    with pytest.raises(DimensionError):
        _dssa(cfg)(Tensor(np.zeros((1, 4, 4, 12))))


# -- layout -------------------------------------------------------------------------
def test_region_layout_round_trip(rng):
    x = rng.normal(size=(2, 8, 12, 3))
    r = to_regions(Tensor(x), 4)
    assert r.shape == (2, 16, 6, 3)
    # region (1, 2) holds rows 2..3 and cols 6..8 in row-major order
    np.testing.assert_array_equal(r.data[0, 1 * 4 + 2], x[0, 2:4, 6:9].reshape(6, 3))
    np.testing.assert_array_equal(from_regions(r, 4, 8, 12).data, x)


# -- projections -------------------------------------------------------------------
def test_identity_projection_returns_input(rng):
    x = Tensor(rng.normal(size=(1, 4, 4, 6)))
    eye = Tensor(np.eye(6))
    q, k, v = project_qkv(x, eye, eye, eye)
    for t in (q, k, v):
        np.testing.assert_array_equal(t.data, x.data)


def test_projection_zero_input_and_per_token(rng):
    w = [Tensor(rng.normal(size=(5, 5))) for _ in range(3)]
    q, _, _ = project_qkv(Tensor(np.zeros((1, 2, 3, 5))), *w)
    assert not q.data.any()
    x = rng.normal(size=(1, 2, 3, 5))
    q, k, v = project_qkv(Tensor(x), *w)
    for out, wi in zip((q, k, v), w):
        for r in range(2):
            for t in range(3):
                np.testing.assert_allclose(out.data[0, r, t], x[0, r, t] @ wi.data, rtol=1e-12)


def test_projection_shape_error():
    with pytest.raises(DimensionError):
        project_qkv(Tensor(np.zeros((1, 2, 3, 4))), Tensor(np.zeros((4, 4))), Tensor(np.zeros((3, 4))), Tensor(np.zeros((4, 4))))


# -- region routing ------------------------------------------------------------------
def test_routing_matches_brute_force_sort(rng):
    cfg = DssaConfig(regions=3, k1=4, lam=1.0, heads=1, head_dim=4)
    q = Tensor(rng.normal(size=(2, 9, 5, 4)))
    k = Tensor(rng.normal(size=(2, 9, 5, 4)))
    ir, ar = region_route(q, k, cfg)
    for b in range(2):
        for i in range(9):
            qi = q.data[b, i].mean(0)
            scores = [float(qi @ k.data[b, j].mean(0)) for j in range(9)]
            np.testing.assert_allclose(ar[b, i], scores, rtol=1e-12)
            expect = sorted(range(9), key=lambda j: -scores[j])[:4]
            assert list(ir[b, i]) == expect


def test_routing_dominant_region_always_selected(rng):
    cfg = DssaConfig(regions=2, k1=1, lam=1.0, heads=1, head_dim=3)
    q = np.abs(rng.normal(size=(1, 4, 2, 3)))
    k = np.abs(rng.normal(size=(1, 4, 2, 3)))
    k[0, 2] += 100.0
    ir, _ = region_route(Tensor(q), Tensor(k), cfg)
    assert (ir[0, :, 0] == 2).all()


def test_routing_permutation_equivariant(rng):
    cfg = DssaConfig(regions=2, k1=2, lam=1.0, heads=1, head_dim=3)
    q = rng.normal(size=(1, 4, 2, 3))
    k = rng.normal(size=(1, 4, 2, 3))
    perm = rng.permutation(4)
    ir, _ = region_route(Tensor(q), Tensor(k), cfg)
    ir_p, _ = region_route(Tensor(q[:, perm]), Tensor(k[:, perm]), cfg)
    inv = np.argsort(perm)
    np.testing.assert_array_equal(inv[ir_p], ir[:, perm])


# -- gathering -------------------------------------------------------------------------
def test_gather_self_routing_returns_own_tokens(rng):
    k = Tensor(rng.normal(size=(1, 4, 3, 2)))
    v = Tensor(rng.normal(size=(1, 4, 3, 2)))
    ir = np.arange(4).reshape(1, 4, 1)
    kg, vg = gather_regions(k, v, ir)
    np.testing.assert_array_equal(kg.data, k.data)
    np.testing.assert_array_equal(vg.data, v.data)


def test_gather_matches_concatenation(rng):
    k = rng.normal(size=(2, 4, 3, 2))
    v = rng.normal(size=(2, 4, 3, 2))
    ir = np.stack([rng.permutation(4)[:3] for _ in range(8)]).reshape(2, 4, 3)
    kg, vg = gather_regions(Tensor(k), Tensor(v), ir)
    for b in range(2):
        for i in range(4):
            np.testing.assert_array_equal(kg.data[b, i], np.concatenate([k[b, j] for j in ir[b, i]]))
            np.testing.assert_array_equal(vg.data[b, i], np.concatenate([v[b, j] for j in ir[b, i]]))


# -- pixel selection ----------------------------------------------------------------
def test_pixel_select_brute_force(rng):
    cfg = DssaConfig(regions=2, k1=2, lam=0.5, heads=2, head_dim=4)
    q = rng.normal(size=(1, 2, 4, 3, 4))
    kg = rng.normal(size=(1, 2, 4, 6, 4))
    ap, ip = pixel_select(Tensor(q), Tensor(kg), cfg)
    assert ip.shape[-1] == 3
    for h in range(2):
        for r in range(4):
            for t in range(3):
                s = kg[0, h, r] @ q[0, h, r, t] / 2.0
                order = sorted(range(6), key=lambda j: -s[j])[:3]
                assert list(ip[0, h, r, t]) == order
                np.testing.assert_allclose(ap.data[0, h, r, t], s[order], rtol=1e-12)


def test_pixel_select_dense_limit_keeps_everything(rng):
    cfg = DssaConfig(regions=2, k1=4, lam=1.0, heads=1, head_dim=4)
    ap, ip = pixel_select(Tensor(rng.normal(size=(1, 1, 4, 2, 4))), Tensor(rng.normal(size=(1, 1, 4, 8, 4))), cfg)
    np.testing.assert_array_equal(np.sort(ip, axis=-1), np.broadcast_to(np.arange(8), ip.shape))


def test_attention_weights_sum_to_one(rng):
    cfg = DssaConfig(regions=2, k1=2, lam=0.5, heads=1, head_dim=4)
    ap, ip = pixel_select(Tensor(rng.normal(size=(1, 1, 4, 3, 4))), Tensor(rng.normal(size=(1, 1, 4, 6, 4))), cfg)
    # with constant values the output is that constant, which happens iff the weights sum to one
    vg = Tensor(np.full((1, 1, 4, 6, 4), 2.5))
    np.testing.assert_allclose(attend(ap, ip, vg).data, 2.5, rtol=1e-12)


# -- whole layer ----------------------------------------------------------------------
def _lce_only(layer, x):
    B, H, W, C = x.shape
    v = x @ layer.wv.data
    return conv2d(Tensor(v), layer.lce_weight, layer.lce_bias, padding=2, groups=C).data


@pytest.mark.parametrize("batch,side,heads", [(1, 8, 1), (2, 16, 1), (2, 16, 2)])
def test_dense_limit_matches_oracle(batch, side, heads, rng):
    S = 4
    cfg = DssaConfig(regions=S, k1=S * S, lam=1.0, heads=heads, head_dim=32 // heads)
    layer = _dssa(cfg, dtype=np.float32)
    x = rng.normal(size=(batch, side, side, 32)).astype(np.float32)
    out = layer(Tensor(x)).data - _lce_only(layer, x)
    tokens = x.reshape(batch, side * side, 32).astype(np.float64)
    wq, wk, wv = (w.data.astype(np.float64) for w in (layer.wq, layer.wk, layer.wv))
    ref = dense_attention(tokens @ wq, tokens @ wk, tokens @ wv, heads).reshape(out.shape)
    assert np.abs(out - ref).max() < 1e-5


def test_dense_limit_with_lce_zeroed(rng):
    cfg = DssaConfig(regions=2, k1=4, lam=1.0, heads=1, head_dim=8)
    layer = _dssa(cfg)
    layer.lce_weight.data[:] = 0
    layer.lce_bias.data[:] = 0
    x = rng.normal(size=(1, 4, 4, 8))
    tokens = x.reshape(16, 8)
    ref = dense_attention(tokens @ layer.wq.data, tokens @ layer.wk.data, tokens @ layer.wv.data, 1)
    np.testing.assert_allclose(layer(Tensor(x)).data.reshape(16, 8), ref, atol=1e-12)


def test_kept_fraction_matches_closed_form(rng):
    S, k1, lam = 8, 4, 1 / 8
    cfg = DssaConfig(regions=S, k1=k1, lam=lam, heads=1, head_dim=8)
    layer = _dssa(cfg)
    layer(Tensor(rng.normal(size=(1, 32, 32, 8))))
    tr = layer.last_trace
    n = 16
    assert tr.k2 == round(lam * k1 * n)
    assert tr.score_evaluations == 32 * 32 * k1 * n
    assert tr.retained_pairs == 32 * 32 * tr.k2
    assert tr.kept_fraction == pytest.approx(lam * k1 / S**2)


def test_spatial_permutation_within_regions_consistent(rng):
    # permuting tokens inside every region (same permutation for all regions)
    # permutes the attention output identically; LCE is zeroed since it is spatial
    cfg = DssaConfig(regions=2, k1=2, lam=0.5, heads=1, head_dim=8)
    layer = _dssa(cfg)
    layer.lce_weight.data[:] = 0
    layer.lce_bias.data[:] = 0
    x = rng.normal(size=(1, 4, 4, 8))
    perm = rng.permutation(4)
    xr = to_regions(Tensor(x), 2).data
    xp = from_regions(Tensor(xr[:, :, perm]), 2, 4, 4).data
    out = to_regions(layer(Tensor(x)), 2).data
    out_p = to_regions(layer(Tensor(xp)), 2).data
    np.testing.assert_allclose(out_p, out[:, :, perm], atol=1e-12)


def test_heads_share_routing_but_not_pixel_choice(rng):
    cfg = DssaConfig(regions=2, k1=2, lam=0.25, heads=2, head_dim=4)
    layer = _dssa(cfg)
    layer(Tensor(rng.normal(size=(1, 8, 8, 8))))
    tr = layer.last_trace
    assert tr.region_indices.shape == (1, 4, 2)
    assert tr.pixel_indices.shape == (1, 2, 4, 16, tr.k2)
    assert not np.array_equal(tr.pixel_indices[0, 0], tr.pixel_indices[0, 1])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([1 / 4, 1 / 2, 1.0]), st.integers(1, 4))
def test_output_finite_and_shaped(seed, lam, k1):
    cfg = DssaConfig(regions=2, k1=k1, lam=lam, heads=2, head_dim=4)
    layer = _dssa(cfg, seed=seed)
    x = np.random.default_rng(seed).normal(size=(1, 4, 8, 8))
    out = layer(Tensor(x))
    assert out.shape == x.shape and np.isfinite(out.data).all()


def test_gradient_check_float64(rng):
    cfg = DssaConfig(regions=2, k1=2, lam=0.5, heads=2, head_dim=4)
    layer = _dssa(cfg)
    x = leaf(rng.normal(size=(1, 4, 4, 8)))
    r = Tensor(rng.normal(size=(1, 4, 4, 8)))
    params = dict(layer.named_parameters(), x=x)
    rep = grad_check(lambda: (layer(x) * r).sum(), params, coords_per_param=20)
    assert rep.max_rel_error < 1e-3, rep.per_parameter


def test_frozen_routing_replays_choices(rng):
    cfg = DssaConfig(regions=2, k1=1, lam=0.5, heads=1, head_dim=4)
    layer = _dssa(cfg)
    x = rng.normal(size=(1, 4, 4, 4))
    with frozen_routing() as rec:
        layer(Tensor(x))
    first = layer.last_trace.region_indices.copy()
    with frozen_routing(rec, replay=True):
        layer(Tensor(-x * 3.0))
    np.testing.assert_array_equal(layer.last_trace.region_indices, first)
