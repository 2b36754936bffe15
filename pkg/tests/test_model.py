import numpy as np
import pytest

from dssau.attention import DssaConfig
from dssau.autodiff import Tensor, adaptive_avg_pool, no_grad
from dssau.blocks import PPM, DssaBlock, PatchEmbed, PatchMerge, dssa_block, dssa_block_params
from dssau.errors import ConfigError, ParameterError
from dssau.model import DSSAUNet, ModelConfig, stage_attention
from dssau.oracle import attention_macs, cost_sweep, count_cost, grad_check

from conftest import leaf

SMALL = ModelConfig(channels=32, depths=(1, 1, 1, 1), decoder_width=32, ppm_bins=(1, 2))


# -- blocks --------------------------------------------------------------------------
def test_patch_embed_shape_and_zero(rng):
    pe = PatchEmbed(3, 32, rng)
    assert pe(Tensor(np.zeros((1, 64, 64, 3)))).shape == (1, 16, 16, 32)
    for p in pe.parameters():
        p.data[:] = 0
    assert not pe(Tensor(rng.normal(size=(1, 32, 32, 3)))).data.any()


def test_patch_embed_full_size_shape(rng):
    pe = PatchEmbed(3, 96, rng)
    with no_grad():
        assert pe(Tensor(np.zeros((1, 256, 256, 3), np.float32))).shape == (1, 64, 64, 96)


def test_patch_embed_overlap(rng):
    pe = PatchEmbed(3, 16, rng).astype(np.float64)
    x = rng.normal(size=(1, 32, 32, 3))
    base = pe(Tensor(x)).data
    x[0, 15, 15, 0] += 1.0
    changed = np.abs(pe(Tensor(x)).data - base).max(-1) > 1e-9
    assert changed.sum() > 1


def test_patch_embed_rejects_indivisible(rng):
    with pytest.raises(ParameterError):
        PatchEmbed(3, 16, rng)(Tensor(np.zeros((1, 48, 64, 3))))


@pytest.mark.parametrize("c", [96, 192, 384])
def test_patch_merge_doubles_channels(c, rng):
    pm = PatchMerge(c, rng)
    assert pm(Tensor(np.zeros((1, 4, 4, c), np.float32))).shape == (1, 2, 2, 2 * c)


def test_patch_merge_full_size(rng):
    with no_grad():
        assert PatchMerge(96, rng)(Tensor(np.zeros((1, 64, 64, 96), np.float32))).shape == (1, 32, 32, 192)


def test_patch_merge_constant_in_constant_out(rng):
    pm = PatchMerge(8, rng).astype(np.float64)
    out = pm(Tensor(np.full((1, 8, 8, 8), 0.7))).data
    interior = out[0, 1:, 1:]  # top-left row/col touch the zero padding
    np.testing.assert_allclose(interior, np.broadcast_to(interior[0, 0], interior.shape), atol=1e-12)


def test_patch_merge_rejects_odd(rng):
    with pytest.raises(ParameterError):
        PatchMerge(8, rng)(Tensor(np.zeros((1, 5, 4, 8))))


def _block(rng, dim=16, head_dim=8, S=2, k1=2, lam=0.5):
    cfg = DssaConfig(regions=S, k1=k1, lam=lam, heads=dim // head_dim, head_dim=head_dim)
    return DssaBlock(cfg, rng).astype(np.float64), cfg


def test_block_zero_weights_is_identity(rng):
    blk, cfg = _block(rng)
    for p in blk.parameters():
        p.data[:] = 0
    x = rng.normal(size=(2, 4, 4, 16))
    np.testing.assert_array_equal(dssa_block(Tensor(x), blk, cfg).data, x)


def test_block_preserves_shape(rng):
    cfg = DssaConfig(regions=8, k1=4, lam=1 / 8, heads=3, head_dim=32)
    blk = DssaBlock(cfg, rng)
    assert blk(Tensor(rng.normal(size=(2, 32, 32, 96)).astype(np.float32))).shape == (2, 32, 32, 96)


def test_block_wiring_matches_hand_composition(rng):
    blk, cfg = _block(rng)
    x = Tensor(rng.normal(size=(1, 4, 4, 16)))
    u = blk.pos(x) + x
    z = blk.attn(blk.norm1(u)) + u
    expect = blk.mlp(blk.norm2(z)) + z
    np.testing.assert_array_equal(blk(x).data, expect.data)


def test_block_rejects_foreign_config(rng):
    blk, _ = _block(rng)
    other = DssaConfig(regions=2, k1=1, lam=0.5, heads=2, head_dim=8)
    with pytest.raises(ParameterError):
        dssa_block(Tensor(np.zeros((1, 4, 4, 16))), blk, other)


@pytest.mark.parametrize("dim,ratio", [(16, 3), (96, 3), (64, 4)])
def test_block_parameter_formula(dim, ratio, rng):
    cfg = DssaConfig(regions=2, k1=1, lam=1.0, heads=dim // 8, head_dim=8)
    assert DssaBlock(cfg, rng, ratio).num_parameters() == dssa_block_params(dim, ratio)


def test_block_gradient_check(rng):
    blk, _ = _block(rng)
    x = leaf(rng.normal(size=(1, 4, 4, 16)))
    r = Tensor(rng.normal(size=(1, 4, 4, 16)))
    rep = grad_check(lambda: (blk(x) * r).sum(), dict(blk.named_parameters(), x=x), coords_per_param=10)
    assert rep.max_rel_error < 1e-3, rep.per_parameter


def test_ppm_shapes_and_errors(rng):
    ppm = PPM(768, 64, rng)
    with no_grad():
        assert ppm(Tensor(np.zeros((1, 8, 8, 768), np.float32))).shape == (1, 8, 8, 64)
    with pytest.raises(ParameterError):
        ppm(Tensor(np.zeros((1, 4, 4, 768), np.float32)))


def test_ppm_constant_in_constant_out(rng):
    ppm = PPM(8, 4, rng, bins=(1, 2, 3)).astype(np.float64)
    out = ppm(Tensor(np.full((1, 6, 6, 8), -1.3))).data
    interior = out[0, 1:-1, 1:-1]
    np.testing.assert_allclose(interior, np.broadcast_to(interior[0, 0], interior.shape), atol=1e-12)


def test_bin_one_is_global_mean(rng):
    x = rng.normal(size=(2, 6, 6, 3))
    np.testing.assert_allclose(adaptive_avg_pool(Tensor(x), 1).data[:, 0, 0], x.mean(axis=(1, 2)), rtol=1e-12)


# -- network -------------------------------------------------------------------------
def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(depths=(2, 2, 8))
    with pytest.raises(ConfigError):
        ModelConfig(skips=(4, 32))
    with pytest.raises(ConfigError):
        ModelConfig(channels=40)


def test_reference_defaults():
    cfg = ModelConfig()
    assert cfg.depths == (2, 2, 8, 2)
    assert cfg.k1_schedule == (1, 4, 16, 64)
    assert cfg.widths == (96, 192, 384, 768)
    assert cfg.decoder_width == 64


def test_regions_stay_fixed_while_windows_shrink():
    cfg = ModelConfig()
    for side, k1 in zip((64, 32, 16, 8), cfg.k1_schedule):
        att = stage_attention(cfg, 96, side, k1)
        assert att.regions == 8
        assert att.tokens_per_region(side, side) == (side // 8) ** 2


def test_small_extent_caps_regions_and_k1():
    att = stage_attention(SMALL, 32, 2, 64)
    assert (att.regions, att.k1) == (2, 4)


def test_toy_forward_shape_and_speed(rng):
    import time

    net = DSSAUNet(SMALL, 64)
    x = Tensor(rng.normal(size=(1, 64, 64, 3)).astype(np.float32))
    t = time.perf_counter()
    with no_grad():
        y = net(x)
    assert y.shape == (1, 64, 64, 3)
    assert time.perf_counter() - t < 1.0


def test_stage_ladder_small(rng):
    net = DSSAUNet(SMALL, 64)
    with no_grad():
        out = net.stages(Tensor(rng.normal(size=(1, 64, 64, 3)).astype(np.float32)))
    assert [o.shape[1:] for o in out.encoder] == [(16, 16, 32), (8, 8, 64), (4, 4, 128), (2, 2, 256)]
    assert [o.shape[1:] for o in out.decoder] == [(2, 2, 32), (4, 4, 32), (8, 8, 32), (16, 16, 32)]


def test_wrong_input_size_rejected(rng):
    net = DSSAUNet(SMALL, 64)
    with pytest.raises(ParameterError):
        net(Tensor(np.zeros((1, 32, 32, 3), np.float32)))


def test_batch_independence_bitwise(rng):
    net = DSSAUNet(SMALL, 64)
    x = rng.normal(size=(2, 64, 64, 3)).astype(np.float32)
    with no_grad():
        both = net(Tensor(x)).data
        single = np.concatenate([net(Tensor(x[i : i + 1])).data for i in range(2)])
    np.testing.assert_array_equal(both, single)


def test_every_parameter_receives_gradient(rng):
    net = DSSAUNet(SMALL, 64)
    net(Tensor(rng.normal(size=(1, 64, 64, 3)).astype(np.float32))).sum().backward()
    missing = [n for n, p in net.named_parameters() if p.grad is None]
    assert not missing


@pytest.mark.parametrize("skips", [(), (16,), (8, 16), (4, 8, 16)])
@pytest.mark.parametrize("mff", [True, False])
def test_ablations_build_and_run(skips, mff, rng):
    cfg = SMALL.with_(skips=skips, mff=mff)
    net = DSSAUNet(cfg, 64)
    assert sum(c is not None for c in net.skip_convs) == len(skips)
    assert net.fuse.weight.shape[1] == (4 * cfg.decoder_width if mff else cfg.decoder_width)
    with no_grad():
        assert net(Tensor(np.zeros((1, 64, 64, 3), np.float32))).shape == (1, 64, 64, 3)


def test_no_skip_decoder_ignores_shallow_encoder_maps(rng):
    net = DSSAUNet(SMALL.with_(skips=()), 64)
    x = Tensor(rng.normal(size=(1, 64, 64, 3)).astype(np.float32))
    with no_grad():
        enc = net.encode(x)
        a = net.decode(enc).decoder[-1].data
        enc.encoder[0] = Tensor(np.zeros_like(enc.encoder[0].data))
        b = net.decode(enc).decoder[-1].data
    np.testing.assert_array_equal(a, b)


def test_constant_decoder_maps_give_constant_logits(rng):
    net = DSSAUNet(SMALL, 64).astype(np.float64)
    from dssau.model import StageOutputs

    dec = [Tensor(np.full((1, s, s, 32), 0.3)) for s in (2, 4, 8, 16)]
    out = net.mff_head(StageOutputs(decoder=dec)).data[0, 1:-1, 1:-1]
    np.testing.assert_allclose(out, np.broadcast_to(out[0, 0], out.shape), atol=1e-10)


# -- cost accounting --------------------------------------------------------------------
def test_cost_params_equal_built_model():
    for cfg, size in ((SMALL, 64), (SMALL.with_(skips=(8,), mff=False), 64), (ModelConfig(), 256)):
        assert count_cost(cfg, size).params == DSSAUNet(cfg, size).num_parameters()


def test_cost_breakdown_sums_to_total():
    rep = count_cost(ModelConfig())
    assert sum(m for m, _ in rep.per_module.values()) == rep.macs
    assert sum(p for _, p in rep.per_module.values()) == rep.params
    assert rep.flops == 2 * rep.macs


def test_attention_macs_closed_form():
    # 32x32 map, 8x8 regions, n = 16 tokens/region, k1 = 4, lam = 1/8 -> k2 = 8
    hw, c = 1024, 96
    assert attention_macs(32, c, 8, 4, 1 / 8) == 64 * 64 * c + hw * 64 * c + hw * 8 * c


def test_cost_orderings():
    sweep = cost_sweep(ModelConfig())
    for sched in ((1, 4, 16, 64), (2, 8, 32, 64)):
        a, b, c = (sweep[(sched, lam)] for lam in (1 / 4, 1 / 8, 1 / 16))
        assert a > b > c
    for lam in (1 / 4, 1 / 8, 1 / 16):
        assert sweep[((2, 8, 32, 64), lam)] > sweep[((1, 4, 16, 64), lam)]
