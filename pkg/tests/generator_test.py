import pytest
import torch
from torch.autograd import gradcheck

from config import TrainConfig
from networks.generator import (
    AdaptationPyramid, Generator, adaptation_pyramid, conditioning, conditioning_input, isp_widths,
    legacy_single_pyramid_conditioning, num_rungs, sample_noise, synthesize,
)


def _tiny(**kw):
    base = dict(resolution=16, num_classes=3, width_divisor=32, z_dim=2, batch_size=2)
    base.update(kw)
    return TrainConfig(**base)


def _inputs(cfg, batch=2, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    label = torch.randint(0, cfg.num_classes, (batch, cfg.resolution, cfg.resolution), generator=g)
    onehot = torch.nn.functional.one_hot(label, cfg.num_classes).movedim(-1, 1).to(dtype)
    z = sample_noise(mode="per_pixel", batch=batch, z_dim=cfg.z_dim, size=cfg.resolution, generator=g).to(dtype)
    return onehot, z


def test_widths_follow_the_256_table():
    assert num_rungs(256) == 5 and num_rungs(64) == 3
    assert isp_widths(256, 1) == [1024, 1024, 512, 256, 128, 64]
    assert isp_widths(64, 8) == [64, 32, 16, 8]
    assert isp_widths(16, 1024) == [1, 1]
    with pytest.raises(ValueError):
        num_rungs(48)


def test_pyramid_ladder_at_full_widths():
    with torch.device("meta"):
        pyramid = AdaptationPyramid(64 + 8, 256)
        feats = adaptation_pyramid(torch.empty(1, 72, 256, 256), pyramid)
    assert feats.stem.shape == (1, 32, 256, 256)
    assert [tuple(a.shape[1:]) for a in feats.ladder()[1:]] == [
        (64, 256, 256), (64, 128, 128), (64, 64, 64), (64, 32, 32), (64, 16, 16), (64, 8, 8),
    ]
    assert feats.alphas[0].shape[-1] == 8


def test_generator_forward_at_full_widths():
    cfg = TrainConfig(resolution=256, width_divisor=1)
    with torch.device("meta"):
        G = Generator(cfg)
        out = G(torch.empty(1, 8, 256, 256), torch.empty(1, 64, 256, 256))
    assert out.shape == (1, 3, 256, 256)
    assert [r.conv_1.out_channels for r in G.rungs] == [1024, 512, 256, 128, 64]


def test_desk_generator_output_range():
    cfg = TrainConfig(batch_size=2)
    G = Generator(cfg)
    onehot, z = _inputs(cfg)
    out = synthesize(z, onehot, G)
    assert out.shape == (2, 3, 64, 64)
    assert out.min() >= -1 and out.max() <= 1


def test_conditioning_concatenates_upsampled_bottom_alpha():
    a_i = torch.randn(2, 4, 32, 32)
    a_0 = torch.randn(2, 4, 8, 8)
    cond = conditioning_input(a_i, a_0)
    assert cond.shape == (2, 8, 32, 32)
    assert torch.equal(cond[:, :4], a_i)
    assert torch.equal(cond[:, 4:, 5, 9], a_0[:, :, 1, 2])
    assert conditioning_input(a_i, a_0, no_cat=True) is a_i
    with pytest.raises(ValueError):
        conditioning_input(a_i, torch.randn(2, 4, 6, 6))


def test_conditioning_returns_spade_params():
    G = Generator(_tiny())
    spade = G.rungs[0].norm_0
    a = G.pyramid.alpha_nc
    params = conditioning(torch.randn(2, a, 8, 8), torch.randn(2, a, 8, 8), spade)
    assert params.gamma.shape == params.beta.shape == (2, G.widths[0], 8, 8)


def test_variant_conditioning_widths():
    dp = Generator(_tiny())
    no_cat = Generator(_tiny(no_cat=True))
    oa = Generator(_tiny(gen="oa"))
    a = dp.pyramid.alpha_nc
    assert dp.rungs[0].norm_0.conv_gamma.in_channels == 2 * a
    assert no_cat.rungs[0].norm_0.conv_gamma.in_channels == a
    assert oa.pyramid is None
    assert oa.rungs[0].norm_0.conv_gamma.in_channels == 2 + 3


def test_legacy_conditioning_subsamples_input():
    zy = torch.arange(16.0 * 16).view(1, 1, 16, 16)
    assert torch.equal(legacy_single_pyramid_conditioning(zy, 8), zy[..., ::2, ::2])


def test_conditioning_for_exposes_rung_params():
    cfg = _tiny()
    G = Generator(cfg)
    onehot, z = _inputs(cfg)
    params = G.conditioning_for(onehot, z, 0)
    assert params.gamma.shape == (2, G.widths[0], 8, 8)


def _column_scene(cfg, with_object: bool):
    label = torch.zeros(1, cfg.resolution, cfg.resolution, dtype=torch.long)
    if with_object:
        label[0, :, 5] = 2    # one pixel wide, off the 8x8 sampling grid
    onehot = torch.nn.functional.one_hot(label, cfg.num_classes).movedim(-1, 1).float()
    z = sample_noise(seed=0, batch=1, z_dim=cfg.z_dim, size=cfg.resolution)
    return onehot, z


def test_thin_object_reaches_bottom_rung_only_through_the_pyramid():
    torch.manual_seed(0)
    cfg = _tiny()
    dp = Generator(cfg).eval()
    oa = Generator(_tiny(gen="oa")).eval()
    empty, z = _column_scene(cfg, False)
    thin, _ = _column_scene(cfg, True)

    assert not legacy_single_pyramid_conditioning(thin, 8)[:, 2].any()
    with torch.no_grad():
        assert torch.equal(oa.conditioning_for(thin, z, 0).gamma, oa.conditioning_for(empty, z, 0).gamma)
        moved = (dp.conditioning_for(thin, z, 0).gamma - dp.conditioning_for(empty, z, 0).gamma).abs().max()
    assert moved > 1e-6


def test_route_top_alpha_widens_final_conv():
    G = Generator(_tiny(route_top_alpha=True))
    assert G.conv_img.in_channels == G.widths[-1] + G.pyramid.alpha_nc
    onehot, z = _inputs(G.cfg)
    assert G(onehot, z).shape == (2, 3, 16, 16)


def test_generator_rejects_bad_shapes():
    cfg = _tiny()
    G = Generator(cfg)
    onehot, z = _inputs(cfg)
    with pytest.raises(ValueError):
        G(onehot[:, :2], z)
    with pytest.raises(ValueError):
        G(onehot, z[:1])


def test_sample_noise_modes():
    tiled = sample_noise(seed=4, mode="tiled", batch=2, z_dim=3, size=8)
    assert tiled.shape == (2, 3, 8, 8)
    assert torch.equal(tiled, tiled[:, :, :1, :1].expand_as(tiled))
    assert torch.equal(tiled, sample_noise(seed=4, mode="tiled", batch=2, z_dim=3, size=8))
    pp = sample_noise(seed=4, mode="per_pixel", batch=2, z_dim=3, size=8)
    assert not torch.equal(pp[..., 0, 0], pp[..., 1, 1])
    with pytest.raises(ValueError):
        sample_noise(seed=0, mode="uniform")


def test_generator_gradcheck_wrt_noise():
    cfg = _tiny()
    torch.manual_seed(0)
    G = Generator(cfg).double()
    onehot, z = _inputs(cfg, dtype=torch.float64)
    z.requires_grad_(True)
    assert gradcheck(lambda z: G(onehot, z), (z,), fast_mode=True)


def test_generator_parameter_gradcheck():
    cfg = _tiny()
    torch.manual_seed(0)
    G = Generator(cfg).double()
    onehot, z = _inputs(cfg, dtype=torch.float64)
    name = "rungs.0.norm_0.conv_gamma.weight"
    params = dict(G.named_parameters())
    w = params[name].detach().clone().requires_grad_(True)

    def f(w):
        return torch.func.functional_call(G, {**params, name: w}, (onehot, z))

    assert gradcheck(f, (w,), fast_mode=True)
