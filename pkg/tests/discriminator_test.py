import math

import pytest
import torch
from torch.autograd import gradcheck

from config import TrainConfig
from networks.blocks import conv2d
from networks.discriminator import (
    UNetDiscriminator, decoder_widths, discriminate, encoder_widths, parameter_report, patch_tap_indices,
    pixel_probabilities,
)


def _tiny(**kw):
    base = dict(resolution=16, num_classes=3, width_divisor=64, batch_size=2)
    base.update(kw)
    return TrainConfig(**base)


def test_width_tables():
    assert encoder_widths(256, 1) == [128, 128, 256, 256, 512, 512]
    assert decoder_widths(256, 1) == [512, 256, 256, 128, 128, 64]
    assert encoder_widths(64, 8) == [32, 32, 64, 64]
    assert patch_tap_indices(6) == (3, 5)
    assert patch_tap_indices(4) == (2, 3)


def test_full_width_ladder():
    cfg = TrainConfig(resolution=256, width_divisor=1, num_classes=8)
    with torch.device("meta"):
        D = UNetDiscriminator(cfg)
        out = D(torch.empty(1, 3, 256, 256))
    assert out.pixel_logits.shape == (1, 9, 256, 256)
    assert [tuple(s.shape) for s in out.patch_scores] == [(1, 16, 16), (1, 4, 4)]
    assert [D.enc_widths[i] for i in D.enc_patch_taps] == [256, 512]
    assert [t.shape[-1] for t in out.decoder_taps] == [16, 32, 64, 128, 256]


def test_desk_taps_at_64():
    cfg = TrainConfig(num_classes=8, batch_size=2)
    out = UNetDiscriminator(cfg)(torch.randn(2, 3, 64, 64))
    assert out.pixel_logits.shape == (2, 9, 64, 64)
    assert [s.shape[-1] for s in out.patch_scores] == [8, 4]
    assert [t.shape[-1] for t in out.decoder_taps] == [16, 32, 64]
    assert [t.shape[-1] for t in out.encoder_taps] == [16, 8, 4]
    assert out.fm_taps() is out.decoder_taps


def test_decoder_patch_placement():
    out = UNetDiscriminator(TrainConfig(ms_placement="dec", batch_size=2))(torch.randn(2, 3, 64, 64))
    assert [s.shape[-1] for s in out.patch_scores] == [16, 32]
    both = UNetDiscriminator(TrainConfig(ms_placement="both", fm_placement="both", batch_size=2))
    out = both(torch.randn(2, 3, 64, 64))
    assert len(out.patch_scores) == 4
    assert len(out.fm_taps()) == 6


def test_pixel_only_variant_has_no_heads():
    D = UNetDiscriminator(_tiny(dis="oa"))
    out = D(torch.randn(2, 3, 16, 16))
    assert len(D.enc_heads) == len(D.dec_heads) == 0
    assert out.patch_scores == [] and out.fm_taps() == []


def test_split_real_and_fake():
    out = discriminate(torch.randn(4, 3, 16, 16), UNetDiscriminator(_tiny()))
    real, fake = out.split(2)
    assert real.pixel_logits.shape[0] == fake.pixel_logits.shape[0] == 2
    assert torch.equal(fake.pixel_logits, out.pixel_logits[2:])
    assert all(r.shape[0] == 2 for r in real.patch_scores + real.decoder_taps)


def test_rejects_wrong_input_shape():
    with pytest.raises(ValueError):
        UNetDiscriminator(_tiny())(torch.randn(2, 3, 32, 32))


def test_pixel_probabilities():
    p = pixel_probabilities(torch.zeros(1, 4, 2, 2))
    assert torch.allclose(p, torch.full_like(p, 0.25))
    logits = torch.tensor([math.log(3.0), 0.0], dtype=torch.float64).view(1, 2, 1, 1)
    assert torch.allclose(pixel_probabilities(logits).flatten(), torch.tensor([0.75, 0.25], dtype=torch.float64))
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 5, 3, 3, generator=g, dtype=torch.float64)
    shift = torch.randn(2, 1, 3, 3, generator=g, dtype=torch.float64) * 100
    assert torch.allclose(pixel_probabilities(x), pixel_probabilities(x + shift), atol=1e-6)
    assert torch.allclose(pixel_probabilities(x).sum(1), torch.ones(2, 3, 3, dtype=torch.float64))


def test_parameter_report():
    conv = conv2d(4, 8, 3)
    assert parameter_report(conv) == 296
    assert parameter_report([]) == 0
    before = parameter_report(conv)
    with torch.no_grad():
        conv.weight.mul_(3)
    assert parameter_report(conv) == before


def test_discriminator_gradcheck_wrt_image():
    torch.manual_seed(0)
    D = UNetDiscriminator(_tiny()).double()
    x = torch.randn(2, 3, 16, 16, dtype=torch.float64, requires_grad=True)
    with torch.no_grad():
        for _ in range(10):
            D(x)  # settle the spectral-norm power iteration
    D.eval()

    def f(x):
        out = D(x)
        return (out.pixel_logits, *out.patch_scores, *out.decoder_taps)

    assert gradcheck(f, (x,), fast_mode=True)
