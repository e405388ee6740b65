import pytest
import torch

from checkpoint import CheckpointError
from config import TrainConfig
from losses import NonFiniteLossError
from networks.discriminator import pixel_probabilities
from networks.generator import sample_noise
from scene_data import ProceduralScenes, default_meta, default_spec, one_hot
from trainer import (
    StepBatchSampler, build_optimizers, build_state, ema_update, fit, load_checkpoint, save_checkpoint,
    train_step,
)


def _tiny(**kw):
    base = dict(resolution=16, num_classes=4, width_divisor=32, z_dim=4, batch_size=2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def _scenes(count=8, seed=0):
    return ProceduralScenes(default_spec(default_meta(16, 4), seed=seed), count)


def _batch(ds, idx=(0, 1)):
    labels, images = zip(*(ds[i] for i in idx))
    return torch.stack(labels), torch.stack(images)


# ===== EMA =====
def test_ema_fixed_point_and_single_step():
    p = [torch.randn(3, dtype=torch.float64)]
    e = [p[0].clone()]
    ema_update(e, p, 0.9)
    assert torch.equal(e[0], p[0])
    e = [torch.zeros(2, dtype=torch.float64)]
    ema_update(e, [torch.ones(2, dtype=torch.float64)], 0.9)
    assert torch.allclose(e[0], torch.full((2,), 0.1, dtype=torch.float64), rtol=0, atol=1e-15)


def test_ema_geometric_law():
    p = torch.tensor([2.0], dtype=torch.float64)
    e = torch.tensor([-1.0], dtype=torch.float64)
    decay, k = 0.75, 12
    for _ in range(k):
        ema_update([e], [p], decay)
    assert abs(e - p).item() == pytest.approx(decay ** k * 3.0, rel=1e-12)


def test_ema_shape_mismatch():
    with pytest.raises(ValueError):
        ema_update([torch.zeros(2)], [torch.zeros(3)], 0.5)


def test_ema_update_on_modules_copies_buffers():
    a, b = torch.nn.BatchNorm1d(2), torch.nn.BatchNorm1d(2)
    b.running_mean.fill_(3.0)
    ema_update(a, b, 0.5)
    assert torch.equal(a.running_mean, b.running_mean)


# ===== optimizer =====
def test_adam_step_matches_hand_update():
    cfg = _tiny()
    G = torch.nn.Linear(1, 1, bias=False).double()
    D = torch.nn.Linear(1, 1, bias=False).double()
    with torch.no_grad():
        G.weight.fill_(1.5)
    opt_g, _ = build_optimizers(G, D, cfg)
    loss = 0.5 * 3.0 * G.weight.pow(2).sum()     # gradient 3 * w = 4.5
    loss.backward()
    opt_g.step()
    # beta1 = 0: first moment is the raw gradient, so the step is lr * g / (|g| + eps)
    expected = 1.5 - cfg.lr_g * 4.5 / (4.5 + cfg.adam_eps)
    assert abs(G.weight.item() - expected) < 1e-10


def test_optimizers_do_not_share_parameters():
    state = build_state(_tiny())
    g_ids = {id(p) for grp in state.opt_g.param_groups for p in grp["params"]}
    d_ids = {id(p) for grp in state.opt_d.param_groups for p in grp["params"]}
    assert g_ids == {id(p) for p in state.G.parameters()}
    assert d_ids == {id(p) for p in state.D.parameters()}
    assert not g_ids & d_ids


def test_each_update_leaves_the_other_network_untouched():
    state = build_state(_tiny())
    snap = lambda m: [p.detach().clone() for p in m.parameters()]
    same = lambda a, m: all(torch.equal(x, y) for x, y in zip(a, m.parameters()))
    seen = {}

    def d_pre(opt, args, kwargs):
        seen["g_before_d"] = snap(state.G)

    def d_post(opt, args, kwargs):
        seen["g_kept_by_d"] = same(seen["g_before_d"], state.G)
        seen["d_after_d"] = snap(state.D)

    def g_post(opt, args, kwargs):
        seen["d_kept_by_g"] = same(seen["d_after_d"], state.D)

    hooks = [state.opt_d.register_step_pre_hook(d_pre), state.opt_d.register_step_post_hook(d_post),
             state.opt_g.register_step_post_hook(g_post)]
    train_step(state, _batch(_scenes()))
    for h in hooks:
        h.remove()
    assert seen["g_kept_by_d"] and seen["d_kept_by_g"]


# ===== training =====
def test_one_step_moves_both_networks():
    state = build_state(_tiny())
    g0 = [p.detach().clone() for p in state.G.parameters()]
    d0 = [p.detach().clone() for p in state.D.parameters()]
    report = train_step(state, _batch(_scenes()))
    assert state.step == 1
    assert any(not torch.equal(a, b) for a, b in zip(g0, state.G.parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(d0, state.D.parameters()))
    assert report.l_lm >= 0 and report.l_ms_d >= 0 and report.l_ms_g >= 0
    assert report.l_g_total == pytest.approx(report.l_pixel_g + report.l_ms_g + report.l_fm, rel=1e-5)


def test_same_seed_gives_identical_loss_traces():
    ds = _scenes()
    traces = []
    for _ in range(2):
        state = build_state(_tiny())
        traces.append([train_step(state, _batch(ds, (i, i + 1))) for i in range(0, 6, 2)])
    assert traces[0] == traces[1]


def test_batch_size_must_match_config():
    with pytest.raises(ValueError):
        train_step(build_state(_tiny()), _batch(_scenes(), (0, 1, 2)))


def test_non_finite_loss_names_term():
    state = build_state(_tiny(lambda_lm=float("inf")))
    with pytest.raises(NonFiniteLossError, match="l_d_total"):
        train_step(state, _batch(_scenes()))


def test_variants_train():
    ds = _scenes()
    for kw in (dict(gen="oa", dis="oa"), dict(ms_placement="both", fm_placement="enc"), dict(no_cat=True),
               dict(mask_mode="class", lm_reduction="sum", z_mode="per_pixel", nonsat_g_hinge=True)):
        state = build_state(_tiny(**kw))
        report = train_step(state, _batch(ds))
        assert report.l_d_total == report.l_d_total
    oa = build_state(_tiny(gen="oa", dis="oa"))
    report = train_step(oa, _batch(ds))
    assert report.l_ms_d == report.l_fm == 0.0


def test_pixel_only_discriminator_learns_fake_class():
    cfg = _tiny(ms_placement="off", fm_placement="off", no_lm=True)
    state = build_state(cfg)
    label, image = _batch(_scenes())
    z = sample_noise(seed=9, batch=2, z_dim=cfg.z_dim, size=16)
    onehot = one_hot(label, cfg.num_classes)

    def fake_prob():
        state.D.eval()
        with torch.no_grad():
            fake = state.G(onehot, z)
            p = pixel_probabilities(state.D(fake).pixel_logits)[:, cfg.num_classes].mean().item()
        state.D.train()
        return p

    before = fake_prob()
    for _ in range(50):
        train_step(state, (label, image))
    assert fake_prob() > before


@pytest.mark.slow
def test_overfit_one_batch_halves_generator_pixel_loss():
    # one fixed batch, fixed noise, equal learning rates
    cfg = TrainConfig(resolution=64, num_classes=8, batch_size=4, lr_g=4e-4, lr_d=4e-4)
    state = build_state(cfg)
    ds = ProceduralScenes(default_spec(default_meta(64, 8)), 4)
    batch = _batch(ds, (0, 1, 2, 3))
    z = sample_noise(seed=0, batch=4, z_dim=cfg.z_dim, size=64)
    reports = [train_step(state, batch, z) for _ in range(200)]
    tail = sorted(r.l_pixel_g for r in reports[-10:])
    assert tail[5] <= 0.5 * reports[0].l_pixel_g


def test_fixed_noise_bypasses_the_noise_generator():
    state = build_state(_tiny(no_lm=True))
    before = state.noise.get_state()
    z = sample_noise(seed=1, batch=2, z_dim=4, size=16)
    train_step(state, _batch(_scenes()), z)
    assert torch.equal(state.noise.get_state(), before)
    with pytest.raises(ValueError, match="fixed noise"):
        train_step(state, _batch(_scenes()), z[:, :2])


# ===== data order =====
def test_step_sampler_is_a_function_of_step():
    s = StepBatchSampler(10, 3, seed=1, stop=9)
    batches = list(s)
    assert len(batches) == len(s) == 9
    assert sorted(sum(batches[:3], [])) == sorted(set(sum(batches[:3], [])))
    resumed = list(StepBatchSampler(10, 3, seed=1, start=4, stop=9))
    assert resumed == batches[4:]
    with pytest.raises(ValueError):
        StepBatchSampler(2, 3, seed=0)


# ===== checkpoints =====
def test_save_load_save_is_byte_identical(tmp_path):
    state = build_state(_tiny())
    fit(state, _scenes(), 2)
    a, b = tmp_path / "a.dpgk", tmp_path / "b.dpgk"
    save_checkpoint(state, str(a))
    save_checkpoint(load_checkpoint(str(a)), str(b))
    assert a.read_bytes() == b.read_bytes()


def test_load_into_mismatched_width_names_tensor(tmp_path):
    path = tmp_path / "c.dpgk"
    save_checkpoint(build_state(_tiny()), str(path))
    with pytest.raises(CheckpointError, match=r"tensor G\."):
        load_checkpoint(str(path), _tiny(width_divisor=16))


def test_resume_reproduces_unbroken_run(tmp_path):
    ds = _scenes()
    unbroken = build_state(_tiny())
    full = fit(unbroken, ds, 6)

    first = build_state(_tiny())
    head = fit(first, ds, 3)
    path = tmp_path / "mid.dpgk"
    save_checkpoint(first, str(path))
    resumed = load_checkpoint(str(path))
    tail = fit(resumed, ds, 3)
    assert head + tail == full
    for p, q in zip(unbroken.G_ema.parameters(), resumed.G_ema.parameters()):
        assert torch.equal(p, q)


def test_dataset_class_weights_mode():
    state = build_state(_tiny(class_weights="dataset"))
    fit(state, _scenes(), 1)
    assert state.class_weights is not None and state.class_weights.alpha.shape == (4,)
