import copy

import numpy as np
import pytest
import torch
import torch.nn.functional as F

import regionsynth.train as train_mod
from regionsynth.errors import CheckpointError, ParameterError, ShapeError, TrainingError
from regionsynth.losses import LossWeights
from regionsynth.rcd import posterior_sample
from regionsynth.schedule import diffuse_pair
from regionsynth.train import (METRIC_KEYS, TrainConfig, ema_update, format_metrics, init_state,
                               load_checkpoint, parse_metrics_line, run_training, save_checkpoint,
                               train_step)


def params_of(module):
    return [p.detach().clone() for p in module.parameters()]


def assert_params_equal(a, b):
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert torch.equal(x, y)


def run_steps(cfg, batch, n):
    state = init_state(cfg)
    logs = []
    for _ in range(n):
        state, met = train_step(state, batch, cfg)
        logs.append(met)
    return state, logs


def test_fixed_seed_is_deterministic(tiny_cfg, toy_batch):
    s1, l1 = run_steps(tiny_cfg, toy_batch, 3)
    s2, l2 = run_steps(tiny_cfg, toy_batch, 3)
    assert l1 == l2
    assert_params_equal(params_of(s1.generator), params_of(s2.generator))
    assert_params_equal(params_of(s1.discriminator), params_of(s2.discriminator))
    assert_params_equal(params_of(s1.ema), params_of(s2.ema))


def test_zero_learning_rate_freezes_everything(tiny_cfg, toy_batch):
    cfg = copy.replace(tiny_cfg, lr_g=0.0, lr_d=0.0) if hasattr(copy, "replace") else \
        TrainConfig(**{**tiny_cfg.to_dict(), "lr_g": 0.0, "lr_d": 0.0})
    state = init_state(cfg)
    g0, d0, e0 = params_of(state.generator), params_of(state.discriminator), params_of(state.ema)
    for _ in range(2):
        state, met = train_step(state, toy_batch, cfg)
        assert np.isfinite([met[k] for k in METRIC_KEYS[1:]]).all()
    assert_params_equal(g0, params_of(state.generator))
    assert_params_equal(d0, params_of(state.discriminator))
    assert_params_equal(e0, params_of(state.ema))


def test_parameters_move_with_positive_lr(tiny_cfg, toy_batch):
    state = init_state(tiny_cfg)
    g0 = params_of(state.generator)
    state, _ = train_step(state, toy_batch, tiny_cfg)
    assert any(not torch.equal(a, b) for a, b in zip(g0, params_of(state.generator)))


def test_ema_examples():
    shadow = [torch.tensor([0.0])]
    ema_update(shadow, [torch.tensor([1.0])], 0.9)
    assert shadow[0].item() == pytest.approx(0.1, abs=1e-7)
    same = [torch.tensor([0.3, -2.0])]
    ema_update(same, [torch.tensor([0.3, -2.0])], 0.999)
    assert torch.equal(same[0], torch.tensor([0.3, -2.0]))
    with pytest.raises(ShapeError):
        ema_update([torch.zeros(2)], [torch.zeros(3)], 0.5)
    with pytest.raises(ParameterError):
        ema_update([torch.zeros(2)], [torch.zeros(2)], 1.0)


def test_ema_shapes_preserved_every_step(tiny_cfg, toy_batch):
    state = init_state(tiny_cfg)
    shapes = [p.shape for p in state.generator.parameters()]
    for _ in range(3):
        state, _ = train_step(state, toy_batch, tiny_cfg)
        assert [p.shape for p in state.ema.parameters()] == shapes


@pytest.mark.parametrize("dmg", [True, False])
def test_loss_bookkeeping(tiny_cfg, toy_batch, dmg):
    cfg = TrainConfig(**{**tiny_cfg.to_dict(), "dmg_enabled": dmg,
                         "weights": LossWeights(lambda_img=0.8, lambda_mask=1.7, alpha=3.0)})
    _, logs = run_steps(cfg, toy_batch, 3)
    w = cfg.weights
    for met in logs:
        rebuilt = w.lambda_img * met["adv_img"] + w.lambda_mask * met["adv_mask"] + w.alpha * met["mse"]
        assert abs(met["l_g"] - rebuilt) <= 1e-8
        if not dmg:
            assert met["adv_mask"] == 0.0


def hand_step(state, batch, cfg, fuse):
    """Independent re-derivation of one update with the same RNG stream."""
    x0, m = batch
    gen, disc, sched, rng = state.generator, state.discriminator, state.schedule, state.rng
    w = cfg.weights
    t = torch.randint(1, sched.T + 1, (x0.shape[0],), generator=rng)
    eps1, eps2 = torch.randn(x0.shape, generator=rng), torch.randn(x0.shape, generator=rng)
    z = torch.randn(x0.shape[0], cfg.z_dim, generator=rng)
    noise = torch.randn(x0.shape, generator=rng)
    x_prev, x_t = diffuse_pair(x0, t, eps1, eps2, sched)
    if fuse:
        x_prev = m * x_prev + (1 - m) * x_t
    sp = lambda v: F.softplus(v.double())  # noqa: E731

    xr = x_prev.detach().requires_grad_(True)
    ri, rf = disc(torch.cat([xr, x_t], 1), m, t)
    (grad,) = torch.autograd.grad(ri.sum(), xr, create_graph=True)
    r1 = w.r1_gamma / 2 * grad.pow(2).flatten(1).sum(1).mean()
    x_hat0 = gen(x_t, t, z)
    xf = posterior_sample(x_hat0, x_t, t, noise, sched)
    if fuse:
        xf = m * xf + (1 - m) * x_t
    fi, ff = disc(torch.cat([xf.detach(), x_t], 1), m, t)
    l_d = (sp(-ri) + sp(fi)).mean()
    if cfg.dmg_enabled:
        l_d = l_d + w.lambda_d * (sp(-rf) + sp(ff)).mean()
    l_d = l_d + r1.double()
    state.opt_d.zero_grad(set_to_none=True)
    l_d.backward()
    state.opt_d.step()

    disc.requires_grad_(False)
    gi, gf = disc(torch.cat([xf, x_t], 1), m, t)
    d2 = (x_hat0.double() - x0.double()) ** 2
    md = m.double()
    mse = (md * d2 + w.beta * (1 - md) * d2).sum() / d2.numel()
    l_g = w.lambda_img * sp(-gi).mean() + w.alpha * mse
    if cfg.dmg_enabled:
        l_g = l_g + w.lambda_mask * sp(-gf).mean()
    state.opt_g.zero_grad(set_to_none=True)
    l_g.backward()
    state.opt_g.step()
    disc.requires_grad_(True)
    return float(l_d.detach()), float(l_g.detach())


def grads_of(module):
    return [p.grad.detach().clone() if p.grad is not None else None for p in module.parameters()]


@pytest.mark.parametrize("rcd,dmg", [(False, False), (False, True), (True, False), (True, True)])
def test_ablation_matches_hand_built_step(tiny_cfg, toy_batch, rcd, dmg):
    # lr = 0 keeps both copies identical, so the stored gradients of the D and G
    # updates can be compared directly
    cfg = TrainConfig(**{**tiny_cfg.to_dict(), "rcd_enabled": rcd, "dmg_enabled": dmg,
                         "lr_g": 0.0, "lr_d": 0.0})
    a = init_state(cfg)
    b = init_state(cfg)
    a, met = train_step(a, toy_batch, cfg)
    l_d, l_g = hand_step(b, toy_batch, cfg, fuse=rcd)
    assert met["l_d"] == pytest.approx(l_d, rel=1e-9, abs=1e-12)
    assert met["l_g"] == pytest.approx(l_g, rel=1e-9, abs=1e-12)
    for name in ("generator", "discriminator"):
        ga, gb = grads_of(getattr(a, name)), grads_of(getattr(b, name))
        for x, y in zip(ga, gb):
            assert (x is None) == (y is None)
            if x is not None:
                torch.testing.assert_close(x, y, rtol=1e-4, atol=1e-7)


def test_rcd_off_never_calls_fuse(tiny_cfg, toy_batch, monkeypatch):
    calls = []
    real = train_mod.rcd_fuse
    monkeypatch.setattr(train_mod, "rcd_fuse", lambda *a: calls.append(1) or real(*a))
    cfg = TrainConfig(**{**tiny_cfg.to_dict(), "rcd_enabled": False})
    train_step(init_state(cfg), toy_batch, cfg)
    assert calls == []
    cfg_on = TrainConfig(**{**tiny_cfg.to_dict(), "rcd_enabled": True})
    train_step(init_state(cfg_on), toy_batch, cfg_on)
    assert len(calls) == 2


def test_dmg_off_drops_foreground_terms_exactly(tiny_cfg, toy_batch):
    # with dmg off the logged values must not depend on lambda_d or lambda_mask at all
    base = {**tiny_cfg.to_dict(), "dmg_enabled": False}
    _, l1 = run_steps(TrainConfig(**base), toy_batch, 2)
    _, l2 = run_steps(TrainConfig(**{**base, "weights": LossWeights(lambda_d=5.0, lambda_mask=9.0)}),
                      toy_batch, 2)
    assert l1 == l2


def test_nan_batch_raises(tiny_cfg, toy_batch):
    state = init_state(tiny_cfg)
    with torch.no_grad():
        next(state.generator.parameters()).fill_(float("nan"))
    with pytest.raises(TrainingError, match="iteration 1"):
        train_step(state, toy_batch, tiny_cfg)


def test_metrics_line_round_trip():
    met = {k: 0.5 for k in METRIC_KEYS}
    met["iter"] = 12
    line = format_metrics(met)
    assert line.startswith("iter=12 l_d=0.5")
    assert parse_metrics_line(line) == met


def dataset_from(batch, n=6):
    x0, m = batch
    return x0.repeat(n // 2, 1, 1, 1), m.repeat(n // 2, 1, 1, 1)


def test_zero_iterations_writes_init_checkpoint(tiny_cfg, toy_batch, tmp_path):
    cfg = TrainConfig(**{**tiny_cfg.to_dict(), "iterations": 0})
    path = run_training(cfg, dataset_from(toy_batch), tmp_path)
    state, loaded_cfg = load_checkpoint(path)
    assert state.iteration == 0 and loaded_cfg == cfg
    assert_params_equal(params_of(state.generator), params_of(init_state(cfg).generator))
    assert (tmp_path / "metrics.log").read_text() == ""


def test_metrics_log_and_sidecar(tiny_cfg, toy_batch, tmp_path):
    path = run_training(tiny_cfg, dataset_from(toy_batch), tmp_path)
    lines = (tmp_path / "metrics.log").read_text().splitlines()
    assert len(lines) == 3
    for i, line in enumerate(lines, 1):
        rec = parse_metrics_line(line)
        assert list(rec) == list(METRIC_KEYS) and rec["iter"] == i
    sidecar = path.with_name(path.name + ".manifest.txt").read_text()
    assert "generator." in sidecar and "discriminator.psi.weight" in sidecar and "rng_state" in sidecar
    assert not list(tmp_path.rglob("*.tmp"))


def test_resume_reproduces_uninterrupted_run(tiny_cfg, toy_batch, tmp_path):
    data = dataset_from(toy_batch)
    cfg = TrainConfig(**{**tiny_cfg.to_dict(), "iterations": 4, "checkpoint_interval": 2})
    full = run_training(cfg, data, tmp_path / "a")
    mid = tmp_path / "a" / "checkpoints" / "ckpt_000002.pt"
    assert mid.is_file()
    resumed = run_training(cfg, data, tmp_path / "b", resume_from=mid)
    sa, _ = load_checkpoint(full)
    sb, _ = load_checkpoint(resumed)
    assert sa.iteration == sb.iteration == 4
    for name in ("generator", "discriminator", "ema"):
        assert_params_equal(params_of(getattr(sa, name)), params_of(getattr(sb, name)))
    tail = (tmp_path / "a" / "metrics.log").read_text().splitlines()[2:]
    assert tail == (tmp_path / "b" / "metrics.log").read_text().splitlines()


def test_resume_with_other_config_rejected(tiny_cfg, toy_batch, tmp_path):
    path = run_training(tiny_cfg, dataset_from(toy_batch), tmp_path)
    other = TrainConfig(**{**tiny_cfg.to_dict(), "lr_g": 1e-3})
    with pytest.raises(CheckpointError):
        run_training(other, dataset_from(toy_batch), tmp_path / "x", resume_from=path)


def test_checkpoint_version_mismatch(tiny_cfg, tmp_path):
    path = save_checkpoint(init_state(tiny_cfg), tiny_cfg, tmp_path / "c.pt")
    payload = torch.load(path, weights_only=False)
    payload["version"] = 99
    torch.save(payload, path)
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(path)
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "missing.pt")


def test_checkpoint_shape_mismatch(tiny_cfg, tmp_path):
    path = save_checkpoint(init_state(tiny_cfg), tiny_cfg, tmp_path / "c.pt")
    payload = torch.load(path, weights_only=False)
    payload["config"]["gen_base_channels"] = 16
    torch.save(payload, path)
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(path)


def test_config_dict_round_trip(tiny_cfg):
    assert TrainConfig.from_dict(tiny_cfg.to_dict()) == tiny_cfg
    with pytest.raises(ParameterError):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ParameterError):
        TrainConfig(ema_decay=1.0)


def test_channel_mismatch_rejected(tiny_cfg, tmp_path):
    x = torch.zeros(2, 1, 16, 16)
    m = torch.zeros(2, 1, 16, 16)
    with pytest.raises(ShapeError):
        run_training(tiny_cfg, (x, m), tmp_path)
