import math
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from btload import training as tr
from btload.autodiff import Tensor
from btload.data import WindowDataset
from btload.model import BTModel, ModelConfig


def test_pinball_examples():
    assert tr.pinball(100, 90, 0.9) == pytest.approx(9.0, abs=1e-12)
    assert tr.pinball(90, 100, 0.9) == pytest.approx(1.0, abs=1e-12)
    assert tr.pinball(5.0, 5.0, 0.3) == 0.0
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            tr.pinball(1.0, 0.0, bad)


def test_multi_quantile_examples():
    assert tr.multi_quantile_loss(np.array([[8.0, 12.0]]), np.array([10.0]), [0.5, 0.9]) == pytest.approx(0.6, abs=1e-12)
    Y = np.arange(4.0)
    assert tr.multi_quantile_loss(np.repeat(Y[:, None], 3, axis=1), Y, [0.1, 0.5, 0.9]) == 0.0
    with pytest.raises(ValueError):
        tr.multi_quantile_loss(np.zeros((3, 2)), np.zeros(4), [0.1, 0.9])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.floats(-50, 50))
def test_multi_quantile_homogeneous(q, y):
    levels = [0.1, 0.5, 0.9]
    Q = np.array([q])
    Y = np.array([y])
    base = tr.multi_quantile_loss(Q, Y, levels)
    doubled = tr.multi_quantile_loss(2 * Q, 2 * Y, levels)
    assert doubled == pytest.approx(2 * base, rel=1e-9, abs=1e-12)


def test_tensor_and_array_losses_agree():
    rng = np.random.default_rng(0)
    Q, Y = rng.standard_normal((5, 3, 7)), rng.standard_normal((5, 3))
    levels = (0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95)
    assert tr.multi_quantile_loss(Tensor(Q), Y, levels).item() == pytest.approx(tr.multi_quantile_loss(Q, Y, levels), rel=1e-13)


def test_pinball_minimiser_recovers_quantile():
    y = np.random.default_rng(0).standard_normal(100_000)
    res = minimize_scalar(lambda q: np.mean(tr.pinball(y, q, 0.9)), bracket=(-3, 1, 3), method="golden")
    assert abs(res.x - 1.2816) <= 0.05


def test_kl_weight_schedule():
    cfg = tr.TrainConfig()
    assert tr.kl_weight(0, cfg.elbo_anneal_epochs) == 0.0
    assert tr.kl_weight(5, 10) == 0.5
    assert tr.kl_weight(10, cfg.elbo_anneal_epochs) == 1.0 and tr.kl_weight(50, 10) == 1.0
    betas = [tr.kl_weight(e, 7) for e in range(20)]
    assert all(b2 >= b1 for b1, b2 in zip(betas, betas[1:])) and betas[-1] == 1.0
    assert tr.elbo_objective(2.0, 1000.0, 0, cfg, 100) == 2.0
    assert tr.elbo_objective(2.0, 1000.0, 10, cfg, 100) == 12.0


def test_cosine_endpoints():
    assert tr.cosine_lr(0, 100, 1e-4) == 1e-4
    assert tr.cosine_lr(100, 100, 1e-4) <= 1e-7
    lrs = [tr.cosine_lr(t, 100, 1.0) for t in range(101)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    restart = [tr.cosine_lr(t, 100, 1.0, restarts=1) for t in (0, 49, 50)]
    assert restart[0] == 1.0 and restart[2] == 1.0 and restart[1] < 0.01


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 10), st.integers(0, 2**31))
def test_clip_contract(max_norm, seed):
    rng = np.random.default_rng(seed)
    grads = [rng.standard_normal((3, 4)) * rng.uniform(0.01, 5), rng.standard_normal(5)]
    out, pre = tr.clip_grad_norm(grads, max_norm)
    post = math.sqrt(sum(float(np.sum(g * g)) for g in out))
    if pre > max_norm:
        assert post <= max_norm + 1e-9
    else:
        assert all(np.array_equal(a, b) for a, b in zip(out, grads))


def test_train_config_invariants():
    with pytest.raises(ValueError):
        tr.TrainConfig(patience=100, max_epochs=100)
    with pytest.raises(ValueError):
        tr.TrainConfig(lr_init=0)


def test_weight_decay_skips_noise_scales():
    assert tr.decays("blocks.0.ffn1.mu", (4, 4))
    assert not tr.decays("blocks.0.ffn1.log_sigma", (4, 4))
    assert not tr.decays("blocks.0.ffn1.b", (4,))


# -- gradient checks ---------------------------------------------------


def test_single_linear_layer_gradient_is_exact():
    # quadratic landscape: central differences carry no truncation error
    rng = np.random.default_rng(0)
    W = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    x = rng.standard_normal((5, 3))
    y = rng.standard_normal((5, 2))

    def loss():
        r = x @ W - y
        return (r * r).mean()

    loss().backward()
    eps = 1e-4
    for idx in np.ndindex(W.shape):
        old = W.data[idx]
        W.data[idx] = old + eps
        hi = loss().item()
        W.data[idx] = old - eps
        lo = loss().item()
        W.data[idx] = old
        assert abs((hi - lo) / (2 * eps) - W.grad[idx]) < 1e-10


def tiny_model(**kw):
    base = dict(n_layers=1, n_heads=2, d_model=8, d_ff=16, lookback=32, horizon=4, d_in=3, attn_noise_init=0.3)
    base.update(kw)
    return BTModel(ModelConfig(**base))


@pytest.mark.parametrize("mode", ["deterministic", "stochastic"])
def test_gradient_check_tiny(mode):
    rng = np.random.default_rng(1)
    X, Y = rng.standard_normal((3, 32, 3)), rng.standard_normal((3, 4))
    res = tr.gradient_check(tiny_model(), X, Y, mode, per_param=4)
    assert res.n_checked > 20
    assert res.max_rel_error < 1e-4


def test_gradient_check_detects_a_wrong_gradient(monkeypatch):
    from btload import autodiff as ad

    real = ad.gelu

    def broken(a):
        out = real(a)
        bw = out._backward
        out._backward = lambda g: tuple(1.1 * x for x in bw(g))
        return out

    monkeypatch.setattr(ad, "gelu", broken)
    rng = np.random.default_rng(2)
    res = tr.gradient_check(tiny_model(), rng.standard_normal((2, 32, 3)), rng.standard_normal((2, 4)))
    assert res.max_rel_error > 1e-3


# -- training loop -------------------------------------------------------


def linear_dataset(n_hours=700, seed=0):
    """Load follows a clean daily sinusoid plus a little noise."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_hours)
    load = np.sin(2 * np.pi * t / 24) + 0.05 * rng.standard_normal(n_hours)
    values = np.column_stack([load, np.sin(2 * np.pi * t / 24), np.cos(2 * np.pi * t / 24)])
    origins = np.arange(31, n_hours - 4)
    n = origins.size
    part = np.array(["train"] * (n - 60) + ["cal_fit"] * 30 + ["test"] * 30, dtype=object)
    ts = np.datetime64("2020-01-01T00", "h") + t * np.timedelta64(1, "h")
    return WindowDataset(values, ts, origins, 32, 4, partition=part, columns=("load", "a", "b"))


def test_training_improves_validation_crps():
    ds = linear_dataset()
    cfg = tr.TrainConfig(lr_init=3e-3, max_epochs=6, patience=5, elbo_anneal_epochs=2, batch_size=32)
    model, hist = tr.train(tiny_model(), ds, cfg)
    assert len(hist) <= cfg.max_epochs
    assert min(hist.val_crps) < hist.val_crps[0]
    assert hist.val_crps[hist.best_epoch] == min(hist.val_crps)


def test_training_is_deterministic():
    ds = linear_dataset()
    cfg = tr.TrainConfig(lr_init=3e-3, max_epochs=3, patience=2, elbo_anneal_epochs=1)
    _, h1 = tr.train(tiny_model(), ds, cfg)
    _, h2 = tr.train(tiny_model(), ds, cfg)
    assert h1 == h2


def test_early_stopping_length(monkeypatch):
    # scripted validation curve: best at epoch 3, then flat
    curve = iter([5.0, 4.0, 3.0, 2.0, 2.5, 2.0, 3.0, 1.0, 0.5, 0.1])
    monkeypatch.setattr(tr, "validation_crps", lambda *a, **k: next(curve))
    cfg = tr.TrainConfig(lr_init=1e-3, max_epochs=10, patience=3, elbo_anneal_epochs=0)
    _, hist = tr.train(tiny_model(), linear_dataset(), cfg)
    assert hist.best_epoch == 3
    assert len(hist) == hist.best_epoch + cfg.patience + 1
    assert len(hist) <= cfg.max_epochs


def test_training_runs_to_max_epochs_when_improving(monkeypatch):
    curve = iter(np.linspace(1.0, 0.1, 4))
    monkeypatch.setattr(tr, "validation_crps", lambda *a, **k: next(curve))
    _, hist = tr.train(tiny_model(), linear_dataset(), tr.TrainConfig(max_epochs=4, patience=1))
    assert len(hist) == 4 and hist.best_epoch == 3


def test_divergence_guard():
    ds = linear_dataset()
    bad = ds.with_values(np.where(np.arange(ds.values.shape[0])[:, None] == 100, np.inf, ds.values))
    with pytest.raises(tr.TrainingDiverged):
        tr.train(tiny_model(), bad, tr.TrainConfig(max_epochs=2, patience=1))


def test_training_needs_partitions():
    ds = linear_dataset()
    with pytest.raises(ValueError):
        tr.train(tiny_model(), ds.subset("train"), tr.TrainConfig(max_epochs=2, patience=1))


def test_run_dir_contents(tmp_path):
    ds = linear_dataset()
    cfg = tr.TrainConfig(lr_init=3e-3, max_epochs=2, patience=1)
    model, hist = tr.train(tiny_model(), ds, cfg)
    tr.write_run_dir(tmp_path / "run", model, hist, {"train": cfg.to_dict()})
    assert sorted(p.name for p in (tmp_path / "run").iterdir()) == ["best.ckpt", "config.json", "final.ckpt", "history.csv"]
    lines = (tmp_path / "run" / "history.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_crps,kl_weight,lr" and len(lines) == len(hist) + 1
