"""Losses, the optimization loop and gradient verification."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .inference import forecast_quantiles
from .metrics import crps_quantile
from .model import DEFAULT_LEVELS, BTModel, FrozenNoise, Noise, save_checkpoint


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr_init: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    grad_clip_norm: float = 1.0
    elbo_anneal_epochs: int = 10
    seed: int = 0
    t_val: int = 10
    restarts: int = 0  # extra cosine cycles (warm restarts); 0 = single cycle
    max_steps_per_epoch: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("lr_init", "batch_size", "max_epochs", "patience", "grad_clip_norm", "t_val"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.elbo_anneal_epochs < 0 or self.restarts < 0:
            raise ValueError("weight_decay, elbo_anneal_epochs and restarts must be non-negative")
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        if self.max_steps_per_epoch is not None and self.max_steps_per_epoch < 1:
            raise ValueError("max_steps_per_epoch must be positive")

    @classmethod
    def full(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = dict(lr_init=1e-3, max_epochs=12, patience=4, elbo_anneal_epochs=4)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_crps: list[float] = field(default_factory=list)
    kl_weight: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1
    final_state: dict | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.val_crps)

    def rows(self):
        for e in range(len(self)):
            yield e, self.train_loss[e], self.val_crps[e], self.kl_weight[e], self.lr[e]

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("epoch", "train_loss", "val_crps", "kl_weight", "lr"))
            for e, *vals in self.rows():
                w.writerow((e, *(repr(float(v)) for v in vals)))


# ----------------------------------------------------------------------
# losses


def pinball(y, q, alpha: float):
    if not 0 < alpha < 1:
        raise ValueError("quantile level must lie in (0, 1)")
    u = np.asarray(y, dtype=np.float64) - np.asarray(q, dtype=np.float64)
    out = u * (alpha - (u < 0))
    return float(out) if out.ndim == 0 else out


def multi_quantile_loss(Q, Y, levels):
    """Mean pinball over every (horizon, level) cell.

    ``Q`` is ``(..., H, K)`` and ``Y`` is ``(..., H)``.  Works on plain
    arrays (returns a float) and on autodiff tensors (returns a Tensor).
    """
    lv = np.asarray(levels, dtype=np.float64)
    if np.any(lv <= 0) or np.any(lv >= 1):
        raise ValueError("quantile levels must lie in (0, 1)")
    q_shape = Q.shape
    Y = np.asarray(Y, dtype=np.float64)
    if q_shape[-1] != lv.size or tuple(q_shape[:-1]) != Y.shape:
        raise ValueError(f"shape mismatch: quantiles {tuple(q_shape)}, targets {Y.shape}, {lv.size} levels")
    if isinstance(Q, Tensor):
        u = Y[..., None] - Q
        # pinball(u) = alpha*u + max(-u, 0)
        return (u * lv + ad.relu(-u)).mean()
    return float(np.mean(pinball_cells(Y, Q, lv)))


def pinball_cells(Y, Q, levels) -> np.ndarray:
    u = np.asarray(Y)[..., None] - np.asarray(Q)
    return u * (np.asarray(levels) - (u < 0))


def kl_weight(epoch: int, anneal_epochs: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if anneal_epochs <= 0:
        return 1.0
    return min(1.0, epoch / anneal_epochs)


def elbo_objective(data_loss, kl_total, epoch: int, cfg: TrainConfig, n_train: int):
    """Per-sample negative-ELBO surrogate ``data + beta * KL / N``."""
    beta = kl_weight(epoch, cfg.elbo_anneal_epochs)
    if beta == 0.0:
        return data_loss
    return data_loss + kl_total * (beta / n_train)


# ----------------------------------------------------------------------
# optimization


def cosine_lr(t: float, total: float, lr_init: float, lr_min: float = 0.0, restarts: int = 0) -> float:
    """Cosine decay from ``lr_init`` to ``lr_min`` over ``total``, optionally restarted."""
    cycle = total / (restarts + 1)
    pos = t if restarts == 0 else t - cycle * min(math.floor(t / cycle), restarts)
    pos = min(max(pos, 0.0), cycle)
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * pos / cycle))


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale gradients so their global norm is at most ``max_norm``; returns (grads, pre-clip norm)."""
    norm = ad.global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return grads, norm


def decays(name: str, shape) -> bool:
    """Weight decay applies to weight matrices but not to noise scales, biases or norms."""
    return len(shape) >= 2 and not name.endswith("log_sigma")


class AdamW:
    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.weight_decay and decays(k, p.data.shape):
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update


def batch_loss(model: BTModel, X, Y, epoch: int, cfg: TrainConfig, n_train: int, mode: str,
               noise: Noise | None):
    out = model.forward(X, mode, noise)
    data = multi_quantile_loss(out, Y, model.cfg.quantile_levels)
    total = elbo_objective(data, model.kl(), epoch, cfg, n_train) if model.cfg.variational else data
    return total, out


def validation_crps(model: BTModel, X, Y, T: int, seed: int) -> float:
    q = forecast_quantiles(model, X, T, seed, DEFAULT_LEVELS)
    return float(np.mean(crps_quantile(q, DEFAULT_LEVELS, Y)))


def _training_mode(model: BTModel) -> str:
    return "stochastic" if model.cfg.is_stochastic else "deterministic"


def train(model: BTModel, dataset, cfg: TrainConfig, log=None) -> tuple[BTModel, TrainHistory]:
    """Fit ``model`` on the ``train`` windows, early-stopping on ``cal_fit`` CRPS.

    Returns the best-epoch model; the last-epoch parameters are kept in
    ``history.final_state``.
    """
    cfg.validate()
    tr, va = dataset.subset("train"), dataset.subset("cal_fit")
    if len(tr) == 0 or len(va) == 0:
        raise ValueError("training needs non-empty train and cal_fit partitions")
    n = len(tr)
    Xv, Yv = va.X(), va.Y()
    steps = math.ceil(n / cfg.batch_size)
    if cfg.max_steps_per_epoch:
        steps = min(steps, cfg.max_steps_per_epoch)
    total_steps = steps * cfg.max_epochs
    opt = AdamW(model.params, cfg.lr_init, cfg.weight_decay)
    mode = _training_mode(model)
    hist = TrainHistory()
    best_state, best = None, math.inf
    for epoch in range(cfg.max_epochs):
        order = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2, epoch))).permutation(n)
        losses = []
        for s in range(steps):
            idx = np.sort(order[s * cfg.batch_size : (s + 1) * cfg.batch_size])
            opt.lr = cosine_lr(epoch * steps + s, total_steps, cfg.lr_init, restarts=cfg.restarts)
            noise = Noise(cfg.seed, (1, epoch, s)) if mode == "stochastic" else None
            model.zero_grad()
            loss, _ = batch_loss(model, tr.X(idx), tr.Y(idx), epoch, cfg, n, mode, noise)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite loss {float(loss.data)} at epoch {epoch}, step {s}")
            loss.backward()
            names = [k for k, p in model.params.items() if p.grad is not None]
            grads, gnorm = clip_grad_norm([model.params[k].grad for k in names], cfg.grad_clip_norm)
            if not math.isfinite(gnorm):
                raise TrainingDiverged(f"non-finite gradient norm at epoch {epoch}, step {s}")
            opt.step(dict(zip(names, grads)))
            losses.append(float(loss.data))
        val = validation_crps(model, Xv, Yv, cfg.t_val, cfg.seed + 7919)
        if not math.isfinite(val):
            raise TrainingDiverged(f"non-finite validation CRPS at epoch {epoch}")
        hist.train_loss.append(float(np.mean(losses)))
        hist.val_crps.append(val)
        hist.kl_weight.append(kl_weight(epoch, cfg.elbo_anneal_epochs) if model.cfg.variational else 0.0)
        hist.lr.append(opt.lr)
        if log:
            log(f"epoch {epoch:3d}  loss {hist.train_loss[-1]:.5f}  val_crps {val:.5f}")
        if val < best:
            best, best_state, hist.best_epoch = val, model.state_dict(), epoch
        elif epoch - hist.best_epoch >= cfg.patience:
            break
    hist.final_state = model.state_dict()
    model.load_state_dict(best_state)
    model.zero_grad()
    return model, hist


def write_run_dir(out_dir, model: BTModel, history: TrainHistory, config: dict, scaler=None,
                  meta: dict | None = None) -> Path:
    """Write ``config.json``, ``history.csv``, ``best.ckpt`` and ``final.ckpt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    history.write_csv(out / "history.csv")
    meta = dict(meta or {}, best_epoch=history.best_epoch, epochs_run=len(history))
    save_checkpoint(out / "best.ckpt", model, scaler, meta)
    final = model.copy()
    if history.final_state is not None:
        final.load_state_dict(history.final_state)
    save_checkpoint(out / "final.ckpt", final, scaler, meta)
    return out


# ----------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheck:
    max_rel_error: float
    n_checked: int
    n_skipped: int
    worst: tuple[str, tuple] | None
    per_param: dict[str, float]


def _loss_and_residual_signs(model, X, Y, mode, noise, n_train):
    out = model.forward(X, mode, noise)
    data = multi_quantile_loss(out, Y, model.cfg.quantile_levels)
    total = data + model.kl() * (1.0 / n_train) if model.cfg.variational else data
    signs = (Y[..., None] - out.data) < 0
    return total, signs


def gradient_check(model: BTModel, X, Y, mode: str = "deterministic", eps: float = 1e-4,
                   per_param: int = 3, seed: int = 0, floor: float = 1e-6, n_train: int = 1000) -> GradCheck:
    """Compare reverse-mode gradients of the training objective with central differences.

    Up to ``per_param`` entries per parameter array are sampled among those
    whose analytic gradient exceeds ``floor`` (below it the difference
    quotient is dominated by rounding).  Entries whose perturbation flips the
    sign of any pinball residual straddle a kink and are skipped.  So are
    posterior means within ``100 * eps`` of zero: the KL term goes through
    ``log(mu^2)``, whose curvature there makes the difference quotient's
    truncation error exceed the tolerance.  In stochastic mode one noise
    realization is recorded and replayed.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim == 2:
        X, Y = X[None], Y[None]
    noise = FrozenNoise(seed, (99,)) if mode == "stochastic" else None
    model.zero_grad()
    loss, _ = _loss_and_residual_signs(model, X, Y, mode, noise, n_train)
    loss.backward()
    rng = np.random.default_rng(seed)
    worst_err, worst = 0.0, None
    checked = skipped = 0
    per = {}
    for name, p in model.params.items():
        if p.grad is None:
            continue
        g = p.grad.reshape(-1)
        ok = np.abs(g) > floor
        if model.cfg.variational and name.endswith(".mu"):
            near_zero = np.abs(p.data.reshape(-1)) < 100 * eps
            skipped += int(np.sum(ok & near_zero))
            ok &= ~near_zero
        cand = np.flatnonzero(ok)
        rng.shuffle(cand)
        errs = []
        for j in cand:
            if len(errs) >= per_param:
                break
            flat = p.data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + eps
            lp, sp = _loss_and_residual_signs(model, X, Y, mode, noise, n_train)
            flat[j] = orig - eps
            lm, sm = _loss_and_residual_signs(model, X, Y, mode, noise, n_train)
            flat[j] = orig
            if not np.array_equal(sp, sm):
                skipped += 1
                continue
            cd = (float(lp.data) - float(lm.data)) / (2.0 * eps)
            a = float(g[j])
            err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
            errs.append(err)
            checked += 1
            if err > worst_err:
                worst_err, worst = err, (name, np.unravel_index(j, p.data.shape))
        if errs:
            per[name] = max(errs)
    model.zero_grad()
    return GradCheck(worst_err, checked, skipped, worst, per)


def finite_difference_check(model: BTModel, X, Y, mode: str = "deterministic", eps: float = 1e-4,
                            **kwargs) -> float:
    """Maximum relative error between analytic and central-difference gradients."""
    return gradient_check(model, X, Y, mode, eps, **kwargs).max_rel_error
