"""Bayesian patch Transformer for multi-horizon, multi-quantile load forecasts.

The network maps a standardized lookback window ``X`` (L x d_in) to an
``H x K`` array of quantiles.  It has three stochastic mechanisms, each of
which can be switched off independently:

* inverted dropout after every attention and feed-forward sublayer, kept
  active whenever the model runs in ``"stochastic"`` mode;
* Gaussian weight posteriors ``w = mu + eps * sigma`` in the feed-forward
  layers, trained against a log-uniform prior;
* Gaussian noise with a learned scale added to the pre-softmax attention
  logits.

All randomness comes from a :class:`Noise` object so that passes can be
replayed exactly (finite-difference checks) or keyed to a pass index (MC
inference).
"""

from __future__ import annotations

import base64
import json
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .isotonic import monotone_rows

DEFAULT_LEVELS = (0.05, 0.10, 0.25, 0.50, 0.75, 0.90, 0.95)
CHECKPOINT_FORMAT = "btload-checkpoint/1"

# constants of the sigmoid approximation to KL(N(mu, sigma^2) || log-uniform)
KL_K1, KL_K2, KL_K3 = 0.63576, 1.87320, 1.48695

MODES = ("deterministic", "stochastic")


@dataclass
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    patch_len: int = 16
    lookback: int = 168
    horizon: int = 24
    d_in: int = 14
    quantile_levels: tuple[float, ...] = DEFAULT_LEVELS
    dropout_retention: float = 0.90
    attn_noise_init: float = 0.01
    variational: bool = True
    stochastic_attention: bool = True
    log_sigma_init: float = -5.0
    local_reparam: bool = False
    seed: int = 0

    def __post_init__(self):
        self.quantile_levels = tuple(float(a) for a in self.quantile_levels)
        self.validate()

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        lv = np.asarray(self.quantile_levels)
        if lv.size == 0 or np.any(lv <= 0) or np.any(lv >= 1) or np.any(np.diff(lv) <= 0):
            raise ValueError("quantile_levels must be strictly increasing inside (0, 1)")
        if not 0 < self.dropout_retention <= 1:
            raise ValueError("dropout_retention must lie in (0, 1]")
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "patch_len", "lookback", "horizon", "d_in"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.stochastic_attention and not self.attn_noise_init > 0:
            raise ValueError("attn_noise_init must be positive (it is stored as a log)")

    @property
    def n_patches(self) -> int:
        return math.ceil(self.lookback / self.patch_len)

    @property
    def K(self) -> int:
        return len(self.quantile_levels)

    @property
    def uses_dropout(self) -> bool:
        return self.dropout_retention < 1.0

    @property
    def is_stochastic(self) -> bool:
        return self.uses_dropout or self.variational or self.stochastic_attention

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        base = dict(n_layers=6, n_heads=8, d_model=512, d_ff=2048)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["quantile_levels"] = list(self.quantile_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ----------------------------------------------------------------------
# randomness


class Noise:
    """Independent random streams for one forward pass.

    Each mechanism draws from its own stream, so enabling one mechanism never
    changes the draws seen by another.  Streams are keyed by ``(seed, *key)``
    through ``SeedSequence.spawn_key``, which makes pass ``t`` of an MC run
    reproducible regardless of execution order.
    """

    KINDS = ("dropout", "weight", "attention")

    def __init__(self, seed: int = 0, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self._rngs = {
            kind: np.random.default_rng(
                np.random.SeedSequence(self.seed & (2**64 - 1), spawn_key=self.key + (i,))
            )
            for i, kind in enumerate(self.KINDS)
        }

    def normal(self, kind: str, shape) -> np.ndarray:
        return self._rngs[kind].standard_normal(shape)

    def keep_mask(self, shape, p: float) -> np.ndarray:
        return (self._rngs["dropout"].random(shape) < p).astype(np.float64)

    def rewind(self) -> None:
        pass


class FrozenNoise(Noise):
    """Records the draws of the first pass and replays them afterwards.

    Call :meth:`rewind` before each forward pass that should see the same
    realizations.
    """

    def __init__(self, seed: int = 0, key: tuple[int, ...] = ()):
        super().__init__(seed, key)
        self._tape: list[np.ndarray] = []
        self._cursor = 0

    def _replay(self, draw) -> np.ndarray:
        if self._cursor < len(self._tape):
            out = self._tape[self._cursor]
        else:
            out = draw()
            self._tape.append(out)
        self._cursor += 1
        return out

    def normal(self, kind, shape):
        return self._replay(lambda: super(FrozenNoise, self).normal(kind, shape))

    def keep_mask(self, shape, p):
        return self._replay(lambda: super(FrozenNoise, self).keep_mask(shape, p))

    def rewind(self) -> None:
        self._cursor = 0


# ----------------------------------------------------------------------
# building blocks


def positional_encoding(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


def to_patches(X: np.ndarray, patch_len: int) -> np.ndarray:
    """(B, L, d_in) -> (B, ceil(L/P), P*d_in), left-padding with the oldest row."""
    B, L, d_in = X.shape
    n = math.ceil(L / patch_len)
    pad = n * patch_len - L
    if pad:
        X = np.concatenate([np.repeat(X[:, :1, :], pad, axis=1), X], axis=1)
    return X.reshape(B, n, patch_len * d_in)


def patch_embed(X: np.ndarray, W: Tensor, b: Tensor, pe: np.ndarray, patch_len: int) -> Tensor:
    patches = to_patches(np.asarray(X, dtype=np.float64), patch_len)
    return patches @ W + b + pe


def mc_dropout(x, p: float, mode: str, noise: Noise | None):
    """Inverted dropout with keep probability ``p``; identity in deterministic mode."""
    if mode == "deterministic" or p >= 1.0:
        return x
    shape = x.shape if isinstance(x, Tensor) else np.shape(x)
    mask = noise.keep_mask(shape, p) * (1.0 / p)
    return x * mask


def variational_linear(x: Tensor, mu: Tensor, log_sigma: Tensor | None, bias: Tensor, mode: str,
                       noise: Noise | None, local_reparam: bool = False) -> Tensor:
    """Affine map with a Gaussian weight posterior.

    In stochastic mode a fresh weight matrix ``mu + eps * exp(log_sigma)`` is
    drawn per call (shared by the whole batch).  With ``local_reparam`` the
    pre-activations are sampled instead, which is cheaper but draws
    independent noise per example.
    """
    if log_sigma is None or mode == "deterministic":
        return x @ mu + bias
    sigma = ad.exp(log_sigma)
    if local_reparam:
        mean = x @ mu + bias
        var = (x * x) @ (sigma * sigma)
        eps = noise.normal("weight", mean.shape)
        return mean + ad.power(var + 1e-16, 0.5) * eps
    eps = noise.normal("weight", mu.shape)
    return x @ (mu + sigma * eps) + bias


def kl_log_uniform(mu: Tensor, log_sigma: Tensor) -> Tensor:
    """Approximate KL(N(mu, sigma^2) || log-uniform) summed over weights.

    Uses the sigmoid fit in ``alpha = sigma^2 / mu^2``; the value depends on
    the parameters only through ``alpha``, is non-negative, and decreases to
    0 as ``alpha`` grows.
    """
    log_alpha = 2.0 * log_sigma - ad.log(mu * mu + 1e-16)
    per_weight = KL_K1 - KL_K1 * ad.sigmoid(KL_K2 + KL_K3 * log_alpha) + 0.5 * ad.softplus(-log_alpha)
    return per_weight.sum()


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    return ad.normalize(x) * gamma + beta


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, n, d = x.shape
    return x.reshape(B, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def stochastic_attention(tokens: Tensor, p: dict[str, Tensor], n_heads: int, mode: str,
                         noise: Noise | None, return_weights: bool = False):
    """Multi-head self-attention with optional Gaussian logit noise.

    ``p`` holds ``Wq, bq, Wk, bk, Wv, bv, Wo, bo`` and optionally
    ``log_sigma`` (the log noise scale).  The residual connection and
    normalization are applied by the caller.
    """
    B, n, d = tokens.shape
    dk = d // n_heads
    q = _split_heads(tokens @ p["Wq"] + p["bq"], n_heads)
    k = _split_heads(tokens @ p["Wk"] + p["bk"], n_heads)
    v = _split_heads(tokens @ p["Wv"] + p["bv"], n_heads)
    logits = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dk))
    if mode == "stochastic" and "log_sigma" in p:
        eps = noise.normal("attention", logits.shape)
        logits = logits + ad.exp(p["log_sigma"]) * eps
    weights = ad.softmax(logits, axis=-1)
    ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
    out = ctx @ p["Wo"] + p["bo"]
    return (out, weights) if return_weights else out


# ----------------------------------------------------------------------
# the model


def _init_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed & (2**64 - 1), spawn_key=(zlib.crc32(name.encode()),)))


class BTModel:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None):
        cfg.validate()
        self.cfg = cfg
        self.pe = positional_encoding(cfg.n_patches, cfg.d_model)
        shapes = self.param_shapes()
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            value = self._init_value(name, shape) if params is None else np.asarray(params[name], dtype=np.float64)
            if value.shape != shape:
                raise ValueError(f"parameter {name} has shape {value.shape}, expected {shape}")
            self.params[name] = Tensor(value.copy(), requires_grad=True, name=name)

    # -- parameter layout ------------------------------------------------
    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.cfg
        d, f = c.d_model, c.d_ff
        shapes: dict[str, tuple[int, ...]] = {
            "embed.W": (c.patch_len * c.d_in, d),
            "embed.b": (d,),
        }
        for i in range(c.n_layers):
            pre = f"blocks.{i}."
            for m in ("q", "k", "v", "o"):
                shapes[pre + f"attn.W{m}"] = (d, d)
                shapes[pre + f"attn.b{m}"] = (d,)
            if c.stochastic_attention:
                shapes[pre + "attn.log_sigma"] = ()
            shapes[pre + "ln1.gamma"] = (d,)
            shapes[pre + "ln1.beta"] = (d,)
            for j, (fi, fo) in enumerate(((d, f), (f, d)), start=1):
                shapes[pre + f"ffn{j}.mu"] = (fi, fo)
                if c.variational:
                    shapes[pre + f"ffn{j}.log_sigma"] = (fi, fo)
                shapes[pre + f"ffn{j}.b"] = (fo,)
            shapes[pre + "ln2.gamma"] = (d,)
            shapes[pre + "ln2.beta"] = (d,)
        shapes["head.W"] = (c.n_patches * d, c.horizon * c.K)
        shapes["head.b"] = (c.horizon * c.K,)
        return shapes

    def _init_value(self, name: str, shape) -> np.ndarray:
        c = self.cfg
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith("attn.log_sigma"):
            return np.asarray(math.log(c.attn_noise_init))
        if leaf == "log_sigma":
            return np.full(shape, c.log_sigma_init)
        if leaf == "gamma":
            return np.ones(shape)
        if leaf in ("beta", "b") or leaf.startswith("b"):
            if name == "head.b":
                # spread the initial quantiles in level order
                z = _probit(np.asarray(c.quantile_levels))
                return np.tile(0.1 * z, c.horizon)
            return np.zeros(shape)
        bound = 1.0 / math.sqrt(shape[0])
        return _init_rng(c.seed, name).uniform(-bound, bound, size=shape)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64, copy=True)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "BTModel":
        return BTModel(replace(self.cfg), self.state_dict())

    # -- noise scales ----------------------------------------------------
    def attention_noise_scales(self) -> list[float]:
        return [
            float(np.exp(self.params[f"blocks.{i}.attn.log_sigma"].data))
            for i in range(self.cfg.n_layers)
            if f"blocks.{i}.attn.log_sigma" in self.params
        ]

    def silence_noise(self) -> None:
        """Set every learned noise scale to exactly zero (sigma_a = sigma_w = 0)."""
        for name, p in self.params.items():
            if name.endswith("log_sigma"):
                p.data = np.full_like(p.data, -np.inf)

    # -- forward -----------------------------------------------------------
    def kl(self) -> Tensor:
        total = Tensor(0.0)
        if not self.cfg.variational:
            return total
        for i in range(self.cfg.n_layers):
            for j in (1, 2):
                pre = f"blocks.{i}.ffn{j}."
                total = total + kl_log_uniform(self.params[pre + "mu"], self.params[pre + "log_sigma"])
        return total

    def forward(self, X, mode: str = "deterministic", noise: Noise | None = None) -> Tensor:
        """Raw (B, H, K) head output; non-crossing is not enforced here."""
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        c = self.cfg
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        if X.ndim != 3 or X.shape[1:] != (c.lookback, c.d_in):
            raise ValueError(f"input shape {X.shape} does not match (B, {c.lookback}, {c.d_in})")
        if mode == "stochastic":
            if noise is None:
                raise ValueError("stochastic mode needs a Noise source")
            noise.rewind()
        P = self.params
        x = patch_embed(X, P["embed.W"], P["embed.b"], self.pe, c.patch_len)
        for i in range(c.n_layers):
            pre = f"blocks.{i}."
            attn_p = {k[len(pre) + 5:]: v for k, v in P.items() if k.startswith(pre + "attn.")}
            a = stochastic_attention(x, attn_p, c.n_heads, mode, noise)
            a = mc_dropout(a, c.dropout_retention, mode, noise)
            x = layer_norm(x + a, P[pre + "ln1.gamma"], P[pre + "ln1.beta"])
            h = variational_linear(x, P[pre + "ffn1.mu"], P.get(pre + "ffn1.log_sigma"), P[pre + "ffn1.b"],
                                   mode, noise, c.local_reparam)
            h = ad.gelu(h)
            f = variational_linear(h, P[pre + "ffn2.mu"], P.get(pre + "ffn2.log_sigma"), P[pre + "ffn2.b"],
                                   mode, noise, c.local_reparam)
            f = mc_dropout(f, c.dropout_retention, mode, noise)
            x = layer_norm(x + f, P[pre + "ln2.gamma"], P[pre + "ln2.beta"])
        B = X.shape[0]
        flat = x.reshape(B, c.n_patches * c.d_model)
        out = flat @ P["head.W"] + P["head.b"]
        return out.reshape(B, c.horizon, c.K)

    def predict(self, X, mode: str = "deterministic", noise: Noise | None = None) -> np.ndarray:
        """Non-crossing (B, H, K) quantiles as a plain array."""
        return enforce_noncrossing(self.forward(X, mode, noise).data)


def enforce_noncrossing(Q) -> np.ndarray:
    return monotone_rows(Q)


def _probit(p):
    from scipy.special import ndtri

    return ndtri(p)


# ----------------------------------------------------------------------
# checkpoints


def _encode(arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype="<f8")  # tobytes() is row-major; keeps 0-d shapes
    return {"shape": list(arr.shape), "dtype": "<f8", "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=d["dtype"]).reshape(tuple(d["shape"])).astype(np.float64)


def save_checkpoint(path, model: BTModel, scaler=None, meta: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": model.cfg.to_dict(),
        "params": {k: _encode(v) for k, v in model.state_dict().items()},
        "scaler": None if scaler is None else scaler.to_dict(),
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path):
    """Return ``(model, scaler_dict_or_None, meta)``."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    cfg = ModelConfig.from_dict(doc["config"])
    params = {k: _decode(v) for k, v in doc["params"].items()}
    return BTModel(cfg, params), doc.get("scaler"), doc.get("meta", {})
