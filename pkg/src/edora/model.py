"""Compact convolutional transformer for multichannel trials.

Layout: a batch of trials is ``[b, channels, samples]``. The feature stage
(temporal convolution, spatial convolution across channels, ELU, average
pooling, projection) produces tokens in ``[b, embed, tokens]``, i.e. one
column per token, which is the layout the adapters operate on. Encoder
blocks are pre-norm self-attention plus a GELU feed-forward, each with a
residual. The head flattens and applies two affine maps.

All parameters live in one ordered ``name -> Tensor`` mapping; adapters live
in a second mapping keyed by the name of the projection they wrap.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Iterable

import numpy as np

from . import numerics as nx
from .adapters import AdapterSpec, DecomposedWeight, adapter_forward, init_adapter, trainable_param_count
from .numerics import DimensionError, Tensor, matmul, transpose

__all__ = [
    "ADAPTER_TARGETS",
    "FRESH_PREFIXES",
    "ConfigError",
    "Model",
    "ModelConfig",
    "build",
    "forward",
    "inject_adapters",
    "reset_fresh_layers",
]

ADAPTER_TARGETS = ("query", "key", "value", "attn_out", "ffn_in", "ffn_out")
# dataset-specific stages, re-initialised on the target domain
FRESH_PREFIXES = ("spatial.", "head.")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    channels: int
    samples: int
    classes: int
    temporal_kernel: int = 25
    embed_dim: int = 40
    encoder_layers: int = 3
    heads: int = 4
    ffn_dim: int | None = None
    pool_kernel: int = 30
    pool_stride: int = 15
    head_hidden: int = 256

    def __post_init__(self):
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.embed_dim)
        bad = [f.name for f in fields(self) if getattr(self, f.name) < 1]
        if bad:
            raise ConfigError(f"model config fields must be positive: {', '.join(bad)}")
        if self.embed_dim % self.heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.temporal_kernel > self.samples:
            raise ConfigError(
                f"temporal_kernel {self.temporal_kernel} exceeds samples {self.samples}")
        if self.pool_kernel > self.conv_length:
            raise ConfigError(
                f"pool_kernel {self.pool_kernel} exceeds convolved length {self.conv_length}")

    @property
    def conv_length(self) -> int:
        return self.samples - self.temporal_kernel + 1

    @property
    def tokens(self) -> int:
        return (self.conv_length - self.pool_kernel) // self.pool_stride + 1

    def to_dict(self) -> dict:
        return asdict(self)


def _pool_matrix(cfg: ModelConfig) -> np.ndarray:
    P = np.zeros((cfg.tokens, cfg.conv_length))
    for o in range(cfg.tokens):
        s = o * cfg.pool_stride
        P[o, s:s + cfg.pool_kernel] = 1.0 / cfg.pool_kernel
    return P


def _shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init) for every parameter, in inventory order."""
    k, f = cfg.embed_dim, cfg.ffn_dim
    spec = [
        ("temporal.weight", (cfg.temporal_kernel, k), "uniform"),
        ("temporal.bias", (k,), "zeros"),
        ("spatial.weight", (cfg.channels * k, k), "uniform"),
        ("spatial.bias", (k,), "zeros"),
        ("project.weight", (k, k), "uniform"),
        ("project.bias", (k,), "zeros"),
    ]
    for i in range(cfg.encoder_layers):
        p = f"encoder.{i}."
        spec += [(p + "norm1.gain", (k, 1), "ones"), (p + "norm1.bias", (k, 1), "zeros")]
        for proj in ("query", "key", "value", "attn_out"):
            spec += [(p + proj + ".weight", (k, k), "uniform"), (p + proj + ".bias", (k, 1), "zeros")]
        spec += [(p + "norm2.gain", (k, 1), "ones"), (p + "norm2.bias", (k, 1), "zeros")]
        spec += [(p + "ffn_in.weight", (k, f), "uniform"), (p + "ffn_in.bias", (f, 1), "zeros"),
                 (p + "ffn_out.weight", (f, k), "uniform"), (p + "ffn_out.bias", (k, 1), "zeros")]
    spec += [
        ("head.hidden.weight", (k * cfg.tokens, cfg.head_hidden), "uniform"),
        ("head.hidden.bias", (cfg.head_hidden,), "zeros"),
        ("head.out.weight", (cfg.head_hidden, cfg.classes), "uniform"),
        ("head.out.bias", (cfg.classes,), "zeros"),
    ]
    return spec


def _init(shape, how: str, rng: np.random.Generator) -> np.ndarray:
    if how == "zeros":
        return np.zeros(shape)
    if how == "ones":
        return np.ones(shape)
    bound = 1.0 / np.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor],
                 adapters: dict[str, DecomposedWeight] | None = None):
        self.config = config
        self.params = params
        self.adapters = adapters or {}
        self._pool = _pool_matrix(config)

    def __call__(self, batch) -> Tensor:
        return forward(self, batch)

    def clone(self) -> "Model":
        params = {n: Tensor(t.data, requires_grad=t.requires_grad) for n, t in self.params.items()}
        adapters = {n: a.clone() for n, a in self.adapters.items()}
        # adapter bases alias the (frozen) projection weights
        for name, a in adapters.items():
            a.base = params[name + ".weight"]
        return Model(self.config, params, adapters)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = list(self.params.items())
        for name, a in self.adapters.items():
            out += [(f"{name}/{pname}", t) for pname, t in a.named_parameters()]
        return out

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_parameters() if t.requires_grad]

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def inventory(self) -> dict[str, int]:
        """Parameter counts by role."""
        total = trainable = adapter = fresh = 0
        for name, t in self.named_parameters():
            total += t.size
            if t.requires_grad:
                trainable += t.size
                if "/" in name:
                    adapter += t.size
                elif name.startswith(FRESH_PREFIXES):
                    fresh += t.size
        return {"total": total, "trainable": trainable, "frozen": total - trainable,
                "adapter": adapter, "fresh": fresh}


def build(config: ModelConfig, seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    params = {name: Tensor(_init(shape, how, rng), requires_grad=True, name=name)
              for name, shape, how in _shapes(config)}
    return Model(config, params)


def _linear(model: Model, name: str, x: Tensor) -> Tensor:
    """Token-wise affine map ``W^T x + b`` on ``[b, d, t]``, adapted when wrapped."""
    bias = model.params[name + ".bias"]
    adapter = model.adapters.get(name)
    if adapter is not None:
        return adapter_forward(adapter, x) + bias
    return matmul(transpose(model.params[name + ".weight"]), x) + bias


def _features(model: Model, x: Tensor) -> Tensor:
    cfg, p = model.config, model.params
    b = x.shape[0]
    h = matmul(nx.sliding_windows(x, cfg.temporal_kernel), p["temporal.weight"]) + p["temporal.bias"]
    # [b, C, T', k] -> [b, T', C*k]
    h = nx.reshape(transpose(h, (0, 2, 1, 3)), (b, cfg.conv_length, cfg.channels * cfg.embed_dim))
    h = nx.elu(matmul(h, p["spatial.weight"]) + p["spatial.bias"])
    h = matmul(Tensor(model._pool), h)
    h = matmul(h, p["project.weight"]) + p["project.bias"]
    return transpose(h)  # [b, k, tokens]


def _attention(model: Model, prefix: str, x: Tensor) -> Tensor:
    cfg = model.config
    b, k, t = x.shape
    heads, dh = cfg.heads, k // cfg.heads
    q = nx.reshape(_linear(model, prefix + "query", x), (b, heads, dh, t))
    kk = nx.reshape(_linear(model, prefix + "key", x), (b, heads, dh, t))
    v = nx.reshape(_linear(model, prefix + "value", x), (b, heads, dh, t))
    scores = matmul(transpose(q), kk) * (1.0 / np.sqrt(dh))  # [b, h, query, key]
    attn = nx.softmax(scores, axis=-1)
    out = nx.reshape(matmul(v, transpose(attn)), (b, k, t))
    return _linear(model, prefix + "attn_out", out)


def _encoder_block(model: Model, i: int, x: Tensor) -> Tensor:
    p, pre = model.params, f"encoder.{i}."
    h = nx.layer_norm(x, p[pre + "norm1.gain"], p[pre + "norm1.bias"], axis=-2)
    x = x + _attention(model, pre, h)
    h = nx.layer_norm(x, p[pre + "norm2.gain"], p[pre + "norm2.bias"], axis=-2)
    h = _linear(model, pre + "ffn_out", nx.gelu(_linear(model, pre + "ffn_in", h)))
    return x + h


def encode(model: Model, batch) -> Tensor:
    """Token features after the encoder, ``[b, embed, tokens]``."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    cfg = model.config
    if x.ndim == 2:
        x = nx.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[1:] != (cfg.channels, cfg.samples):
        raise DimensionError(
            f"model expects [b, {cfg.channels}, {cfg.samples}], got {x.shape}")
    h = _features(model, x)
    for i in range(cfg.encoder_layers):
        h = _encoder_block(model, i, h)
    return h


def forward(model: Model, batch) -> Tensor:
    """Class logits ``[b, classes]``."""
    h = encode(model, batch)
    p = model.params
    flat = nx.reshape(h, (h.shape[0], -1))
    hidden = nx.elu(matmul(flat, p["head.hidden.weight"]) + p["head.hidden.bias"])
    return matmul(hidden, p["head.out.weight"]) + p["head.out.bias"]


def inject_adapters(model: Model, spec: AdapterSpec | None, targets: Iterable[str] = ADAPTER_TARGETS,
                    seed: int = 0, keep_trainable: tuple[str, ...] = FRESH_PREFIXES) -> Model:
    """Copy of ``model`` with every targeted projection wrapped as an adapter.

    All other parameters are frozen except those whose names start with one of
    ``keep_trainable``. ``spec=None`` or an empty target set injects nothing
    and only applies the freeze.
    """
    targets = tuple(targets)
    unknown = sorted(set(targets) - set(ADAPTER_TARGETS))
    if unknown:
        raise ConfigError(f"unknown adapter targets {unknown}; choose from {ADAPTER_TARGETS}")
    if spec is not None:
        check_compatible(model.config, spec)
    out = model.clone()
    for name, t in out.params.items():
        t.requires_grad = name.startswith(keep_trainable) if keep_trainable else False
    if spec is None:
        return out
    rng = np.random.default_rng(seed)
    for i in range(model.config.encoder_layers):
        for target in ADAPTER_TARGETS:
            if target not in targets:
                continue
            name = f"encoder.{i}.{target}"
            wrapped = init_adapter(out.params[name + ".weight"], spec, seed=int(rng.integers(2**31)))
            wrapped.base = out.params[name + ".weight"]
            out.adapters[name] = wrapped
    return out


def check_compatible(cfg: ModelConfig, spec: AdapterSpec) -> None:
    if cfg.tokens % spec.segments:
        raise ConfigError(
            f"{cfg.tokens} tokens cannot be split into {spec.segments} segments")


def adapter_param_closed_form(cfg: ModelConfig, spec: AdapterSpec,
                              targets: Iterable[str] = ADAPTER_TARGETS) -> int:
    k, f = cfg.embed_dim, cfg.ffn_dim
    dims = {"query": (k, k), "key": (k, k), "value": (k, k), "attn_out": (k, k),
            "ffn_in": (k, f), "ffn_out": (f, k)}
    return cfg.encoder_layers * sum(trainable_param_count(spec, *dims[t]) for t in set(targets))


def reset_fresh_layers(model: Model, channels: int, classes: int, seed: int = 0,
                       prefixes: tuple[str, ...] = FRESH_PREFIXES) -> Model:
    """Copy of ``model`` for a new dataset: fresh spatial convolution and head.

    The channel and class counts may differ from the source model; all other
    parameters carry over unchanged.
    """
    cfg = ModelConfig(**{**model.config.to_dict(), "channels": channels, "classes": classes})
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, how in _shapes(cfg):
        if name.startswith(prefixes):
            params[name] = Tensor(_init(shape, how, rng), requires_grad=True, name=name)
        else:
            old = model.params[name]
            params[name] = Tensor(old.data, requires_grad=old.requires_grad, name=name)
    adapters = {}
    for name, a in model.adapters.items():
        a = a.clone()
        a.base = params[name + ".weight"]
        adapters[name] = a
    return Model(cfg, params, adapters)
