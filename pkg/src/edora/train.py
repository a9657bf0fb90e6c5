"""Loss, Adam, and the pretrain / fine-tune protocol."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Literal

import numpy as np

from . import numerics as nx
from .adapters import AdapterSpec
from .model import (
    ADAPTER_TARGETS,
    ConfigError,
    Model,
    adapter_param_closed_form,
    check_compatible,
    forward,
    inject_adapters,
    reset_fresh_layers,
)
from .numerics import DimensionError, GradTape, Tensor
from .signal import TrialSet

__all__ = [
    "AdamState",
    "FinetuneResult",
    "FreezePolicy",
    "OptimConfig",
    "adam_step",
    "cross_entropy",
    "finetune",
    "holdout_split",
    "pretrain",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 500
    batch_size: int = 72
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class FreezePolicy:
    """Which parameters train during fine-tuning.

    ``adapters_only`` trains adapter factors plus the dataset-specific layers
    named by ``fresh``; ``full_finetune`` trains everything. With
    ``fresh=None`` the head is always re-initialized and the spatial
    convolution only when the channel count changes.
    """

    mode: Literal["full_finetune", "adapters_only"] = "adapters_only"
    fresh: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.mode not in ("full_finetune", "adapters_only"):
            raise ConfigError(f"unknown freeze mode {self.mode!r}")

    def resolve(self, source_channels: int, target_channels: int) -> tuple[str, ...]:
        if self.fresh is not None:
            fresh = tuple(self.fresh)
        else:
            fresh = ("head.",)
        if source_channels != target_channels and "spatial." not in fresh:
            fresh = ("spatial.",) + fresh
        return fresh


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    b, K = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"{labels.shape[0] if labels.ndim else 0} labels for {b} logit rows")
    if b and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    onehot = np.zeros((b, K))
    onehot[np.arange(b), labels] = 1.0
    return (nx.log_softmax(logits, axis=-1) * Tensor(onehot)).sum() * (-1.0 / b)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              cfg: OptimConfig, t: int) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new arrays and the advanced state."""
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    b1, b2 = cfg.beta1, cfg.beta2
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p), np.zeros_like(p)
        elif m.shape != p.shape:
            raise DimensionError(f"optimizer state for {name} has shape {m.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        out[name] = p - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        state.m[name], state.v[name] = m, v
    state.t = t
    return out, state


def holdout_split(labels, fraction: float = 0.2, seed: int = 0,
                  policy: str = "stratified") -> tuple[np.ndarray, np.ndarray]:
    """(train, holdout) index arrays; each class contributes ``round(fraction * n_c)``.

    ``stratified`` draws the holdout at random within each class; ``ordered``
    takes each class's last trials, e.g. a later recording session.
    """
    if policy not in ("stratified", "ordered"):
        raise ConfigError(f"unknown split policy {policy!r}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, hold = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if policy == "stratified":
            idx = rng.permutation(idx)
        else:
            idx = idx[::-1]
        n_hold = int(round(fraction * len(idx)))
        hold.append(idx[:n_hold])
        train.append(idx[n_hold:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(hold))


def predict_logits(model: Model, data: np.ndarray, batch_size: int = 256) -> np.ndarray:
    if len(data) == 0:
        return np.zeros((0, model.config.classes))
    return np.concatenate([forward(model, data[i:i + batch_size]).data
                           for i in range(0, len(data), batch_size)])


def _accuracy(model: Model, data: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict_logits(model, data).argmax(axis=1) == labels))


def _fit(model: Model, train: TrialSet, holdout: TrialSet, cfg: OptimConfig,
         on_step: Callable[[dict[str, np.ndarray]], None] | None = None) -> list[dict]:
    """Minibatch Adam over ``model``'s trainable tensors; returns per-epoch history."""
    if len(train) < cfg.batch_size:
        raise ConfigError(
            f"{len(train)} training trials is fewer than batch_size {cfg.batch_size}")
    trainable = model.trainable()
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    history = []
    step = 0
    for ep in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        loss_sum = correct = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y = train.data[idx], train.labels[idx]
            with GradTape() as tape:
                logits = forward(model, x)
                loss = cross_entropy(logits, y)
            grads = tape.backward(loss)
            loss_sum += loss.item() * len(idx)
            correct += float(np.sum(logits.data.argmax(axis=1) == y))
            named = {n: grads.get(t, np.zeros_like(t.data)) for n, t in trainable}
            if on_step is not None:
                on_step({n: grads.get(t, np.zeros_like(t.data)) for n, t in model.named_parameters()})
            step += 1
            updated, state = adam_step({n: t.data for n, t in trainable}, named, state, cfg, step)
            for n, t in trainable:
                t.data = updated[n]
        history.append({
            "epoch": ep,
            "train_loss": loss_sum / len(train),
            "train_acc": correct / len(train),
            "holdout_acc": _accuracy(model, holdout.data, holdout.labels),
        })
        log.debug("epoch %d %s", ep, history[-1])
    return history


def pretrain(model: Model, source: TrialSet, cfg: OptimConfig, holdout_fraction: float = 0.2,
             seed: int = 0, split: str = "stratified") -> tuple[Model, list[dict]]:
    """Train every parameter on the source domain with a stratified holdout."""
    if len(source) == 0:
        raise ConfigError("source trial set is empty")
    _check_dims(model, source)
    model = model.clone()
    for _, t in model.named_parameters():
        t.requires_grad = True
    tr, ho = holdout_split(source.labels, holdout_fraction, seed, split)
    history = _fit(model, source.subset(tr), source.subset(ho), cfg)
    return model, history


@dataclass
class FinetuneResult:
    model: Model
    history: list[dict]
    report: dict


def prepare_finetune(pretrained: Model, target: TrialSet, spec: AdapterSpec | None,
                     policy: FreezePolicy, targets: Iterable[str] = ADAPTER_TARGETS,
                     seed: int = 0) -> Model:
    """Target-domain copy of ``pretrained`` with fresh layers, adapters and freeze applied."""
    if spec is not None:
        check_compatible(pretrained.config, spec)
    if policy.mode == "full_finetune" and spec is not None:
        raise ConfigError("full fine-tuning does not take an adapter spec")
    fresh = policy.resolve(pretrained.config.channels, target.channels)
    model = reset_fresh_layers(pretrained, target.channels, target.num_classes, seed=seed,
                               prefixes=fresh)
    _check_dims(model, target)
    if policy.mode == "full_finetune":
        model = model.clone()
        for _, t in model.named_parameters():
            t.requires_grad = True
        return model
    return inject_adapters(model, spec, targets if spec is not None else (), seed=seed,
                           keep_trainable=fresh)


def param_report(model: Model, spec: AdapterSpec | None = None,
                 targets: Iterable[str] = ADAPTER_TARGETS) -> dict:
    inv = model.inventory()
    report = dict(inv)
    report["trainable_fraction"] = inv["trainable"] / inv["total"]
    report["adapter_fraction"] = inv["adapter"] / inv["total"]
    if spec is not None:
        report["adapter_closed_form"] = adapter_param_closed_form(model.config, spec, targets)
    return report


def finetune(pretrained: Model, target: TrialSet, spec: AdapterSpec | None, policy: FreezePolicy,
             cfg: OptimConfig, holdout_fraction: float = 0.2,
             targets: Iterable[str] = ADAPTER_TARGETS, seed: int | None = None,
             holdout: TrialSet | None = None, split: str = "stratified") -> FinetuneResult:
    """Adapt a pretrained model to the target domain.

    ``spec=None`` with ``adapters_only`` is the frozen-encoder baseline: only
    the fresh layers train. If ``holdout`` is given it is used as the test
    split instead of a stratified holdout drawn from ``target``.
    """
    if len(target) == 0:
        raise ConfigError("target trial set is empty")
    seed = cfg.seed if seed is None else seed
    targets = tuple(targets)
    model = prepare_finetune(pretrained, target, spec, policy, targets, seed)
    if holdout is None:
        tr, ho = holdout_split(target.labels, holdout_fraction, seed, split)
        train_set, holdout = target.subset(tr), target.subset(ho)
    else:
        train_set = target
    history = _fit(model, train_set, holdout, cfg)
    return FinetuneResult(model, history, param_report(model, spec, targets))


def _check_dims(model: Model, ts: TrialSet) -> None:
    cfg = model.config
    if (ts.channels, ts.samples) != (cfg.channels, cfg.samples):
        raise DimensionError(
            f"trial set [{ts.channels} x {ts.samples}] does not match model "
            f"[{cfg.channels} x {cfg.samples}]")
    if ts.num_classes != cfg.classes:
        raise DimensionError(f"trial set has {ts.num_classes} classes, model {cfg.classes}")
