"""LoRA, DoRA and EDoRA adapters over a frozen base matrix.

Orientation used throughout: the base matrix ``W0`` is stored input-major,
``d x k``, so that one magnitude entry belongs to each of the ``k`` output
units and ``column_norm(W0)`` has shape ``1 x k``. Inputs follow the feature
by token layout ``x: [..., d, t]`` and every adapter maps them to
``[..., k, t]``. The low-rank factors use ``A: (r/n) x d`` and
``B: k x (r/n)``, so ``B @ A`` is the ``k x d`` update and its transpose is
added to ``W0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from .numerics import (
    NORM_EPS,
    DimensionError,
    IndivisibleSplitError,
    Tensor,
    clamp_min,
    column_norm,
    concat_cols,
    matmul,
    split_cols,
    transpose,
)

__all__ = [
    "ADAPTER_KINDS",
    "AdapterSpec",
    "AdapterSpecError",
    "UnsupportedMergeError",
    "DecomposedWeight",
    "adapter_forward",
    "decompose",
    "dora_forward",
    "edora_forward",
    "frozen_forward",
    "init_adapter",
    "lora_forward",
    "merge",
    "trainable_param_count",
]

ADAPTER_KINDS = ("lora", "dora", "edora")
NORM_MODES = ("weight", "feature")


class AdapterSpecError(ValueError):
    pass


class UnsupportedMergeError(ValueError):
    pass


@dataclass(frozen=True)
class AdapterSpec:
    """Configuration of one adapter.

    ``init_scale`` bounds the uniform initialisation of ``A``; ``None`` means
    ``1/sqrt(d)``.
    """

    kind: Literal["lora", "dora", "edora"] = "edora"
    rank: int = 4
    segments: int = 1
    norm_mode: Literal["weight", "feature"] = "weight"
    init_scale: float | None = None

    def __post_init__(self):
        if self.kind not in ADAPTER_KINDS:
            raise AdapterSpecError(f"unknown adapter kind {self.kind!r}; expected one of {ADAPTER_KINDS}")
        if self.norm_mode not in NORM_MODES:
            raise AdapterSpecError(f"unknown norm_mode {self.norm_mode!r}")
        if int(self.rank) != self.rank or self.rank < 1:
            raise AdapterSpecError(f"rank must be a positive integer, got {self.rank}")
        if int(self.segments) != self.segments or self.segments < 1:
            raise AdapterSpecError(f"segments must be a positive integer, got {self.segments}")
        if self.kind != "edora" and self.segments != 1:
            raise AdapterSpecError(f"{self.kind} takes segments=1, got {self.segments}")
        if self.rank % self.segments:
            raise AdapterSpecError(
                f"rank {self.rank} is not divisible by segments {self.segments}")
        if self.init_scale is not None and self.init_scale < 0:
            raise AdapterSpecError("init_scale must be non-negative")

    @property
    def sub_rank(self) -> int:
        return self.rank // self.segments


@dataclass
class DecomposedWeight:
    """Frozen base matrix plus trainable magnitudes and low-rank factors.

    LoRA carries no magnitudes; DoRA carries one; EDoRA carries one per
    segment, each paired with its own ``(A_i, B_i)``.
    """

    base: Tensor
    spec: AdapterSpec
    A: list[Tensor]
    B: list[Tensor]
    magnitudes: list[Tensor] = field(default_factory=list)

    @property
    def in_features(self) -> int:
        return self.base.shape[0]

    @property
    def out_features(self) -> int:
        return self.base.shape[1]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Trainable tensors in checkpoint order (``m0, A0, B0, m1, ...``)."""
        out = []
        for i in range(len(self.A)):
            if self.magnitudes:
                out.append((f"m{i}", self.magnitudes[i]))
            out.append((f"A{i}", self.A[i]))
            out.append((f"B{i}", self.B[i]))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_trainable(self) -> int:
        return sum(t.size for t in self.parameters())

    def clone(self) -> "DecomposedWeight":
        def copy(t: Tensor) -> Tensor:
            return Tensor(t.data, requires_grad=t.requires_grad)

        return replace(
            self,
            base=copy(self.base),
            A=[copy(t) for t in self.A],
            B=[copy(t) for t in self.B],
            magnitudes=[copy(t) for t in self.magnitudes],
        )


def decompose(W) -> tuple[Tensor, Tensor]:
    """Split ``W`` into its column magnitudes and the unnormalised direction ``V = W``."""
    W = W if isinstance(W, Tensor) else Tensor(W)
    return column_norm(W), W


def _normalize_columns(v: Tensor) -> Tensor:
    return v / clamp_min(column_norm(v), NORM_EPS)


def _check_input(w: DecomposedWeight, x: Tensor) -> None:
    if x.ndim < 2 or x.shape[-2] != w.in_features:
        raise DimensionError(
            f"adapter expects input [..., {w.in_features}, t], got {x.shape}")


def frozen_forward(w: DecomposedWeight, x: Tensor) -> Tensor:
    """The un-adapted product ``W0^T x``."""
    _check_input(w, x)
    return matmul(transpose(w.base), x)


def _low_rank(A: Tensor, B: Tensor, x: Tensor) -> Tensor:
    return matmul(B, matmul(A, x))


def _dora_weight(base: Tensor, m: Tensor, A: Tensor, B: Tensor) -> Tensor:
    # direction W0 + (B A)^T, per-output-column normalised, then scaled by m
    direction = base + transpose(matmul(B, A))
    return m * _normalize_columns(direction)


def lora_forward(w: DecomposedWeight, x: Tensor) -> Tensor:
    """``W0^T x + B (A x)``."""
    _check_input(w, x)
    return matmul(transpose(w.base), x) + _low_rank(w.A[0], w.B[0], x)


def dora_forward(w: DecomposedWeight, x: Tensor) -> Tensor:
    """``W'^T x`` with ``W' = m (W0 + (BA)^T) / ||W0 + (BA)^T||_c``."""
    _check_input(w, x)
    merged = _dora_weight(w.base, w.magnitudes[0], w.A[0], w.B[0])
    return matmul(transpose(merged), x)


def edora_forward(w: DecomposedWeight, x: Tensor, spec: AdapterSpec | None = None) -> Tensor:
    """Ensemble of DoRA sub-adapters over ``n`` contiguous token segments.

    In ``weight`` mode segment ``i`` goes through the DoRA map built from
    ``(m_i, A_i, B_i)``. In ``feature`` mode the transformed features
    ``W0^T x_i + B_i A_i x_i`` are normalised token by token and each output
    row is scaled by ``m_i``.
    """
    spec = spec or w.spec
    _check_input(w, x)
    n = spec.segments
    if spec.rank % n:
        raise IndivisibleSplitError(spec.rank, n, what="rank units")
    t = x.shape[-1]
    if t % n:
        raise IndivisibleSplitError(t, n, what="tokens")

    outputs = []
    for i, xi in enumerate(split_cols(x, n)):
        m, A, B = w.magnitudes[i], w.A[i], w.B[i]
        if spec.norm_mode == "weight":
            outputs.append(matmul(transpose(_dora_weight(w.base, m, A, B)), xi))
        else:
            z = matmul(transpose(w.base), xi) + _low_rank(A, B, xi)
            outputs.append(transpose(m) * _normalize_columns(z))
    return concat_cols(outputs)


def adapter_forward(w: DecomposedWeight, x: Tensor) -> Tensor:
    if w.spec.kind == "lora":
        return lora_forward(w, x)
    if w.spec.kind == "dora":
        return dora_forward(w, x)
    return edora_forward(w, x)


def merge(w: DecomposedWeight) -> np.ndarray | list[np.ndarray]:
    """Dense ``d x k`` matrix ``M`` with ``M^T x`` equal to the adapter forward.

    Weight-mode EDoRA yields one matrix per segment.
    """
    kind = w.spec.kind
    if kind == "lora":
        return (w.base + transpose(matmul(w.B[0], w.A[0]))).numpy()
    if kind == "dora":
        return _dora_weight(w.base, w.magnitudes[0], w.A[0], w.B[0]).numpy()
    if w.spec.norm_mode == "feature":
        raise UnsupportedMergeError(
            "feature-normalised EDoRA depends on the input and has no dense equivalent")
    return [_dora_weight(w.base, m, A, B).numpy() for m, A, B in zip(w.magnitudes, w.A, w.B)]


def trainable_param_count(spec: AdapterSpec, d: int, k: int) -> int:
    """Closed-form trainable-parameter count of one adapted ``d x k`` matrix."""
    low_rank = spec.rank * (d + k)
    if spec.kind == "lora":
        return low_rank
    if spec.kind == "dora":
        return low_rank + k
    return low_rank + spec.segments * k


def init_adapter(W0, spec: AdapterSpec, seed: int = 0) -> DecomposedWeight:
    """Adapter whose forward reproduces the frozen forward exactly.

    ``B_i = 0``, ``A_i ~ U(-s, s)`` from ``default_rng(seed)``, and
    ``m_i = ||W0||_c``.
    """
    base = W0 if isinstance(W0, Tensor) else Tensor(W0)
    base = Tensor(base.data, requires_grad=False)
    if base.ndim != 2:
        raise DimensionError(f"adapter base must be a matrix, got {base.shape}")
    d, k = base.shape
    rng = np.random.default_rng(seed)
    scale = spec.init_scale if spec.init_scale is not None else 1.0 / np.sqrt(d)
    r = spec.sub_rank
    dtype = base.data.dtype
    A = [Tensor(rng.uniform(-scale, scale, size=(r, d)).astype(dtype), requires_grad=True)
         for _ in range(spec.segments)]
    B = [Tensor(np.zeros((k, r), dtype=dtype), requires_grad=True) for _ in range(spec.segments)]
    mags = []
    if spec.kind != "lora":
        norm = column_norm(base).data
        mags = [Tensor(norm, requires_grad=True) for _ in range(spec.segments)]
    return DecomposedWeight(base=base, spec=spec, A=A, B=B, magnitudes=mags)
