"""Applying low-rank updates to frozen weights.

Two equivalent routes compute ``h = (W + A B) x``:

* the training path ``W x + A (B x)`` never forms the d x d product and lets
  gradients reach ``A`` and ``B``;
* the inference path materializes ``W' = W + A B`` once and then costs a
  single dense product per token, independent of the rank.

Activations are row-major token matrices ``x`` of shape ``(..., n, d)``, so
``W x`` is realized as ``x @ W.T``.  Weights are stored (out, in).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable

import numpy as np

from .errors import DimensionError
from .numerics import Tensor, no_tape, ops


@dataclass
class LowRankUpdate:
    """Factors of ``A @ B``: ``A`` is (..., d_out, r), ``B`` is (..., r, d_in)."""

    A: Tensor
    B: Tensor

    def __post_init__(self):
        if self.A.shape[-1] != self.B.shape[-2]:
            raise DimensionError(f"rank mismatch: A {self.A.shape} vs B {self.B.shape}")

    @property
    def rank(self) -> int:
        return self.A.shape[-1]

    def product(self) -> np.ndarray:
        return self.A.data @ self.B.data


@dataclass
class GenerationCounters:
    merges: int = 0
    denoiser_calls: int = 0
    inference_path_applications: int = 0
    backward_calls: int = 0
    composer_calls: int = 0


@dataclass
class MergedWeights:
    """Per-target dense ``W + A B``, with the tag of the update set behind it."""

    weights: dict[Hashable, Tensor]
    tag: str = ""
    merge_count: int = 1
    applications: int = field(default=0)

    def __getitem__(self, key):
        return self.weights[key]

    def __contains__(self, key) -> bool:
        return key in self.weights


def _check(W: Tensor, update: LowRankUpdate) -> None:
    d_out, d_in = W.shape[-2:]
    if update.A.shape[-2] != d_out or update.B.shape[-1] != d_in:
        raise DimensionError(
            f"update factors A {update.A.shape}, B {update.B.shape} do not fit weight {W.shape}"
        )


def apply_training_path(x: Tensor, W: Tensor, update: LowRankUpdate | None) -> Tensor:
    """``x W^T + (x B^T) A^T``, right-to-left, without forming ``A B``."""
    if x.shape[-1] != W.shape[-1]:
        raise DimensionError(f"input width {x.shape} does not match weight {W.shape}")
    h = ops.matmul_t(x, W)
    if update is None:
        return h
    _check(W, update)
    low = ops.matmul_t(x, update.B)
    return ops.add(h, ops.matmul_t(low, update.A))


def training_path_macs(d: int, r: int) -> int:
    """Multiply-accumulates per token for a square weight on the training path."""
    return d * d + 2 * d * r


def merge(W, update, tag: str = "", counters: GenerationCounters | None = None) -> MergedWeights:
    """Materialize ``W + A B`` for one weight or a dict of weights.

    ``W`` and ``update`` are either a single ``Tensor``/``LowRankUpdate`` pair
    (stored under key ``None``) or parallel dicts keyed by target.  Targets
    with no update keep the original tensor object.  The inputs are never
    modified.
    """
    if isinstance(W, Tensor):
        W, update = {None: W}, {None: update}
    merged: dict[Hashable, Tensor] = {}
    with no_tape():
        for key, upd in update.items():
            w = W[key]
            if upd is None:
                merged[key] = w
                continue
            _check(w, upd)
            merged[key] = Tensor._wrap(w.data + upd.A.data @ upd.B.data)
    if counters is not None:
        counters.merges += 1
    return MergedWeights(merged, tag=tag)


def apply_inference_path(x: Tensor, merged: MergedWeights, key: Hashable = None) -> Tensor:
    """Single dense product with the pre-merged weight."""
    Wp = merged[key]
    if x.shape[-1] != Wp.shape[-1]:
        raise DimensionError(f"input width {x.shape} does not match merged weight {Wp.shape}")
    merged.applications += 1
    return ops.matmul_t(x, Wp)


def path_equivalence_check(W: Tensor, update: LowRankUpdate, n: int, rng) -> float:
    """Max over ``n`` random probes of the infinity-norm gap between paths."""
    if n < 1:
        raise ValueError("need at least one probe")
    d_in = W.shape[-1]
    x = Tensor(rng.normal((n, 1, d_in), dtype=W.dtype), dtype=W.dtype)
    with no_tape():
        h_train = apply_training_path(x, W, update)
        h_inf = apply_inference_path(x, merge(W, update))
    return float(np.max(np.abs(h_train.data - h_inf.data)))
