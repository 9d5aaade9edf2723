"""Closed-form similarity calibration of cache-side representations.

Given paired rows A (full computation) and B (cache side), the full variant
centres both, takes the SVD ``B_c^T A_c = U S V^T`` and sets

    R = U V^T,   s = <A_c, B_c R> / (||B_c R||_F^2 + eps)

so that ``T(h) = mu_A + s (h - mu_B) R`` and the operator applied to a
cache-side value is ``C(h) = h + alpha (T(h) - h)``. The ablation variants drop
the rotation (``SCALE_SHIFT``) or both rotation and scale (``SHIFT_ONLY``).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .denoiser import SiteId
from .linalg import as_matrix, frobenius_norm, inner_product, row_mean, svd

DEFAULT_EPSILON = 1e-8


class Variant(str, Enum):
    FULL = "full"
    SCALE_SHIFT = "scale_shift"
    SHIFT_ONLY = "shift_only"


class PoolingMode(str, Enum):
    CLASS_POOL = "class"
    TOKEN_POOL = "token"
    MIXED = "mixed"


def _same_bits(x, y) -> bool:
    x, y = np.asarray(x), np.asarray(y)
    return x.shape == y.shape and x.dtype == y.dtype and x.tobytes() == y.tobytes()


@dataclass(frozen=True, eq=False)
class CalibrationOperator:
    site: Optional[SiteId]
    mu_a: np.ndarray
    mu_b: np.ndarray
    rotation: np.ndarray
    scale: float
    alpha: float = 1.0
    variant: Variant = Variant.FULL

    @property
    def dim(self) -> int:
        return len(self.mu_a)

    def transform(self, h: np.ndarray) -> np.ndarray:
        """The full statistical map T(h), i.e. the operator at alpha = 1."""
        h = as_matrix(h)
        if h.shape[1] != self.dim:
            raise ValueError(f"operator has dimension {self.dim}, rows have {h.shape[1]}")
        return self.mu_a + self.scale * ((h - self.mu_b) @ self.rotation)

    def __call__(self, h: np.ndarray) -> np.ndarray:
        return apply(self, h)

    def with_alpha(self, alpha: float) -> "CalibrationOperator":
        return replace(self, alpha=float(alpha))

    def __eq__(self, other) -> bool:
        if not isinstance(other, CalibrationOperator):
            return NotImplemented
        return (self.site == other.site and self.variant == other.variant
                and _same_bits(self.scale, other.scale) and _same_bits(self.alpha, other.alpha)
                and _same_bits(self.mu_a, other.mu_a) and _same_bits(self.mu_b, other.mu_b)
                and _same_bits(self.rotation, other.rotation))

    __hash__ = None


def fit(a, b, alpha: float = 1.0, variant: Variant = Variant.FULL,
        epsilon: float = DEFAULT_EPSILON, site: Optional[SiteId] = None) -> CalibrationOperator:
    """Fit the operator mapping cache-side rows ``b`` onto full rows ``a``."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape != b.shape:
        raise ValueError(f"paired batches differ in shape: {a.shape} vs {b.shape}")
    if a.shape[0] < 1:
        raise ValueError("need at least one paired row")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite matrix")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    variant = Variant(variant)

    d = a.shape[1]
    mu_a = row_mean(a)
    mu_b = row_mean(b)
    a_c = a - mu_a
    b_c = b - mu_b
    rotation = np.eye(d)

    if variant is Variant.SHIFT_ONLY:
        scale = 1.0
    else:
        if variant is Variant.FULL:
            res = svd(b_c.T @ a_c)
            # A zero cross-covariance leaves R undetermined; keep the identity.
            if res.sigma[0] > 0.0:
                rotation = res.u @ res.v.T
        b_rot = b_c @ rotation
        scale = inner_product(a_c, b_rot) / (inner_product(b_rot, b_rot) + epsilon)
        scale = max(scale, 0.0)

    return CalibrationOperator(site, mu_a, mu_b, rotation, float(scale), float(alpha), variant)


def apply(op: CalibrationOperator, h) -> np.ndarray:
    """``h + alpha (T(h) - h)``; alpha = 0 returns ``h`` and alpha = 1 returns T(h) exactly."""
    h = as_matrix(h)
    if h.shape[1] != op.dim:
        raise ValueError(f"operator has dimension {op.dim}, rows have {h.shape[1]}")
    if op.alpha == 0.0:
        return h.copy()
    t = op.transform(h)
    if op.alpha == 1.0:
        return t
    return h + op.alpha * (t - h)


def residual(op: CalibrationOperator, a, b) -> float:
    """``||A - T(B)||_F``, the fit residual at full strength."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape != b.shape:
        raise ValueError(f"paired batches differ in shape: {a.shape} vs {b.shape}")
    return frobenius_norm(a - op.transform(b))


@dataclass(frozen=True, eq=False)
class PairedBatch:
    a: np.ndarray
    b: np.ndarray
    labels: tuple[tuple[int, int], ...]  # (condition, token or -1 for a class row)

    def __post_init__(self):
        if self.a.shape != self.b.shape:
            raise ValueError(f"paired batches differ in shape: {self.a.shape} vs {self.b.shape}")
        if len(self.labels) != len(self.a):
            raise ValueError("one provenance label per row is required")


def pool(values: Sequence[np.ndarray], conditions: Sequence[int],
         mode: PoolingMode) -> tuple[np.ndarray, tuple[tuple[int, int], ...]]:
    """Compress per-sample site values (tokens x d) into representative rows.

    Token pooling keeps one row per (condition, token position), averaged over
    the samples of that condition. Class pooling keeps one row per condition,
    averaged over samples and tokens. Mixed stacks the token rows on top of the
    class rows. Rows are ordered by ascending condition id.
    """
    mode = PoolingMode(mode)
    if len(values) != len(conditions):
        raise ValueError("one condition id per sample is required")
    if not values:
        raise ValueError("cannot pool an empty group")
    groups: dict[int, list[np.ndarray]] = {}
    for value, cond in zip(values, conditions):
        groups.setdefault(int(cond), []).append(as_matrix(value))

    token_rows, token_labels, class_rows, class_labels = [], [], [], []
    for cond in sorted(groups):
        members = groups[cond]
        total = np.zeros_like(members[0])
        for m in members:
            total = total + m
        token_mean = total / len(members)
        for tok, row in enumerate(token_mean):
            token_rows.append(row)
            token_labels.append((cond, tok))
        class_rows.append(row_mean(token_mean))
        class_labels.append((cond, -1))

    if mode is PoolingMode.TOKEN_POOL:
        return np.array(token_rows), tuple(token_labels)
    if mode is PoolingMode.CLASS_POOL:
        return np.array(class_rows), tuple(class_labels)
    return np.array(token_rows + class_rows), tuple(token_labels + class_labels)


def paired_batch(full_values: Sequence[np.ndarray], cache_values: Sequence[np.ndarray],
                 conditions: Sequence[int], mode: PoolingMode) -> PairedBatch:
    """Pair per-sample values first, then pool both sides identically."""
    if len(full_values) != len(cache_values):
        raise ValueError("full and cache-side value lists differ in length")
    a, labels = pool(full_values, conditions, mode)
    b, _ = pool(cache_values, conditions, mode)
    return PairedBatch(a, b, labels)
