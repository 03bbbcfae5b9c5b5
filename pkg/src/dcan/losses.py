"""Alignment and classification objectives.

The alignment distance is the biased V-statistic estimate of the squared
mean-embedding distance between two samples,

    mmd(A, B) = (1/n_a^2) sum k(a, a') - (2/(n_a n_b)) sum k(a, b)
              + (1/n_b^2) sum k(b, b'),

with a sum-of-gaussians kernel k(x, y) = sum_m exp(-||x - y||^2 / (2 s_m)),
where each bandwidth s_m = multiplier_m * median of the pairwise squared
distances over the pooled batch.  The median is treated as a constant with
respect to gradients.

The combined training objective is

    total = L_s + alpha * sum_l (L_M^l + L_reg^l) + beta * L_e

where L_s is source cross-entropy, L_M^l aligns corrected target features to
uncorrected source features at layer l, L_reg^l compares each source class
against a corrected random subset of the source batch, and L_e is the entropy
of target predictions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

BANDWIDTH_FLOOR = 1e-6
SIMPLEX_TOL = 1e-5


@dataclass(frozen=True)
class KernelConfig:
    family: str = "gaussian"
    bandwidth_mode: str = "median_heuristic_multi"
    multipliers: tuple = (0.25, 0.5, 1.0, 2.0, 4.0)

    def __post_init__(self):
        if self.family != "gaussian":
            raise ValueError(f"unsupported kernel family {self.family!r}")
        if self.bandwidth_mode != "median_heuristic_multi":
            raise ValueError(f"unsupported bandwidth mode {self.bandwidth_mode!r}")
        if not self.multipliers or any(m <= 0 for m in self.multipliers):
            raise ValueError("kernel multipliers must be non-empty and positive")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.5
    beta: float = 0.1
    p_subset: float = 0.8
    num_correction_layers: int = 2

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0 < self.p_subset <= 1:
            raise ValueError("p_subset must lie in (0, 1]")
        if self.num_correction_layers < 1:
            raise ValueError("num_correction_layers must be positive")


@dataclass(frozen=True)
class SubsetSample:
    """Realized random subset of a source batch."""
    indices: np.ndarray
    realized_size: int


@dataclass(frozen=True)
class AblationFlags:
    """Which objective terms stay active; all on unless a variant disables some."""
    lm_enabled: tuple = (True, True)
    lreg_enabled: tuple = (True, True)
    entropy_enabled: bool = True

    @classmethod
    def all_on(cls, num_layers):
        return cls(lm_enabled=(True,) * num_layers,
                   lreg_enabled=(True,) * num_layers,
                   entropy_enabled=True)


def _coerce(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _zero_like_scalar(ref):
    return Tensor(np.zeros((), dtype=ref.dtype))


def _pooled_median_sq_dist(a_data, b_data):
    """Median pairwise squared distance over the pooled rows, off-diagonal pairs."""
    pooled = np.concatenate([a_data, b_data], axis=0)
    sq = np.einsum("ij,ij->i", pooled, pooled)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (pooled @ pooled.T)
    iu = np.triu_indices(pooled.shape[0], k=1)
    med = float(np.median(np.maximum(d2[iu], 0.0)))
    return max(med, BANDWIDTH_FLOOR)


def _pairwise_sq_dists(a, b):
    n, m = a.shape[0], b.shape[0]
    aa = T.tsum(T.mul(a, a), axis=1, keepdims=True)                 # (n, 1)
    bb = T.reshape(T.tsum(T.mul(b, b), axis=1, keepdims=True), (1, m))
    cross = T.scale(T.matmul(a, T.transpose(b)), 2.0)
    return T.clamp_min(T.sub(T.add(aa, bb), cross), 0.0)


def _kernel_mean(a, b, sigmas):
    d2 = _pairwise_sq_dists(a, b)
    total = None
    for s in sigmas:
        term = T.exp(T.scale(d2, -1.0 / (2.0 * s)))
        total = term if total is None else T.add(total, term)
    return T.mean(total)


def mmd(a, b, kernel=KernelConfig(), base_bandwidth=None, bandwidth_floor=None):
    """Biased squared-MMD between two row-sample tensors, differentiable.

    base_bandwidth overrides the median heuristic with a fixed base value;
    the singleton closed form and finite-difference checks rely on that.
    bandwidth_floor raises the lower bound on the median (spaces with an
    absolute scale, like the probability simplex, use a floor matched to
    that scale so bunched samples do not sharpen the kernels without bound).
    """
    a = _coerce(a)
    b = _coerce(b, like=a)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"mmd expects rank-2 samples, got {a.shape} and {b.shape}")
    if a.shape[0] < 1 or b.shape[0] < 1:
        raise ValueError("mmd requires at least one row per sample")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"mmd feature widths differ: {a.shape} vs {b.shape}")
    if base_bandwidth is None:
        base = _pooled_median_sq_dist(a.data, b.data)
        if bandwidth_floor is not None:
            base = max(base, float(bandwidth_floor))
    else:
        base = float(base_bandwidth)
    sigmas = [m * base for m in kernel.multipliers]
    k_aa = _kernel_mean(a, a, sigmas)
    k_ab = _kernel_mean(a, b, sigmas)
    k_bb = _kernel_mean(b, b, sigmas)
    return T.add(T.sub(k_aa, T.scale(k_ab, 2.0)), k_bb)


def correction_alignment_loss(h_source, h_target_corrected, kernel=KernelConfig(),
                              base_bandwidth=None, bandwidth_floor=None):
    """Alignment between uncorrected source features and corrected target features."""
    return mmd(h_source, h_target_corrected, kernel, base_bandwidth=base_bandwidth,
               bandwidth_floor=bandwidth_floor)


def sample_subset(labels, p_subset, num_classes, rng):
    """Draw the source-batch subset: each item kept with probability p/num_classes."""
    labels = np.asarray(labels)
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    if not 0 <= p_subset <= 1:
        raise ValueError("p_subset must lie in [0, 1]")
    keep = rng.random(labels.shape[0]) < (p_subset / num_classes)
    indices = np.flatnonzero(keep)
    return SubsetSample(indices=indices, realized_size=int(indices.size))


def source_regularization_loss(h_source, h_source_corrected, labels, subset,
                               num_classes, kernel=KernelConfig(),
                               base_bandwidth=None, bandwidth_floor=None):
    """Per-class MMD between the uncorrected and corrected features of the
    random subset's members of that class.

    Comparing the same rows on both sides keeps the term an identity pressure
    on the correction block: it is exactly zero while the correction is zero,
    and grows only as the corrected subset drifts away from the class it came
    from.  Classes absent from the subset contribute nothing; an empty subset
    makes the whole loss zero.
    """
    h_source = _coerce(h_source)
    h_source_corrected = _coerce(h_source_corrected, like=h_source)
    labels = np.asarray(labels)
    n = h_source.shape[0]
    if labels.shape[0] != n:
        raise ValueError("labels length must match the source batch")
    idx = np.asarray(subset.indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError("subset indices out of range for the source batch")
    if idx.size == 0:
        return _zero_like_scalar(h_source)
    if base_bandwidth is None:
        # one bandwidth for all class terms, from the whole batch: per-class
        # medians over a handful of rows degenerate to ||correction||^2 and
        # make the gradient blow up as the correction approaches zero
        base_bandwidth = _pooled_median_sq_dist(h_source.data,
                                                h_source_corrected.data)
        if bandwidth_floor is not None:
            base_bandwidth = max(base_bandwidth, float(bandwidth_floor))
    total = None
    for k in range(num_classes):
        rows = idx[labels[idx] == k]
        if rows.size == 0:
            continue
        term = mmd(T.gather_rows(h_source, rows),
                   T.gather_rows(h_source_corrected, rows), kernel,
                   base_bandwidth=base_bandwidth)
        total = term if total is None else T.add(total, term)
    if total is None:
        return _zero_like_scalar(h_source)
    return total


def _check_simplex(probs, what):
    rows = probs.data.sum(axis=1)
    worst = float(np.max(np.abs(rows - 1.0))) if rows.size else 0.0
    if worst > SIMPLEX_TOL:
        raise ValueError(f"{what}: rows deviate from the simplex by {worst:.2e}")


def cross_entropy(probs, labels):
    """Mean negative log-probability of the true class."""
    probs = _coerce(probs)
    labels = np.asarray(labels)
    if probs.data.ndim != 2:
        raise ValueError(f"cross_entropy expects rank-2 probabilities, got {probs.shape}")
    n, k = probs.shape
    if labels.shape[0] != n:
        raise ValueError("labels length must match the batch")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range for {k} classes")
    _check_simplex(probs, "cross_entropy")
    onehot = np.zeros((n, k), dtype=probs.dtype)
    onehot[np.arange(n), labels] = 1.0
    picked = T.tsum(T.mul(probs, Tensor(onehot)), axis=1)
    return T.scale(T.tsum(T.log(picked)), -1.0 / n)


def target_entropy(probs):
    """Mean Shannon entropy of prediction rows, in [0, ln K]."""
    probs = _coerce(probs)
    if probs.data.ndim != 2:
        raise ValueError(f"target_entropy expects rank-2 probabilities, got {probs.shape}")
    _check_simplex(probs, "target_entropy")
    n = probs.shape[0]
    return T.scale(T.tsum(T.mul(probs, T.log(probs))), -1.0 / n)


def total_objective(l_source, per_layer, l_entropy, weights, flags=None):
    """Combine the component losses with the configured trade-off weights."""
    if len(per_layer) != weights.num_correction_layers:
        raise ValueError(
            f"expected {weights.num_correction_layers} per-layer loss pairs, "
            f"got {len(per_layer)}")
    l_source = _coerce(l_source)
    if flags is None:
        flags = AblationFlags.all_on(weights.num_correction_layers)
    align = None
    for l, (lm, lreg) in enumerate(per_layer):
        lm = _coerce(lm, like=l_source)
        lreg = _coerce(lreg, like=l_source)
        if not flags.lm_enabled[l]:
            lm = _zero_like_scalar(l_source)
        if not flags.lreg_enabled[l]:
            lreg = _zero_like_scalar(l_source)
        pair = T.add(lm, lreg)
        align = pair if align is None else T.add(align, pair)
    total = T.add(l_source, T.scale(align, weights.alpha))
    if flags.entropy_enabled:
        total = T.add(total, T.scale(_coerce(l_entropy, like=l_source), weights.beta))
    return total
