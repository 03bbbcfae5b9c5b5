"""Network building blocks: domain conditioned channel attention, the
feature correction adapter, and the conventional conv/linear layers they
live inside.

Attention keeps one dimensionality-reduction route per domain and a shared
expansion, so the gates v = sigma(W_expand(relu(g @ W_reduce_domain))) can
excite different channels for source and target while most parameters stay
shared.  Tying the routes collapses the module back to an ordinary shared
channel attention.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

DOMAINS = ("source", "target")
PROB_FLOOR = 1e-8
SIMPLEX_TOL = 1e-5


def _uniform(rng, bound, shape, dtype):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2dLayer:
    """Bias-free 2-D convolution with a fixed stride and padding."""

    def __init__(self, in_channels, out_channels, kernel_size, stride, padding,
                 rng, dtype):
        fan_in = in_channels * kernel_size * kernel_size
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                       size=(out_channels, in_channels, kernel_size, kernel_size))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return T.conv2d(x, self.weight, stride=self.stride, padding=self.padding)

    def parameters(self):
        return [("weight", self.weight)]


class FrozenChannelNorm:
    """Per-channel affine normalization with frozen running statistics.

    Statistics initialize to the identity (mean 0, variance 1, scale 1,
    shift 0) and are never updated; with unit frozen variance no epsilon is
    needed, so the layer is exactly the identity until the constants change.
    """

    def __init__(self, channels, dtype):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.scale = np.ones(channels, dtype=dtype)
        self.shift = np.zeros(channels, dtype=dtype)

    def _is_identity(self):
        return (not self.mean.any() and not self.shift.any()
                and (self.var == 1).all() and (self.scale == 1).all())

    def forward(self, x):
        if self._is_identity():
            return x
        gamma = self.scale / np.sqrt(self.var)
        beta = self.shift - self.mean * gamma
        g = Tensor(gamma.reshape(1, -1, 1, 1))
        b = Tensor(beta.reshape(1, -1, 1, 1))
        return T.add(T.mul(x, g), b)

    def state_arrays(self):
        return [("mean", self.mean), ("var", self.var),
                ("scale", self.scale), ("shift", self.shift)]


class LinearLayer:
    def __init__(self, in_features, out_features, rng, dtype, gain=1.0):
        bound = gain * np.sqrt(6.0 / (in_features + out_features))
        self.weight = Tensor(_uniform(rng, bound, (in_features, out_features), dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def forward(self, x):
        if x.shape[1] != self.weight.shape[0]:
            raise ValueError(
                f"linear layer expects width {self.weight.shape[0]}, got {x.shape}")
        return T.add(T.matmul(x, self.weight), self.bias)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class DomainConditionedAttention:
    """Channel gates with per-domain reduction routes and a shared expansion."""

    def __init__(self, channels, ratio, rng, dtype, tied=False):
        if channels % ratio:
            raise ValueError(f"channels {channels} not divisible by ratio {ratio}")
        reduced = channels // ratio
        self.channels = channels
        self.ratio = ratio
        self.tied = tied
        self.reduce_source = Tensor(
            _uniform(rng, 1.0 / np.sqrt(channels), (channels, reduced), dtype),
            requires_grad=True)
        if tied:
            self.reduce_target = self.reduce_source
        else:
            # routes start from identical values and diverge through training
            self.reduce_target = Tensor(self.reduce_source.data.copy(),
                                        requires_grad=True)
        self.expand_shared = Tensor(
            _uniform(rng, 1.0 / np.sqrt(reduced), (reduced, channels), dtype),
            requires_grad=True)

    def route(self, domain):
        if domain == "source":
            return self.reduce_source
        if domain == "target":
            return self.reduce_target
        raise ValueError(f"unknown domain {domain!r}, expected one of {DOMAINS}")

    def forward(self, x, domain):
        """Gate each channel of x; returns (gated, gates)."""
        if x.shape[1] != self.channels:
            raise ValueError(
                f"attention configured for {self.channels} channels, got {x.shape}")
        g = T.global_avg_pool(x)
        f = T.matmul(g, self.route(domain))
        v = T.sigmoid(T.matmul(T.relu(f), self.expand_shared))
        gated = T.mul(x, T.reshape(v, (x.shape[0], self.channels, 1, 1)))
        return gated, v

    def parameters(self):
        params = [("reduce_source", self.reduce_source)]
        if not self.tied:
            params.append(("reduce_target", self.reduce_target))
        params.append(("expand_shared", self.expand_shared))
        return params


def dca_forward(att, x, domain):
    out, _ = att.forward(x, domain)
    return out


class FeatureCorrectionBlock:
    """FC-ReLU-FC residual adapter; the second layer starts at exactly zero,
    so the block is the identity map until training moves it."""

    def __init__(self, width, rng, dtype, hidden=None):
        self.width = width
        self.hidden = hidden if hidden is not None else max(4, width // 2)
        bound = 1.0 / np.sqrt(width)
        self.fc1_weight = Tensor(_uniform(rng, bound, (width, self.hidden), dtype),
                                 requires_grad=True)
        self.fc1_bias = Tensor(np.zeros(self.hidden, dtype=dtype), requires_grad=True)
        self.fc2_weight = Tensor(np.zeros((self.hidden, width), dtype=dtype),
                                 requires_grad=True)
        self.fc2_bias = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)

    def delta(self, h):
        if h.shape[1] != self.width:
            raise ValueError(
                f"correction block expects width {self.width}, got {h.shape}")
        hidden = T.relu(T.add(T.matmul(h, self.fc1_weight), self.fc1_bias))
        return T.add(T.matmul(hidden, self.fc2_weight), self.fc2_bias)

    def parameters(self):
        return [("fc1_weight", self.fc1_weight), ("fc1_bias", self.fc1_bias),
                ("fc2_weight", self.fc2_weight), ("fc2_bias", self.fc2_bias)]


def correction_forward(block, h):
    """Apply a correction block: returns (delta, h + delta)."""
    d = block.delta(h)
    return d, T.add(h, d)


def softmax_correction(block, probs):
    """Correct a batch of probability rows and keep them on the simplex.

    The corrected rows are clamped to >= 1e-8 and rescaled to the input row
    mass (which is 1 within the input tolerance).  Rescaling to the input's
    own mass keeps an exactly-zero correction a bitwise no-op while the
    gradient still flows through the whole expression.
    """
    if probs.data.ndim != 2:
        raise ValueError(f"softmax correction expects rank-2 rows, got {probs.shape}")
    rows = probs.data.sum(axis=1)
    worst = float(np.max(np.abs(rows - 1.0))) if rows.size else 0.0
    if worst > SIMPLEX_TOL:
        raise ValueError(
            f"softmax correction input off the simplex by {worst:.2e} (> {SIMPLEX_TOL})")
    _, raw = correction_forward(block, probs)
    clamped = T.clamp_min(raw, PROB_FLOOR)
    mass_in = T.tsum(probs, axis=1, keepdims=True)
    mass_out = T.tsum(clamped, axis=1, keepdims=True)
    return T.mul(clamped, T.div(mass_in, mass_out))


class ResidualBlock:
    """Two 3x3 convolutions with frozen normalization, channel attention on
    the residual branch, and an optional 1x1 projection on the skip path."""

    def __init__(self, in_channels, out_channels, stride, ratio, rng, dtype,
                 tied_attention=False):
        # stride-2 convolutions use even kernels so output extents stay integral
        k1 = 4 if stride == 2 else 3
        self.conv1 = Conv2dLayer(in_channels, out_channels, k1, stride, 1, rng, dtype)
        self.norm1 = FrozenChannelNorm(out_channels, dtype)
        self.conv2 = Conv2dLayer(out_channels, out_channels, 3, 1, 1, rng, dtype)
        self.norm2 = FrozenChannelNorm(out_channels, dtype)
        self.attention = DomainConditionedAttention(out_channels, ratio, rng, dtype,
                                                    tied=tied_attention)
        if stride != 1 or in_channels != out_channels:
            kp = 2 if stride == 2 else 1
            self.projection = Conv2dLayer(in_channels, out_channels, kp, stride, 0,
                                          rng, dtype)
        else:
            self.projection = None

    def forward(self, x, domain):
        h = T.relu(self.norm1.forward(self.conv1.forward(x)))
        h = self.norm2.forward(self.conv2.forward(h))
        h, v = self.attention.forward(h, domain)
        skip = self.projection.forward(x) if self.projection is not None else x
        return T.relu(T.add(skip, h)), v

    def parameters(self):
        params = [("conv1." + n, p) for n, p in self.conv1.parameters()]
        params += [("conv2." + n, p) for n, p in self.conv2.parameters()]
        params += [("attention." + n, p) for n, p in self.attention.parameters()]
        if self.projection is not None:
            params += [("projection." + n, p) for n, p in self.projection.parameters()]
        return params

    def state_arrays(self):
        out = [("norm1." + n, a) for n, a in self.norm1.state_arrays()]
        out += [("norm2." + n, a) for n, a in self.norm2.state_arrays()]
        return out


def residual_block_forward(block, x, domain):
    out, _ = block.forward(x, domain)
    return out
