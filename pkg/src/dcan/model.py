"""Full model assembly: residual backbone with domain conditioned attention,
linear classifier, and two feature correction blocks (after pooling and after
softmax), plus the ablation variants that switch mechanisms off.

Target batches run through the correction blocks as part of their forward
path; source batches classify through the uncorrected path and touch the
blocks only so their corrected features can feed the regularizer.  Target
inference reads the corrected softmax output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .blocks import (Conv2dLayer, DomainConditionedAttention, FeatureCorrectionBlock,
                     FrozenChannelNorm, LinearLayer, ResidualBlock,
                     correction_forward, softmax_correction)
from .losses import (AblationFlags, KernelConfig, LossWeights,
                     correction_alignment_loss, cross_entropy, sample_subset,
                     source_regularization_loss, target_entropy, total_objective)


class Variant(str, Enum):
    FULL = "full"
    SOURCE_ONLY = "source_only"
    NO_CA = "no_ca"
    NO_LM_LREG_1 = "no_lm_lreg_1"
    NO_LM_LREG_2 = "no_lm_lreg_2"
    NO_LREG_1 = "no_lreg_1"
    NO_LREG_2 = "no_lreg_2"
    NO_ENTROPY = "no_entropy"


def ablation_flags(variant, num_layers=2):
    lm = [True] * num_layers
    lreg = [True] * num_layers
    entropy = True
    if variant == Variant.SOURCE_ONLY:
        lm = [False] * num_layers
        lreg = [False] * num_layers
        entropy = False
    elif variant == Variant.NO_LM_LREG_1:
        lm[0] = lreg[0] = False
    elif variant == Variant.NO_LM_LREG_2:
        lm[1] = lreg[1] = False
    elif variant == Variant.NO_LREG_1:
        lreg[0] = False
    elif variant == Variant.NO_LREG_2:
        lreg[1] = False
    elif variant == Variant.NO_ENTROPY:
        entropy = False
    return AblationFlags(lm_enabled=tuple(lm), lreg_enabled=tuple(lreg),
                         entropy_enabled=entropy)


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    input_shape: tuple = (3, 32, 32)
    stage_widths: tuple = (16, 32, 64)
    blocks_per_stage: int = 2
    attention_ratio: int = 16
    correction_layers: int = 2

    @property
    def feature_width(self):
        return self.stage_widths[-1]

    def effective_ratio(self, channels):
        # floor the ratio per stage so the reduced width stays >= 4
        return min(self.attention_ratio, max(1, channels // 4))

    def validate(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ValueError(f"input_shape must be (channels, height, width), "
                             f"got {self.input_shape}")
        if not self.stage_widths:
            raise ValueError("stage_widths must be non-empty")
        for w in self.stage_widths:
            if w % self.effective_ratio(w):
                raise ValueError(
                    f"stage_widths: width {w} not divisible by effective "
                    f"attention ratio {self.effective_ratio(w)}")
        if self.blocks_per_stage < 1:
            raise ValueError(f"blocks_per_stage must be >= 1, got {self.blocks_per_stage}")
        if self.attention_ratio < 1:
            raise ValueError(f"attention_ratio must be >= 1, got {self.attention_ratio}")
        if self.correction_layers != 2:
            raise ValueError(
                f"correction_layers is fixed at 2 (pooled + softmax), "
                f"got {self.correction_layers}")


@dataclass
class ForwardRecord:
    pooled: Tensor
    pooled_corrected: Tensor
    probs: Tensor
    probs_corrected: Tensor
    attention: list  # last attention gates per stage, each (N, C)


@dataclass
class LossBreakdown:
    l_s: Tensor
    l_m: tuple
    l_reg: tuple
    l_e: Tensor
    total: Tensor

    def as_floats(self):
        out = {"L_s": self.l_s.item()}
        for i, (lm, lreg) in enumerate(zip(self.l_m, self.l_reg), start=1):
            out[f"L_M{i}"] = lm.item()
            out[f"L_reg{i}"] = lreg.item()
        out["L_e"] = self.l_e.item()
        out["total"] = self.total.item()
        return out


class DcanModel:
    def __init__(self, config, variant, rng, dtype=np.float32):
        config.validate()
        self.config = config
        self.variant = Variant(variant)
        self.dtype = np.dtype(dtype)
        tied = self.variant in (Variant.NO_CA, Variant.SOURCE_ONLY)

        c_in = config.input_shape[0]
        w0 = config.stage_widths[0]
        self.stem = Conv2dLayer(c_in, w0, 3, 1, 1, rng, dtype)
        self.stem_norm = FrozenChannelNorm(w0, dtype)
        self.stages = []
        in_ch = w0
        for s, width in enumerate(config.stage_widths):
            blocks = []
            for b in range(config.blocks_per_stage):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(ResidualBlock(in_ch, width, stride,
                                            config.effective_ratio(width),
                                            rng, dtype, tied_attention=tied))
                in_ch = width
            self.stages.append(blocks)
        self.classifier = LinearLayer(config.feature_width, config.num_classes,
                                      rng, dtype)
        if self.variant == Variant.SOURCE_ONLY:
            self.correction_pooled = None
            self.correction_probs = None
        else:
            self.correction_pooled = FeatureCorrectionBlock(config.feature_width,
                                                            rng, dtype)
            self.correction_probs = FeatureCorrectionBlock(config.num_classes,
                                                           rng, dtype)
        self._calibrate_conv_scales(rng)

    def _calibrate_conv_scales(self, rng, batch=16):
        """Rescale conv weights so a generic input produces unit-variance
        activations layer by layer.

        Without a pretrained backbone nothing anchors the activation scale,
        and the median-heuristic kernels otherwise meet a tiny initial
        feature spread where their gradients dwarf the classification loss.
        """
        x = Tensor(rng.uniform(0.0, 1.0,
                               (batch, *self.config.input_shape)).astype(self.dtype))
        h = self.stem.forward(x)
        self.stem.weight.data /= self._channel_scale(h)
        h = T.relu(self.stem_norm.forward(self.stem.forward(x)))
        for blocks in self.stages:
            for block in blocks:
                pre = block.conv1.forward(h)
                block.conv1.weight.data /= self._channel_scale(pre)
                mid = T.relu(block.norm1.forward(block.conv1.forward(h)))
                pre = block.conv2.forward(mid)
                block.conv2.weight.data /= self._channel_scale(pre)
                if block.projection is not None:
                    skip = block.projection.forward(h)
                    block.projection.weight.data /= self._channel_scale(skip)
                h, _ = block.forward(h, "source")

    def _channel_scale(self, out):
        std = out.data.std(axis=(0, 2, 3), keepdims=True)
        return np.maximum(std, 1e-3).reshape(-1, 1, 1, 1).astype(self.dtype)

    @property
    def has_corrections(self):
        return self.correction_pooled is not None

    def parameter_groups(self):
        """All trainable parameters as (name, tensor, group) triples."""
        out = [("stem.weight", self.stem.weight, "backbone")]
        for s, blocks in enumerate(self.stages):
            for b, block in enumerate(blocks):
                for n, p in block.parameters():
                    out.append((f"stage{s}.block{b}.{n}", p, "backbone"))
        for n, p in self.classifier.parameters():
            out.append((f"classifier.{n}", p, "classifier"))
        if self.has_corrections:
            for n, p in self.correction_pooled.parameters():
                out.append((f"correction_pooled.{n}", p, "correction"))
            for n, p in self.correction_probs.parameters():
                out.append((f"correction_probs.{n}", p, "correction"))
        return out

    def frozen_state_arrays(self):
        out = [("stem_norm." + n, a) for n, a in self.stem_norm.state_arrays()]
        for s, blocks in enumerate(self.stages):
            for b, block in enumerate(blocks):
                for n, a in block.state_arrays():
                    out.append((f"stage{s}.block{b}.{n}", a))
        return out

    def parameter_count(self):
        return sum(p.size for _, p, _ in self.parameter_groups())


def build(config, variant, rng, dtype=np.float32):
    """Deterministically construct a model from a config, variant and generator."""
    return DcanModel(config, variant, rng, dtype=dtype)


def forward(model, batch, domain):
    """Run one domain's batch; returns both corrected and uncorrected features."""
    expected = tuple(model.config.input_shape)
    if batch.data.ndim != 4 or batch.data.shape[1:] != expected:
        raise ValueError(
            f"batch shape {batch.data.shape} does not match input shape {expected}")
    h = T.relu(model.stem_norm.forward(model.stem.forward(batch)))
    attention = []
    for blocks in model.stages:
        for block in blocks:
            h, v = block.forward(h, domain)
        attention.append(v)
    pooled = T.global_avg_pool(h)

    if model.has_corrections:
        _, pooled_corrected = correction_forward(model.correction_pooled, pooled)
    else:
        pooled_corrected = pooled
    # the corrected representation is the target's main path; source classifies
    # through the uncorrected one and only feeds the blocks for regularization
    cls_input = pooled_corrected if domain == "target" else pooled
    probs = T.softmax(model.classifier.forward(cls_input))
    if model.has_corrections:
        probs_corrected = softmax_correction(model.correction_probs, probs)
    else:
        probs_corrected = probs
    return ForwardRecord(pooled=pooled, pooled_corrected=pooled_corrected,
                         probs=probs, probs_corrected=probs_corrected,
                         attention=attention)


def predict(model, batch, domain, corrected=None):
    """Argmax class labels; target reads the corrected head unless overridden."""
    record = forward(model, batch, domain)
    if corrected is None:
        corrected = (domain == "target")
    probs = record.probs_corrected if corrected else record.probs
    return np.argmax(probs.data, axis=1)


PROBS_BANDWIDTH_FLOOR = 0.05


def step_losses(model, source_batch, source_labels, target_batch, weights,
                kernel, rng_seed, step, base_bandwidth=None):
    """All objective components for one training step.

    Subset draws are derived from (rng_seed, step, layer) so each layer's
    subset is independent, and they are drawn for every layer regardless of
    ablation so variants sharing a seed see identical sampling streams.

    Probability-space alignment terms get a kernel bandwidth floor matched to
    the simplex scale: without it, rows bunching toward uniform sharpen the
    median-heuristic kernels without bound and the alignment pressure never
    lets the classifier commit.
    """
    flags = ablation_flags(model.variant, weights.num_correction_layers)
    record_s = forward(model, source_batch, "source")
    l_s = cross_entropy(record_s.probs, source_labels)
    zero = Tensor(np.zeros((), dtype=model.dtype))

    num_layers = weights.num_correction_layers
    if not model.has_corrections:
        total = total_objective(l_s, [(zero, zero)] * num_layers, zero, weights,
                                flags)
        return LossBreakdown(l_s=l_s, l_m=(zero,) * num_layers,
                             l_reg=(zero,) * num_layers, l_e=zero, total=total)

    record_t = forward(model, target_batch, "target")
    layer_feats = [
        (record_s.pooled, record_s.pooled_corrected, record_t.pooled_corrected),
        (record_s.probs, record_s.probs_corrected, record_t.probs_corrected),
    ]
    l_m, l_reg = [], []
    for layer, (h_s, h_s_corr, h_t_corr) in enumerate(layer_feats):
        layer_rng = np.random.default_rng([int(rng_seed), int(step), layer])
        subset = sample_subset(source_labels, weights.p_subset,
                               model.config.num_classes, layer_rng)
        floor = PROBS_BANDWIDTH_FLOOR if layer == 1 else None
        if flags.lm_enabled[layer]:
            l_m.append(correction_alignment_loss(h_s, h_t_corr, kernel,
                                                 base_bandwidth=base_bandwidth,
                                                 bandwidth_floor=floor))
        else:
            l_m.append(zero)
        if flags.lreg_enabled[layer]:
            l_reg.append(source_regularization_loss(
                h_s, h_s_corr, source_labels, subset, model.config.num_classes,
                kernel, base_bandwidth=base_bandwidth, bandwidth_floor=floor))
        else:
            l_reg.append(zero)
    l_e = target_entropy(record_t.probs_corrected) if flags.entropy_enabled else zero
    total = total_objective(l_s, list(zip(l_m, l_reg)), l_e, weights, flags)
    return LossBreakdown(l_s=l_s, l_m=tuple(l_m), l_reg=tuple(l_reg), l_e=l_e,
                         total=total)
