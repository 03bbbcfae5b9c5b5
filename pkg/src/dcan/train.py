"""Training loop: SGD with classical momentum, inverse-decay learning-rate
schedule with per-group multipliers (backbone 1x, classifier 10x, correction
blocks 0.1x), periodic evaluation, and bit-exact checkpointing.

Every random draw is a pure function of (config.seed, step), so a run is a
deterministic function of its config and dataset bytes, and resuming from a
checkpoint reproduces the uninterrupted run exactly.
"""

from __future__ import annotations

import csv
import io
import json
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .data import BatchStream
from .losses import KernelConfig, LossWeights
from .model import DcanModel, ModelConfig, Variant, build, predict, step_losses

CKPT_MAGIC = b"DCKP"
CKPT_VERSION = 1

# seed stream salts so model init, source batches and target batches differ
_SALT_MODEL = 101
_SALT_SOURCE = 202
_SALT_TARGET = 303

METRIC_COLUMNS = ("step", "L_s", "L_M1", "L_reg1", "L_M2", "L_reg2", "L_e",
                  "total", "src_acc", "tgt_acc")


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 200
    base_lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    sched_a: float = 10.0
    sched_b: float = 0.75
    lr_mult_backbone: float = 1.0
    lr_mult_classifier: float = 10.0
    lr_mult_correction: float = 0.1
    eval_interval: int = 25

    def validate(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("lr_mult_backbone", "lr_mult_classifier", "lr_mult_correction"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.eval_interval < 1:
            raise ValueError(f"eval_interval must be >= 1, got {self.eval_interval}")


@dataclass
class MetricsRow:
    step: int
    losses: dict
    src_acc: float
    tgt_acc: float
    wall_time: float  # side channel only, never written into metrics payloads

    def csv_values(self):
        vals = [str(self.step)]
        for key in METRIC_COLUMNS[1:8]:
            vals.append(repr(self.losses[key]))
        vals.append(repr(self.src_acc))
        vals.append(repr(self.tgt_acc))
        return vals


class TrainingDiverged(RuntimeError):
    def __init__(self, step, components):
        self.step = step
        self.components = components
        super().__init__(
            f"non-finite loss at step {step}: " +
            ", ".join(f"{k}={v}" for k, v in components.items()))


def lr_at(progress, config):
    """Per-group learning rates at a progress fraction in [0, 1]."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {progress}")
    eta = config.base_lr * (1.0 + config.sched_a * progress) ** (-config.sched_b)
    return {"backbone": eta * config.lr_mult_backbone,
            "classifier": eta * config.lr_mult_classifier,
            "correction": eta * config.lr_mult_correction}


class OptimizerState:
    """Per-parameter momentum buffers, zero at start."""

    def __init__(self, param_groups):
        self.buffers = {name: np.zeros_like(p.data)
                        for name, p, _ in param_groups}

    def named_buffers(self):
        return sorted(self.buffers.items())


def sgd_step(param_groups, state, rates, momentum):
    """Classical momentum update: buf <- m*buf + grad; param <- param - lr*buf."""
    for name, p, group in param_groups:
        g = T.grad_of(p)
        buf = state.buffers[name]
        if buf.shape != g.shape:
            raise ValueError(
                f"momentum buffer shape {buf.shape} does not match gradient "
                f"shape {g.shape} for {name}")
        buf *= momentum
        buf += g
        p.data -= rates[group] * buf


def evaluate(model, dataset, domain, batch_size=64, corrected=None):
    """Fraction of correct predictions over a labeled split."""
    if dataset.labels is None:
        raise ValueError(f"cannot evaluate an unlabeled {domain} split")
    hits = 0
    for start in range(0, len(dataset), batch_size):
        images = dataset.images[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        batch = Tensor(images.astype(model.dtype, copy=False))
        pred = predict(model, batch, domain, corrected=corrected)
        hits += int((pred == labels).sum())
    return hits / len(dataset)


@dataclass
class TrainResult:
    model: DcanModel
    metrics: list
    optimizer: OptimizerState
    final_step: int


def train(model, pair, config, kernel=None, out_dir=None, resume_from=None,
          stop_at_step=None, log=None):
    """Optimize the combined objective on a domain pair.

    Aborts with TrainingDiverged if any loss component goes non-finite.
    When out_dir is given, writes metrics.csv, summary.json, final.dckp and a
    timing.log side channel there.  stop_at_step interrupts the run early
    (same schedule, fewer steps) so it can be resumed from a checkpoint.
    """
    config.validate()
    kernel = kernel or KernelConfig()
    pair = pair.for_training()
    groups = model.parameter_groups()
    state = OptimizerState(groups)
    start_step = 0
    if resume_from is not None:
        start_step = load_checkpoint_into(resume_from, model, state)
    end_step = config.total_steps if stop_at_step is None else min(
        config.total_steps, stop_at_step)

    src_stream = BatchStream(len(pair.source_train), config.batch_size,
                             _stream_seed(config.seed, _SALT_SOURCE))
    tgt_stream = BatchStream(len(pair.target_train), config.batch_size,
                             _stream_seed(config.seed, _SALT_TARGET))

    metrics = []
    t0 = time.perf_counter()
    for step in range(start_step, end_step):
        src_idx = src_stream.indices_at(step)
        tgt_idx = tgt_stream.indices_at(step)
        src_images = Tensor(pair.source_train.images[src_idx].astype(model.dtype,
                                                                     copy=False))
        src_labels = pair.source_train.labels[src_idx]
        tgt_images = Tensor(pair.target_train.images[tgt_idx].astype(model.dtype,
                                                                     copy=False))
        breakdown = step_losses(model, src_images, src_labels, tgt_images,
                                config.weights, kernel,
                                rng_seed=config.seed, step=step)
        components = breakdown.as_floats()
        if not all(np.isfinite(v) for v in components.values()):
            raise TrainingDiverged(step, components)

        T.backward(breakdown.total)
        group_rates = lr_at(step / config.total_steps, config)
        sgd_step(groups, state, group_rates, config.momentum)
        for _, p, _ in groups:
            p.zero_grad()

        done = step + 1
        if done % config.eval_interval == 0 or done == config.total_steps:
            row = MetricsRow(
                step=done, losses=components,
                src_acc=evaluate(model, pair.source_test, "source",
                                 batch_size=config.batch_size),
                tgt_acc=evaluate(model, pair.target_test, "target",
                                 batch_size=config.batch_size),
                wall_time=time.perf_counter() - t0)
            metrics.append(row)
            if log:
                log(f"step {done}/{config.total_steps} "
                    f"total={components['total']:.4f} "
                    f"src={row.src_acc:.3f} tgt={row.tgt_acc:.3f}")

    result = TrainResult(model=model, metrics=metrics, optimizer=state,
                         final_step=end_step)
    if out_dir is not None:
        write_run_outputs(result, config, Path(out_dir))
    return result


def _stream_seed(seed, salt):
    return (int(seed) << 16) ^ salt


def metrics_csv_text(metrics):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in metrics:
        writer.writerow(row.csv_values())
    return buf.getvalue()


def write_run_outputs(result, config, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.csv").write_text(metrics_csv_text(result.metrics))
    summary = {
        "config": config_to_dict(config),
        "model": model_config_to_dict(result.model.config),
        "variant": result.model.variant.value,
        "final_step": result.final_step,
        "final": {**result.metrics[-1].losses,
                  "src_acc": result.metrics[-1].src_acc,
                  "tgt_acc": result.metrics[-1].tgt_acc} if result.metrics else {},
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2,
                                                     sort_keys=True) + "\n")
    timing = "\n".join(f"step {m.step}: {m.wall_time:.3f}s" for m in result.metrics)
    (out_dir / "timing.log").write_text(timing + "\n" if timing else "")
    save_checkpoint(out_dir / "final.dckp", result.model, result.optimizer,
                    result.final_step)


def config_to_dict(config):
    d = asdict(config)
    return d


def model_config_to_dict(mc):
    d = asdict(mc)
    d["input_shape"] = list(d["input_shape"])
    d["stage_widths"] = list(d["stage_widths"])
    return d


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _pack_arrays(named):
    out = bytearray()
    out += struct.pack("<I", len(named))
    for name, arr in named:
        nb = name.encode()
        a = np.ascontiguousarray(arr, dtype="<f4")
        out += struct.pack("<H", len(nb))
        out += nb
        out += struct.pack("<I", a.size)
        out += a.tobytes()
    return bytes(out)


def _unpack_arrays(blob, offset):
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    named = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + nlen].decode()
        offset += nlen
        (numel,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        arr = np.frombuffer(blob, dtype="<f4", count=numel, offset=offset).copy()
        offset += numel * 4
        named[name] = arr
    return named, offset


def save_checkpoint(path, model, optimizer, step):
    if model.dtype != np.dtype(np.float32):
        raise ValueError("checkpoints store f32 arrays; train models in f32")
    echo = {"model": model_config_to_dict(model.config),
            "variant": model.variant.value}
    echo_bytes = json.dumps(echo, sort_keys=True).encode()
    params = [(n, p.data) for n, p, _ in model.parameter_groups()]
    frozen = model.frozen_state_arrays()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<I", len(echo_bytes)))
        f.write(echo_bytes)
        f.write(struct.pack("<I", step))
        f.write(_pack_arrays(params))
        f.write(_pack_arrays(frozen))
        f.write(_pack_arrays(optimizer.named_buffers()))


def read_checkpoint(path):
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise FormatErrorCkpt(f"{path}: bad checkpoint magic, expected {CKPT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CKPT_VERSION:
        raise FormatErrorCkpt(f"{path}: unsupported checkpoint version {version}")
    (elen,) = struct.unpack_from("<I", blob, 8)
    echo = json.loads(blob[12:12 + elen].decode())
    offset = 12 + elen
    (step,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    params, offset = _unpack_arrays(blob, offset)
    frozen, offset = _unpack_arrays(blob, offset)
    buffers, offset = _unpack_arrays(blob, offset)
    if offset != len(blob):
        raise FormatErrorCkpt(f"{path}: trailing bytes in checkpoint")
    return echo, step, params, frozen, buffers


class FormatErrorCkpt(ValueError):
    pass


def model_config_from_dict(d):
    d = dict(d)
    d["input_shape"] = tuple(d["input_shape"])
    d["stage_widths"] = tuple(d["stage_widths"])
    return ModelConfig(**d)


def _check_config_match(echo_model, model):
    saved = echo_model
    current = model_config_to_dict(model.config)
    for key, value in current.items():
        if saved.get(key) != value:
            raise ValueError(
                f"checkpoint model config mismatch in field {key!r}: "
                f"saved {saved.get(key)!r}, current {value!r}")


def load_checkpoint_into(path, model, optimizer):
    """Restore parameters, frozen stats and momentum buffers; returns the step."""
    echo, step, params, frozen, buffers = read_checkpoint(path)
    _check_config_match(echo["model"], model)
    if echo["variant"] != model.variant.value:
        raise ValueError(
            f"checkpoint variant mismatch: saved {echo['variant']!r}, "
            f"current {model.variant.value!r}")
    named = {n: p for n, p, _ in model.parameter_groups()}
    if set(named) != set(params):
        missing = sorted(set(named) ^ set(params))
        raise ValueError(f"checkpoint parameter names do not match: {missing}")
    for n, p in named.items():
        p.data = params[n].reshape(p.data.shape).astype(model.dtype)
    for n, arr in model.frozen_state_arrays():
        arr[...] = frozen[n].reshape(arr.shape)
    for n in optimizer.buffers:
        optimizer.buffers[n] = buffers[n].reshape(optimizer.buffers[n].shape).copy()
    return step


def load_model_from_checkpoint(path, dtype=np.float32):
    """Rebuild a model purely from a checkpoint file."""
    echo, step, params, frozen, buffers = read_checkpoint(path)
    config = model_config_from_dict(echo["model"])
    model = build(config, Variant(echo["variant"]), np.random.default_rng(0),
                  dtype=dtype)
    named = {n: p for n, p, _ in model.parameter_groups()}
    for n, p in named.items():
        p.data = params[n].reshape(p.data.shape).astype(model.dtype)
    for n, arr in model.frozen_state_arrays():
        arr[...] = frozen[n].reshape(arr.shape)
    return model, step
