"""Attention-difference study and the ablation grid.

The attention study compares how the two domain routes excite channels: every
sample of both training sets is run through the source route and through the
target route, the gates of the last attention module in each stage are
averaged per route, and the per-channel absolute difference
|mean_v_source - mean_v_target| is reported, one matrix row per stage.
Evaluating both routes on the same pooled samples isolates the route
difference from the data difference, and makes the report exactly zero when
the routes are tied.  The ablation grid trains each requested variant over
several seeds and reports mean target accuracy per variant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .tensor import Tensor
from .data import generate_domain_pair
from .model import Variant, build, forward
from .train import TrainConfig, train, _SALT_MODEL


@dataclass
class StageAttentionDiff:
    stage: int
    channels: int
    abs_diff: np.ndarray
    mean: float
    max: float


@dataclass
class AttentionDiffReport:
    stages: list

    def to_dict(self):
        return {"stages": [{"stage": s.stage, "channels": s.channels,
                            "abs_diff": [float(x) for x in s.abs_diff],
                            "mean": s.mean, "max": s.max}
                           for s in self.stages]}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def matrix_text(self):
        """Gnuplot-friendly rows: one stage per line, channels space-separated."""
        lines = []
        for s in self.stages:
            lines.append(" ".join(repr(float(x)) for x in s.abs_diff))
        return "\n".join(lines) + "\n"


def _mean_attention(model, datasets, domain, batch_size=64):
    sums = None
    total = 0
    for dataset in datasets:
        for start in range(0, len(dataset), batch_size):
            images = dataset.images[start:start + batch_size]
            batch = Tensor(images.astype(model.dtype, copy=False))
            record = forward(model, batch, domain)
            vals = [v.data.sum(axis=0) for v in record.attention]
            if sums is None:
                sums = vals
            else:
                sums = [s + v for s, v in zip(sums, vals)]
            total += images.shape[0]
    return [s / total for s in sums]


def attention_difference(model, pair, batch_size=64):
    """Per-stage |mean source-route gate - mean target-route gate|, both
    routes evaluated over the pooled source and target training samples."""
    pooled = (pair.source_train, pair.target_train)
    v_src = _mean_attention(model, pooled, "source", batch_size)
    v_tgt = _mean_attention(model, pooled, "target", batch_size)
    stages = []
    for i, (vs, vt) in enumerate(zip(v_src, v_tgt)):
        diff = np.abs(vs - vt)
        stages.append(StageAttentionDiff(stage=i, channels=diff.size,
                                         abs_diff=diff,
                                         mean=float(diff.mean()),
                                         max=float(diff.max())))
    return AttentionDiffReport(stages=stages)


@dataclass
class AblationRow:
    variant: str
    seed_accs: dict          # seed -> target accuracy, absent when the run failed
    errors: dict             # seed -> error string for aborted runs

    @property
    def mean_acc(self):
        if not self.seed_accs:
            return None
        return float(np.mean(list(self.seed_accs.values())))


@dataclass
class AblationReport:
    rows: list
    seeds: list

    def to_dict(self):
        return {"seeds": list(self.seeds),
                "rows": [{"variant": r.variant,
                          "seed_accs": {str(k): v for k, v in r.seed_accs.items()},
                          "errors": {str(k): v for k, v in r.errors.items()},
                          "mean_acc": r.mean_acc}
                         for r in self.rows]}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self):
        lines = ["variant," + ",".join(f"acc_seed_{s}" for s in self.seeds)
                 + ",mean_acc"]
        for r in self.rows:
            cells = [r.variant]
            for s in self.seeds:
                if s in r.seed_accs:
                    cells.append(repr(r.seed_accs[s]))
                else:
                    cells.append("error")
            cells.append(repr(r.mean_acc) if r.mean_acc is not None else "error")
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def model_rng(seed):
    return np.random.default_rng([int(seed), _SALT_MODEL])


def run_ablation(spec, model_config, train_config, variants, seeds, kernel=None,
                 log=None):
    """Train every (variant, seed) cell on one generated pair; failures are
    recorded in the row and the grid continues."""
    if not variants or not seeds:
        raise ValueError("ablation needs at least one variant and one seed")
    pair = generate_domain_pair(spec)
    rows = []
    for variant in variants:
        variant = Variant(variant)
        accs, errors = {}, {}
        for seed in seeds:
            cfg = replace(train_config, seed=int(seed))
            try:
                model = build(model_config, variant, model_rng(seed))
                result = train(model, pair, cfg, kernel=kernel)
                accs[seed] = result.metrics[-1].tgt_acc
                if log:
                    log(f"{variant.value} seed={seed} "
                        f"tgt_acc={accs[seed]:.3f}")
            except Exception as e:  # noqa: BLE001 - grid must survive cell failures
                errors[seed] = f"{type(e).__name__}: {e}"
                if log:
                    log(f"{variant.value} seed={seed} FAILED: {errors[seed]}")
        rows.append(AblationRow(variant=variant.value, seed_accs=accs,
                                errors=errors))
    return AblationReport(rows=rows, seeds=list(seeds))
