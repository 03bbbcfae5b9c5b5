"""Command-line surface: dataset generation, training, evaluation, the
ablation grid, the attention-difference study and the gradient verification
suite.

Config files are JSON whose field names mirror the dataclasses exactly; every
output is a pure function of the input files and flags (timing goes to a side
channel, never into result payloads).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, data, gradcheck
from .losses import LossWeights
from .model import ModelConfig, Variant, build
from .train import (TrainConfig, evaluate, load_model_from_checkpoint,
                    train as run_training)


def _from_dict(cls, payload, what):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - names)
    if unknown:
        raise ValueError(f"{what}: unknown field(s) {unknown}")
    return payload


def load_shift_spec(path):
    payload = json.loads(Path(path).read_text())
    return data.DomainShiftSpec(**_from_dict(data.DomainShiftSpec, payload,
                                             f"{path} (domain shift spec)"))


def load_run_config(path):
    payload = json.loads(Path(path).read_text())
    model_d = dict(payload.get("model", {}))
    train_d = dict(payload.get("train", {}))
    variant = Variant(payload.get("variant", "full"))
    for key in ("input_shape", "stage_widths"):
        if key in model_d:
            model_d[key] = tuple(model_d[key])
    if "weights" in train_d:
        train_d["weights"] = LossWeights(**_from_dict(
            LossWeights, train_d["weights"], f"{path} (weights)"))
    model_config = ModelConfig(**_from_dict(ModelConfig, model_d, f"{path} (model)"))
    train_config = TrainConfig(**_from_dict(TrainConfig, train_d, f"{path} (train)"))
    return model_config, train_config, variant


def cmd_gen_data(args):
    spec = load_shift_spec(args.spec)
    pair = data.generate_domain_pair(spec)
    data.save_pair(pair, args.out)
    print(f"wrote 4 splits to {args.out} "
          f"({len(pair.source_train)} train / {len(pair.source_test)} test per domain)")
    return 0


def cmd_train(args):
    model_config, train_config, variant = load_run_config(args.config)
    pair = data.load_pair(args.data, for_training=True)
    model = build(model_config, variant, analysis.model_rng(train_config.seed))
    run_training(model, pair, train_config, out_dir=args.out,
                 resume_from=args.resume,
                 log=lambda msg: print(msg, file=sys.stderr))
    print(f"run artifacts in {args.out}")
    return 0


_SPLITS = {"source-train": ("source_train", "source"),
           "source-test": ("source_test", "source"),
           "target-train": ("target_train", "target"),
           "target-test": ("target_test", "target")}


def cmd_eval(args):
    model, _ = load_model_from_checkpoint(args.ckpt)
    pair = data.load_pair(args.data)
    attr, domain = _SPLITS[args.split]
    corrected = None
    if args.target_head != "default":
        corrected = args.target_head == "corrected"
    acc = evaluate(model, getattr(pair, attr), domain, corrected=corrected)
    print(json.dumps({"split": args.split, "accuracy": acc}))
    return 0


def cmd_ablate(args):
    spec = load_shift_spec(args.spec)
    model_config, train_config, _ = load_run_config(args.config)
    variants = [Variant(v.strip()) for v in args.variants.split(",") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    report = analysis.run_ablation(spec, model_config, train_config, variants,
                                   seeds,
                                   log=lambda msg: print(msg, file=sys.stderr))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(report.to_csv())
    (out / "ablation.json").write_text(report.to_json())
    print((out / "ablation.csv").read_text(), end="")
    return 0


def cmd_attn_diff(args):
    model, _ = load_model_from_checkpoint(args.ckpt)
    pair = data.load_pair(args.data)
    report = analysis.attention_difference(model, pair)
    Path(args.out).write_text(report.to_json())
    matrix_path = Path(args.out).with_suffix(".matrix.txt")
    matrix_path.write_text(report.matrix_text())
    for s in report.stages:
        print(f"stage {s.stage}: {s.channels} channels, "
              f"mean diff {s.mean:.4f}, max {s.max:.4f}")
    return 0


def cmd_grad_check(args):
    if args.dtype != "f64":
        raise ValueError("the verification suite runs at f64")
    results = gradcheck.run_all(verbose=True)
    return 0 if all(ok for _, _, _, ok in results) else 1


def make_parser():
    parser = argparse.ArgumentParser(
        prog="dcan",
        description="synthetic two-domain adaptation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a domain pair to .dcn files")
    p.add_argument("--spec", required=True, help="domain shift spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated pair")
    p.add_argument("--data", required=True, help="directory with .dcn splits")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="target-test", choices=sorted(_SPLITS))
    p.add_argument("--target-head", default="default",
                   choices=["default", "corrected", "uncorrected"],
                   help="which softmax output classifies the batch")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run the variant x seed grid")
    p.add_argument("--spec", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--variants", default="full,no_ca,source_only")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("attn-diff", help="attention difference report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(fn=cmd_attn_diff)

    p = sub.add_parser("grad-check", help="finite-difference verification suite")
    p.add_argument("--dtype", default="f64", choices=["f64"])
    p.set_defaults(fn=cmd_grad_check)

    return parser


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
