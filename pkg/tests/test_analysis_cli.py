import json

import numpy as np
import pytest

from dcan.analysis import attention_difference, model_rng, run_ablation
from dcan.cli import main
from dcan.data import DomainShiftSpec, generate_domain_pair, save_pair
from dcan.model import ModelConfig, Variant, build
from dcan.train import (OptimizerState, TrainConfig, load_model_from_checkpoint,
                        save_checkpoint, train)


def tiny_spec(**overrides):
    base = dict(num_classes=2, samples_per_class_train=6, samples_per_class_test=4,
                height=16, width=16, seed=3)
    base.update(overrides)
    return DomainShiftSpec(**base)


def tiny_model_config():
    return ModelConfig(num_classes=2, input_shape=(3, 16, 16), stage_widths=(8, 16),
                       blocks_per_stage=1)


def tiny_train_config(**overrides):
    base = dict(total_steps=4, batch_size=6, eval_interval=2, seed=1,
                base_lr=0.002)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_pair():
    return generate_domain_pair(tiny_spec())


class TestAttentionDifference:
    def test_tied_routes_give_all_zero_report(self, tiny_pair):
        model = build(tiny_model_config(), Variant.NO_CA, model_rng(0))
        report = attention_difference(model, tiny_pair)
        assert len(report.stages) == 2
        for stage in report.stages:
            np.testing.assert_array_equal(stage.abs_diff, 0.0)
            assert stage.max == 0.0

    def test_untrained_equal_routes_give_zero(self, tiny_pair):
        # untied routes start from identical values, so before any update the
        # two domains excite channels identically
        model = build(tiny_model_config(), Variant.FULL, model_rng(1))
        report = attention_difference(model, tiny_pair)
        for stage in report.stages:
            np.testing.assert_array_equal(stage.abs_diff, 0.0)

    def test_channel_counts_and_bounds_after_training(self, tiny_pair):
        model = build(tiny_model_config(), Variant.FULL, model_rng(2))
        train(model, tiny_pair, tiny_train_config())
        report = attention_difference(model, tiny_pair)
        for stage, width in zip(report.stages, (8, 16)):
            assert stage.channels == width
            assert stage.abs_diff.shape == (width,)
            assert (stage.abs_diff >= 0).all() and (stage.abs_diff < 1).all()
            assert 0 <= stage.mean <= stage.max < 1

    def test_report_regenerated_from_checkpoint_is_identical(self, tiny_pair,
                                                             tmp_path):
        model = build(tiny_model_config(), Variant.FULL, model_rng(3))
        res = train(model, tiny_pair, tiny_train_config())
        ckpt = tmp_path / "m.dckp"
        save_checkpoint(ckpt, model, res.optimizer, res.final_step)
        reports = []
        for _ in range(2):
            loaded, _ = load_model_from_checkpoint(ckpt)
            reports.append(attention_difference(loaded, tiny_pair).to_json())
        assert reports[0] == reports[1]


class TestRunAblation:
    def test_single_variant_single_row(self):
        report = run_ablation(tiny_spec(), tiny_model_config(),
                              tiny_train_config(), [Variant.SOURCE_ONLY], [0])
        assert len(report.rows) == 1
        row = report.rows[0]
        assert row.variant == "source_only"
        assert 0.0 <= row.seed_accs[0] <= 1.0
        assert row.mean_acc == row.seed_accs[0]

    def test_deterministic_report(self):
        kwargs = dict(spec=tiny_spec(), model_config=tiny_model_config(),
                      train_config=tiny_train_config(),
                      variants=[Variant.SOURCE_ONLY, Variant.NO_CA], seeds=[0, 1])
        a = run_ablation(**kwargs).to_json()
        b = run_ablation(**kwargs).to_json()
        assert a == b

    def test_child_failure_recorded_and_grid_continues(self, monkeypatch):
        import importlib
        analysis_mod = importlib.import_module("dcan.analysis")
        real_train = analysis_mod.train

        def flaky(model, pair, config, **kwargs):
            if model.variant == Variant.NO_CA:
                raise RuntimeError("boom")
            return real_train(model, pair, config, **kwargs)

        monkeypatch.setattr(analysis_mod, "train", flaky)
        report = run_ablation(tiny_spec(), tiny_model_config(),
                              tiny_train_config(),
                              [Variant.NO_CA, Variant.SOURCE_ONLY], [0, 1])
        assert len(report.rows) == 2
        failed = report.rows[0]
        assert failed.variant == "no_ca"
        assert failed.mean_acc is None
        assert set(failed.errors) == {0, 1}
        assert "boom" in failed.errors[0]
        healthy = report.rows[1]
        assert healthy.mean_acc is not None
        assert "error" in report.to_csv().splitlines()[1]

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            run_ablation(tiny_spec(), tiny_model_config(), tiny_train_config(),
                         [], [0])


class TestCli:
    def write_configs(self, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({
            "num_classes": 2, "samples_per_class_train": 6,
            "samples_per_class_test": 4, "height": 16, "width": 16, "seed": 3}))
        config = tmp_path / "config.json"
        config.write_text(json.dumps({
            "model": {"num_classes": 2, "input_shape": [3, 16, 16],
                      "stage_widths": [8, 16], "blocks_per_stage": 1},
            "train": {"total_steps": 4, "batch_size": 6, "eval_interval": 2,
                      "seed": 1, "base_lr": 0.002},
            "variant": "full"}))
        return spec, config

    def test_pipeline_gen_train_eval(self, tmp_path, capsys):
        spec, config = self.write_configs(tmp_path)
        data_dir = tmp_path / "data"
        run_dir = tmp_path / "run"
        assert main(["gen-data", "--spec", str(spec), "--out", str(data_dir)]) == 0
        assert (data_dir / "target_train.dcn").exists()
        assert main(["train", "--data", str(data_dir), "--config", str(config),
                     "--out", str(run_dir)]) == 0
        assert (run_dir / "metrics.csv").exists()
        assert (run_dir / "final.dckp").exists()
        capsys.readouterr()
        assert main(["eval", "--ckpt", str(run_dir / "final.dckp"),
                     "--data", str(data_dir), "--split", "target-test"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["split"] == "target-test"
        assert 0.0 <= payload["accuracy"] <= 1.0
        assert main(["eval", "--ckpt", str(run_dir / "final.dckp"),
                     "--data", str(data_dir), "--split", "target-test",
                     "--target-head", "uncorrected"]) == 0

    def test_attn_diff_emits_report(self, tmp_path):
        spec, config = self.write_configs(tmp_path)
        data_dir = tmp_path / "data"
        run_dir = tmp_path / "run"
        main(["gen-data", "--spec", str(spec), "--out", str(data_dir)])
        main(["train", "--data", str(data_dir), "--config", str(config),
              "--out", str(run_dir)])
        out = tmp_path / "att.json"
        assert main(["attn-diff", "--ckpt", str(run_dir / "final.dckp"),
                     "--data", str(data_dir), "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert [s["channels"] for s in report["stages"]] == [8, 16]
        matrix = (tmp_path / "att.matrix.txt").read_text().splitlines()
        assert len(matrix) == 2
        assert len(matrix[1].split()) == 16

    def test_ablate_writes_reports(self, tmp_path):
        spec, config = self.write_configs(tmp_path)
        out_dir = tmp_path / "ablation"
        assert main(["ablate", "--spec", str(spec), "--config", str(config),
                     "--variants", "source_only", "--seeds", "0",
                     "--out", str(out_dir)]) == 0
        lines = (out_dir / "ablation.csv").read_text().splitlines()
        assert lines[0] == "variant,acc_seed_0,mean_acc"
        assert lines[1].startswith("source_only,")

    def test_unknown_flag_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--bogus", "x"])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_runtime_failure_exits_1(self, tmp_path, capsys):
        missing = tmp_path / "nope.json"
        assert main(["gen-data", "--spec", str(missing),
                     "--out", str(tmp_path / "d")]) == 1
        assert "error:" in capsys.readouterr().err

    def test_unknown_config_field_rejected_by_name(self, tmp_path, capsys):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"num_classes": 2, "bogus_knob": 1}))
        assert main(["gen-data", "--spec", str(spec),
                     "--out", str(tmp_path / "d")]) == 1
        assert "bogus_knob" in capsys.readouterr().err
