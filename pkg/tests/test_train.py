import numpy as np
import pytest

from dcan import tensor as T
from dcan.analysis import model_rng
from dcan.data import DomainShiftSpec, generate_domain_pair
from dcan.losses import LossWeights
from dcan.model import ModelConfig, Variant, build, step_losses
from dcan.tensor import Tensor
from dcan.train import (OptimizerState, TrainConfig, TrainingDiverged, evaluate,
                        load_checkpoint_into, load_model_from_checkpoint, lr_at,
                        metrics_csv_text, save_checkpoint, sgd_step, train)


def tiny_spec(**overrides):
    base = dict(num_classes=2, samples_per_class_train=8, samples_per_class_test=6,
                height=16, width=16, seed=21)
    base.update(overrides)
    return DomainShiftSpec(**base)


def tiny_model_config():
    return ModelConfig(num_classes=2, input_shape=(3, 16, 16), stage_widths=(8, 16),
                       blocks_per_stage=1)


def tiny_train_config(**overrides):
    base = dict(total_steps=6, batch_size=8, eval_interval=3, seed=5)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_pair():
    return generate_domain_pair(tiny_spec())


class TestLearningRate:
    CFG = TrainConfig()

    def test_schedule_start(self):
        rates = lr_at(0.0, self.CFG)
        assert rates["backbone"] == pytest.approx(0.01)
        assert rates["classifier"] == pytest.approx(0.1)
        assert rates["correction"] == pytest.approx(0.001)

    def test_schedule_end_value(self):
        rates = lr_at(1.0, self.CFG)
        assert rates["backbone"] == pytest.approx(0.01 * 11 ** -0.75, rel=1e-12)
        assert rates["backbone"] == pytest.approx(0.0016556, rel=1e-3)

    def test_monotone_decrease(self):
        points = np.linspace(0, 1, 25)
        values = [lr_at(p, self.CFG)["backbone"] for p in points]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_group_ratio_constant(self):
        for p in (0.0, 0.31, 0.77, 1.0):
            rates = lr_at(p, self.CFG)
            assert rates["classifier"] / rates["backbone"] == pytest.approx(10.0)
            assert rates["correction"] / rates["backbone"] == pytest.approx(0.1)

    def test_out_of_range_progress_rejected(self):
        with pytest.raises(ValueError, match="progress"):
            lr_at(1.5, self.CFG)


class TestSgdStep:
    def make_group(self, value):
        p = Tensor(np.array([value, value]), requires_grad=True)
        groups = [("p", p, "backbone")]
        return p, groups, OptimizerState(groups)

    def test_zero_gradients_leave_parameters(self):
        p, groups, state = self.make_group(1.0)
        sgd_step(groups, state, {"backbone": 0.1}, momentum=0.9)
        np.testing.assert_array_equal(p.data, [1.0, 1.0])

    def test_single_step_from_zero_state(self):
        p, groups, state = self.make_group(1.0)
        p.grad = np.array([0.5, -0.25])
        sgd_step(groups, state, {"backbone": 0.1}, momentum=0.9)
        np.testing.assert_allclose(p.data, [1.0 - 0.05, 1.0 + 0.025])

    def test_two_steps_constant_gradient_closed_form(self):
        p, groups, state = self.make_group(0.0)
        g = np.array([1.0, 2.0])
        for _ in range(2):
            p.grad = g.copy()
            sgd_step(groups, state, {"backbone": 0.1}, momentum=0.9)
        # displacement = lr*g*(1) + lr*(m*g + g) = lr*g*(2 + m)
        np.testing.assert_allclose(p.data, -0.1 * g * 2.9)

    def test_buffer_shape_mismatch_rejected(self):
        p, groups, state = self.make_group(0.0)
        p.grad = np.zeros(3)
        with pytest.raises(ValueError, match="shape"):
            sgd_step(groups, state, {"backbone": 0.1}, momentum=0.9)


class TestTrainLoop:
    def test_single_step_matches_hand_stepped_oracle(self, tiny_pair):
        config = tiny_train_config(total_steps=1, eval_interval=1)
        model = build(tiny_model_config(), Variant.FULL, model_rng(0))
        reference = build(tiny_model_config(), Variant.FULL, model_rng(0))
        train(model, tiny_pair, config)

        # replay the same step by hand on the reference copy
        from dcan.data import BatchStream
        from dcan.losses import KernelConfig
        from dcan.train import _SALT_SOURCE, _SALT_TARGET, _stream_seed
        pair = tiny_pair.for_training()
        src = BatchStream(len(pair.source_train), config.batch_size,
                          _stream_seed(config.seed, _SALT_SOURCE)).indices_at(0)
        tgt = BatchStream(len(pair.target_train), config.batch_size,
                          _stream_seed(config.seed, _SALT_TARGET)).indices_at(0)
        groups = reference.parameter_groups()
        state = OptimizerState(groups)
        bd = step_losses(reference,
                         Tensor(pair.source_train.images[src]),
                         pair.source_train.labels[src],
                         Tensor(pair.target_train.images[tgt]),
                         config.weights, KernelConfig(),
                         rng_seed=config.seed, step=0)
        T.backward(bd.total)
        sgd_step(groups, state, lr_at(0.0, config), config.momentum)

        trained = {n: p.data for n, p, _ in model.parameter_groups()}
        replayed = {n: p.data for n, p, _ in reference.parameter_groups()}
        for name in trained:
            np.testing.assert_array_equal(trained[name], replayed[name])

    def test_identical_runs_identical_metrics(self, tiny_pair):
        outs = []
        for _ in range(2):
            model = build(tiny_model_config(), Variant.FULL, model_rng(1))
            res = train(model, tiny_pair, tiny_train_config())
            outs.append(metrics_csv_text(res.metrics))
        assert outs[0] == outs[1]

    def test_source_only_columns_zero(self, tiny_pair):
        model = build(tiny_model_config(), Variant.SOURCE_ONLY, model_rng(2))
        res = train(model, tiny_pair, tiny_train_config())
        for row in res.metrics:
            for key in ("L_M1", "L_reg1", "L_M2", "L_reg2", "L_e"):
                assert row.losses[key] == 0.0
            assert row.losses["total"] == row.losses["L_s"]

    def test_non_finite_loss_aborts_with_step(self, tiny_pair, monkeypatch):
        import importlib
        train_mod = importlib.import_module("dcan.train")
        real = train_mod.step_losses
        calls = {"n": 0}

        def poisoned(*args, **kwargs):
            bd = real(*args, **kwargs)
            if calls["n"] == 3:
                bd.l_s.data = np.array(np.inf)
            calls["n"] += 1
            return bd

        monkeypatch.setattr(train_mod, "step_losses", poisoned)
        model = build(tiny_model_config(), Variant.FULL, model_rng(3))
        with pytest.raises(TrainingDiverged, match="step 3") as exc:
            train(model, tiny_pair, tiny_train_config())
        assert exc.value.step == 3
        assert "L_s" in exc.value.components

    def test_frozen_norm_statistics_unchanged(self, tiny_pair):
        model = build(tiny_model_config(), Variant.FULL, model_rng(4))
        before = {n: a.copy() for n, a in model.frozen_state_arrays()}
        train(model, tiny_pair, tiny_train_config())
        for n, a in model.frozen_state_arrays():
            np.testing.assert_array_equal(a, before[n])


class TestEvaluate:
    def test_untrained_model_near_chance(self, tiny_pair):
        accs = []
        for seed in range(3):
            model = build(tiny_model_config(), Variant.FULL, model_rng(seed + 10))
            accs.append(evaluate(model, tiny_pair.target_test, "target"))
        assert abs(np.mean(accs) - 0.5) <= 0.25

    def test_does_not_mutate_parameters(self, tiny_pair):
        model = build(tiny_model_config(), Variant.FULL, model_rng(20))
        before = {n: p.data.tobytes() for n, p, _ in model.parameter_groups()}
        evaluate(model, tiny_pair.source_test, "source")
        after = {n: p.data.tobytes() for n, p, _ in model.parameter_groups()}
        assert before == after

    def test_unlabeled_split_rejected(self, tiny_pair):
        model = build(tiny_model_config(), Variant.FULL, model_rng(21))
        with pytest.raises(ValueError, match="unlabeled"):
            evaluate(model, tiny_pair.target_train.without_labels(), "target")


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tiny_pair, tmp_path):
        model = build(tiny_model_config(), Variant.FULL, model_rng(30))
        res = train(model, tiny_pair, tiny_train_config(total_steps=2))
        p1, p2 = tmp_path / "a.dckp", tmp_path / "b.dckp"
        save_checkpoint(p1, model, res.optimizer, 2)
        fresh = build(tiny_model_config(), Variant.FULL, model_rng(31))
        state = OptimizerState(fresh.parameter_groups())
        step = load_checkpoint_into(p1, fresh, state)
        assert step == 2
        save_checkpoint(p2, fresh, state, step)
        assert p1.read_bytes() == p2.read_bytes()

    def test_resume_matches_uninterrupted_run(self, tiny_pair, tmp_path):
        config = tiny_train_config(total_steps=8, eval_interval=2, seed=9)

        model_full = build(tiny_model_config(), Variant.FULL, model_rng(40))
        full = train(model_full, tiny_pair, config)

        # the same configured run interrupted at its midpoint
        model_half = build(tiny_model_config(), Variant.FULL, model_rng(40))
        half = train(model_half, tiny_pair, config, stop_at_step=4)
        ckpt = tmp_path / "mid.dckp"
        save_checkpoint(ckpt, model_half, half.optimizer, half.final_step)

        model_resume = build(tiny_model_config(), Variant.FULL, model_rng(41))
        resumed = train(model_resume, tiny_pair, config, resume_from=ckpt)

        full_rows = metrics_csv_text(full.metrics).splitlines()
        resumed_rows = metrics_csv_text(resumed.metrics).splitlines()
        # rows for steps > 4 must match the uninterrupted run bit for bit
        assert full_rows[-2:] == resumed_rows[-2:]
        final_full = {n: p.data.tobytes() for n, p, _ in
                      model_full.parameter_groups()}
        final_res = {n: p.data.tobytes() for n, p, _ in
                     model_resume.parameter_groups()}
        assert final_full == final_res

    def test_config_mismatch_rejected_naming_field(self, tiny_pair, tmp_path):
        model = build(tiny_model_config(), Variant.FULL, model_rng(50))
        state = OptimizerState(model.parameter_groups())
        ckpt = tmp_path / "m.dckp"
        save_checkpoint(ckpt, model, state, 0)
        other_cfg = ModelConfig(num_classes=2, input_shape=(3, 16, 16),
                                stage_widths=(8, 32), blocks_per_stage=1)
        other = build(other_cfg, Variant.FULL, model_rng(51))
        with pytest.raises(ValueError, match="stage_widths"):
            load_checkpoint_into(ckpt, other, OptimizerState(other.parameter_groups()))

    def test_variant_mismatch_rejected(self, tiny_pair, tmp_path):
        model = build(tiny_model_config(), Variant.FULL, model_rng(52))
        state = OptimizerState(model.parameter_groups())
        ckpt = tmp_path / "v.dckp"
        save_checkpoint(ckpt, model, state, 0)
        other = build(tiny_model_config(), Variant.NO_CA, model_rng(53))
        with pytest.raises(ValueError, match="variant"):
            load_checkpoint_into(ckpt, other, OptimizerState(other.parameter_groups()))

    def test_rebuild_model_from_checkpoint(self, tiny_pair, tmp_path):
        model = build(tiny_model_config(), Variant.NO_CA, model_rng(54))
        res = train(model, tiny_pair, tiny_train_config(total_steps=2))
        ckpt = tmp_path / "r.dckp"
        save_checkpoint(ckpt, model, res.optimizer, 2)
        loaded, step = load_model_from_checkpoint(ckpt)
        assert step == 2
        assert loaded.variant == Variant.NO_CA
        got = {n: p.data.tobytes() for n, p, _ in loaded.parameter_groups()}
        want = {n: p.data.tobytes() for n, p, _ in model.parameter_groups()}
        assert got == want


class TestRunOutputs:
    def test_out_dir_artifacts(self, tiny_pair, tmp_path):
        model = build(tiny_model_config(), Variant.FULL, model_rng(60))
        train(model, tiny_pair, tiny_train_config(), out_dir=tmp_path / "run")
        names = {p.name for p in (tmp_path / "run").iterdir()}
        assert {"metrics.csv", "summary.json", "final.dckp", "timing.log"} <= names
        header = (tmp_path / "run" / "metrics.csv").read_text().splitlines()[0]
        assert header == "step,L_s,L_M1,L_reg1,L_M2,L_reg2,L_e,total,src_acc,tgt_acc"
        import json
        summary = json.loads((tmp_path / "run" / "summary.json").read_text())
        assert summary["variant"] == "full"
        assert "wall" not in (tmp_path / "run" / "summary.json").read_text()
