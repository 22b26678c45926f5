import csv
import math

import numpy as np
import pytest

from jointdefer.dataset import Example, FeaturizedSet, SyntheticConfig, gen_synthetic
from jointdefer.errors import ConfigurationError, StateError, TrainingDivergenceError
from jointdefer.model import CL_PARAM_NAMES, DP_PARAM_NAMES, Checkpoint, JointModel, decide, predict
from jointdefer.numerics import RandomStream, finite_diff_gradient, relative_error
from jointdefer.reward import DEFAULT_SIGNAL, RewardSignal
from jointdefer.training import (LOG_HEADER, LOSS_PRESETS, LossWeights, TrainConfig, Trainer, batch_objective,
                                 dp_labels, joint_loss, select_checkpoint, write_epoch_log)
from jointdefer.evaluation.metrics import compute_metrics


def _fset(X, y, qids=None):
    qids = qids or ["q"] * len(y)
    examples = [Example(q, f"x{i}", int(c)) for i, (q, c) in enumerate(zip(qids, y))]
    return FeaturizedSet(examples, np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.int64))


def toy():
    """12 points, 3 linearly separable classes."""
    rng = np.random.default_rng(0)
    centers = np.eye(3, 4) * 3
    X = np.concatenate([c + 0.1 * rng.normal(size=(4, 4)) for c in centers])
    return _fset(X, np.repeat([0, 1, 2], 4))


def small_synthetic(noise, per_q=120, h=9):
    cfg = SyntheticConfig(num_questions=len(noise), examples_per_question=per_q, per_question_noise=noise, seed=3)
    return FeaturizedSet.build(gen_synthetic(cfg), h)


def snap(model, names):
    return {n: model.params()[n].copy() for n in names}


def assert_same(model, saved):
    for n, v in saved.items():
        np.testing.assert_array_equal(model.params()[n], v, err_msg=n)


class TestLossWeights:
    def test_presets(self):
        assert LOSS_PRESETS["beetle"] == (0.01, 0.01, 15)
        assert LossWeights.from_value("SciEntS").as_list() == [0.1, 0.1, 10]
        assert LossWeights.from_value([1, 1, 1]) == LossWeights()
        assert LossWeights.from_value({"alpha": 2, "beta": 0, "gamma": 0}).alpha == 2

    @pytest.mark.parametrize("bad", [[0, 0, 0], [-1, 1, 1], [1, 1], "nope", [1, math.nan, 1]])
    def test_invalid(self, bad):
        with pytest.raises(ConfigurationError):
            LossWeights.from_value(bad)


class TestTrainConfig:
    def test_round_trip(self):
        cfg = TrainConfig(n_warmup_cl=2, loss_weights=LossWeights(0.1, 0.1, 10), reward=RewardSignal(0.7, 0, 0, 0.3))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("field,value", [("T", -1), ("batch_size", 0), ("lr", 0.0), ("dp_label_holdout", 1.0)])
    def test_invalid(self, field, value):
        with pytest.raises(ConfigurationError):
            TrainConfig(**{field: value}).validate()

    def test_unknown_field(self):
        with pytest.raises(ConfigurationError, match="unknown"):
            TrainConfig.from_dict({"epochs": 3})


class TestObjective:
    def test_joint_loss_arithmetic(self):
        # a signal whose expected reward at p_d = [0.5, 0.5] on a correct example is 0.42
        A = RewardSignal(0.74, 0.10, 0.0, 0.16)
        L = joint_loss([1 / 3] * 3, [0], [0.5, 0.5], [0], [True], LossWeights(1, 1, 1), A)
        assert L == pytest.approx(math.log(3) + math.log(2) - 0.42, abs=1e-12)
        # the listed 1.3717 adds the components after rounding them to 4 places
        assert L == pytest.approx(1.3717, abs=1e-4)

    def test_reward_only(self):
        L = joint_loss([0.2, 0.5, 0.3], [1], [0.8, 0.2], [0], [True], LossWeights(0, 0, 1), DEFAULT_SIGNAL)
        assert L == pytest.approx(-0.42, abs=1e-12)

    def test_gamma_zero_is_cross_entropy_only(self):
        args = ([0.2, 0.5, 0.3], [1], [0.8, 0.2], [0], [True])
        a = joint_loss(*args, LossWeights(1, 1, 0), DEFAULT_SIGNAL)
        b = joint_loss(*args, LossWeights(1, 1, 0), RewardSignal(0, 0, 0, 1))
        assert a == b == pytest.approx(-math.log(0.5) - math.log(0.8), abs=1e-12)

    def test_batch_gradient_matches_finite_differences(self):
        model = JointModel.init(2, 8, 5, 4)
        X = RandomStream(5).uniform(-1, 1, (4, 8))
        y = np.array([0, 2, 1, 1])
        w = LossWeights(1.0, 1.0, 1.0)
        res = batch_objective(model, X, y, w, DEFAULT_SIGNAL)
        correct_before = predict(model.cl.forward(X)[1]) == y
        for name, param in model.params().items():
            def f(v, param=param):
                saved = param.copy()
                param[...] = v
                out = batch_objective(model, X, y, w, DEFAULT_SIGNAL).loss
                param[...] = saved
                return out
            numeric = finite_diff_gradient(f, param.copy())
            assert np.mean(relative_error(res.grads[name], numeric) < 1e-4) >= 0.99, name
        assert np.array_equal(predict(model.cl.forward(X)[1]) == y, correct_before)

    def test_reward_can_be_kept_out_of_classifier(self):
        model = JointModel.init(2, 8, 5, 4)
        X = RandomStream(5).uniform(-1, 1, (6, 8))
        y = np.array([0, 2, 1, 1, 0, 2])
        off = batch_objective(model, X, y, LossWeights(1, 1, 5), DEFAULT_SIGNAL, reward_into_cl=False)
        ce_only = batch_objective(model, X, y, LossWeights(1, 1, 0), DEFAULT_SIGNAL)
        on = batch_objective(model, X, y, LossWeights(1, 1, 5), DEFAULT_SIGNAL)
        for n in CL_PARAM_NAMES:
            np.testing.assert_allclose(off.grads[n], ce_only.grads[n], atol=1e-15)
        assert not np.allclose(on.grads["cl.enc.W"], ce_only.grads["cl.enc.W"])

    def test_frozen_names_have_no_gradient(self):
        model = JointModel.init(2, 8, 5, 4)
        X = RandomStream(5).uniform(-1, 1, (3, 8))
        res = batch_objective(model, X, np.array([0, 1, 2]), LossWeights(), DEFAULT_SIGNAL, frozen=set(CL_PARAM_NAMES))
        assert set(res.grads) == set(DP_PARAM_NAMES)


class TestDeferralLabels:
    def test_all_correct(self):
        data = toy()
        model = JointModel.init(0, 4, 8, 4)
        Trainer(model, TrainConfig(seed=0, lr=0.05, batch_size=4), data).warmup_cl(50)
        assert not dp_labels(model.cl, data.X, data.y).any()

    def test_constant_classifier(self):
        model = JointModel.init(0, 4, 8, 4)
        model.cl.head.W[...] = 0.0
        model.cl.head.b[...] = [1.0, 0.0, 0.0]
        y = np.array([0] * 4 + [1] * 3 + [2] * 3)
        X = np.random.default_rng(1).normal(size=(10, 4))
        labels = dp_labels(model.cl, X, y)
        assert labels.mean() == pytest.approx(0.6)
        preds = predict(model.cl.forward(X)[1])
        m = compute_metrics(preds, y, labels)
        assert m.sp_acc == 1.0 and m.dp_acc == 1.0


class TestTrainer:
    def test_toy_reaches_full_accuracy(self):
        data = toy()
        model = JointModel.init(0, 4, 8, 4)
        records = Trainer(model, TrainConfig(seed=0, lr=0.05, batch_size=4), data).warmup_cl(50)
        assert len(records) == 50
        assert np.mean(predict(model.cl.forward(data.X)[1]) == data.y) == 1.0

    def test_zero_epochs_change_nothing(self):
        data = toy()
        model = JointModel.init(0, 4, 8, 4)
        before = model.snapshot()
        trainer = Trainer(model, TrainConfig(seed=0), data)
        assert trainer.warmup_cl(0) == []
        assert_same(model, before)
        trainer.cl_epochs = 1  # pretend a warmup happened so the DP phase may start
        assert trainer.warmup_dp(0) == []
        assert trainer.joint_train(0) == []
        assert_same(model, before)

    def test_phase_preconditions(self):
        trainer = Trainer(JointModel.init(0, 4, 8, 4), TrainConfig(seed=0), toy())
        with pytest.raises(StateError):
            trainer.warmup_dp(1)
        with pytest.raises(StateError):
            trainer.joint_train(1)
        trainer.warmup_cl(1)
        with pytest.raises(StateError):
            trainer.joint_train(1)

    def test_freeze_contract(self):
        data = small_synthetic([0.0, 0.3], per_q=40)
        model = JointModel.init(1, data.X.shape[1], 8, 4)
        trainer = Trainer(model, TrainConfig(seed=1, lr=0.01), data)
        dp_before = snap(model, DP_PARAM_NAMES)
        trainer.warmup_cl(3)
        assert_same(model, dp_before)
        cl_before = snap(model, CL_PARAM_NAMES)
        trainer.warmup_dp(3)
        assert_same(model, cl_before)
        assert any(not np.array_equal(model.params()[n], dp_before[n]) for n in DP_PARAM_NAMES)

    def test_run_phases_and_selection(self, tmp_path):
        data = small_synthetic([0.0, 0.2, 0.4], per_q=40)
        val = small_synthetic([0.0, 0.2, 0.4], per_q=15)
        cfg = TrainConfig(n_warmup_cl=2, m_warmup_dp=3, T=4, seed=4, lr=0.01, checkpoint_dir=str(tmp_path))
        result = Trainer(JointModel.init(4, data.X.shape[1], 8, 4), cfg, data, val).run()
        assert [r.phase for r in result.records] == ["cl_warmup"] * 2 + ["dp_warmup"] * 3 + ["joint"] * 4
        assert [c.epoch for c in result.checkpoints] == [1, 2, 3, 4]
        assert sorted(p.name for p in tmp_path.iterdir()) == [f"joint_epoch00{i}.ckpt" for i in range(1, 5)]
        assert result.selected is select_checkpoint(result.checkpoints)
        for name, arr in result.model.params().items():
            np.testing.assert_array_equal(arr, result.selected.model.params()[name])
        for r in result.records:
            w = r.weights
            assert r.loss == pytest.approx(w.alpha * r.ce_cl + w.beta * r.ce_dp - w.gamma * r.reward, abs=1e-12)

    def test_no_joint_phase_selects_end_of_warmup(self):
        data = small_synthetic([0.0, 0.2], per_q=30)
        cfg = TrainConfig(n_warmup_cl=1, m_warmup_dp=1, T=0, seed=0)
        result = Trainer(JointModel.init(0, data.X.shape[1], 8, 4), cfg, data, data).run()
        assert result.checkpoints == [] and result.selected is result.end_of_warmup

    def test_deterministic(self):
        data = small_synthetic([0.0, 0.3], per_q=40)
        cfg = TrainConfig(n_warmup_cl=2, m_warmup_dp=2, T=2, seed=9)
        runs = [Trainer(JointModel.init(9, data.X.shape[1], 8, 4), cfg, data, data).run() for _ in range(2)]
        for name in runs[0].model.params():
            np.testing.assert_array_equal(runs[0].model.params()[name], runs[1].model.params()[name])
        assert [r.loss for r in runs[0].records] == [r.loss for r in runs[1].records]

    def test_divergence_is_reported(self):
        data = small_synthetic([0.0, 0.1], per_q=30)
        cfg = TrainConfig(n_warmup_cl=2, m_warmup_dp=1, T=1, seed=0, lr=1e308)
        with pytest.raises(TrainingDivergenceError) as info:
            Trainer(JointModel.init(0, data.X.shape[1], 8, 4), cfg, data).run()
        assert info.value.last_good is None

    def test_holdout_rows_are_disjoint(self):
        data = small_synthetic([0.0, 0.3], per_q=50)
        trainer = Trainer(JointModel.init(0, data.X.shape[1], 8, 4), TrainConfig(dp_label_holdout=0.25), data)
        cl_rows, dp_rows = trainer._partition()
        assert len(dp_rows) == 25 and not set(cl_rows) & set(dp_rows)
        assert len(cl_rows) + len(dp_rows) == 100

    def test_cl_loss_decreases_on_default_corpus(self):
        data = FeaturizedSet.build(gen_synthetic(SyntheticConfig()), 10)
        model = JointModel.init(7, data.X.shape[1])
        records = Trainer(model, TrainConfig(), data).warmup_cl()
        assert records[-1].loss <= records[0].loss

    def test_policy_defers_more_on_noisy_question(self):
        data = small_synthetic([0.0, 0.0, 0.0, 0.5], per_q=150)
        model = JointModel.init(0, data.X.shape[1], 32, 16)
        trainer = Trainer(model, TrainConfig(seed=0, lr=5e-3), data)
        trainer.warmup_cl(10)
        trainer.warmup_dp(20)
        rates = decide(model.forward(data.X)[1]).reshape(4, 150).mean(axis=1)
        assert rates[3] > rates[:3].max()


@pytest.mark.slow
def test_joint_phase_keeps_validation_accuracy():
    """Selected joint checkpoint versus the end of warmup, default corpus."""
    from jointdefer.dataset import split
    from jointdefer.pipeline import ExperimentData

    kept = 0
    for seed in (1, 2, 3, 4, 5):
        data = ExperimentData.from_split(split(gen_synthetic(SyntheticConfig(seed=seed)), seed=seed), 10)
        result = Trainer(JointModel.init(seed, data.feature_dim), TrainConfig(seed=seed), data.train,
                         data.validation).run()
        kept += result.selected.metrics["sp_acc"] >= result.end_of_warmup.metrics["sp_acc"]
    assert kept >= 4


class TestSelectCheckpoint:
    def _ck(self, sp, dr, epoch):
        return Checkpoint(None, "joint", epoch, {"sp_acc": sp, "deferral_rate": dr})

    def test_single(self):
        ck = self._ck(0.5, 0.1, 1)
        assert select_checkpoint([ck]) is ck

    def test_higher_sp(self):
        assert select_checkpoint([self._ck(0.80, 0.0, 1), self._ck(0.85, 0.3, 2)]).epoch == 2

    def test_lower_deferral_breaks_ties(self):
        assert select_checkpoint([self._ck(0.8, 0.10, 1), self._ck(0.8, 0.05, 2)]).epoch == 2

    def test_earlier_epoch_breaks_remaining_ties(self):
        assert select_checkpoint([self._ck(0.8, 0.1, 3), self._ck(0.8, 0.1, 2)]).epoch == 2

    def test_empty(self):
        with pytest.raises(Exception):
            select_checkpoint([])


def test_epoch_log(tmp_path):
    data = small_synthetic([0.0, 0.2], per_q=20)
    cfg = TrainConfig(n_warmup_cl=1, m_warmup_dp=1, T=1, seed=0)
    result = Trainer(JointModel.init(0, data.X.shape[1], 8, 4), cfg, data, data).run()
    write_epoch_log(result.records, tmp_path / "log.csv")
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert tuple(rows[0]) == LOG_HEADER
    assert [r[1] for r in rows[1:]] == ["cl_warmup", "dp_warmup", "joint"]
    assert all(r[-1] != "" for r in rows[1:])
