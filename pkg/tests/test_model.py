import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedtwin.data import Dataset, SynthConfig, generate_synthetic
from fedtwin.model import (
    ContractError,
    ModelSpec,
    ParameterVector,
    TrainingError,
    TrainSettings,
    fine_tune,
    fine_tune_with_stats,
    forward,
    init_params,
    loss,
    loss_and_grad,
    predict,
    pretrain_base,
)

from oracles import central_difference_grad, forward_loops


def random_params(spec, seed, scale=0.5, frozen=False):
    rng = np.random.default_rng(seed)
    return ParameterVector(rng.normal(0, scale, spec.n_params), spec.layout(), frozen)


def toy_dataset(n=40, d=3, k=2, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, k, n)
    X = rng.normal(size=(n, d)) + y[:, None]
    return Dataset(X, y, tuple(f"c{i}" for i in range(k)))


class TestLayout:
    def test_partition_covers_vector(self):
        spec = ModelSpec(5, 3, 4)
        layout = spec.layout()
        assert layout.base == (0, 3 * 5 + 3)
        assert layout.head == (18, 18 + 4 * 3 + 4)
        assert layout.size == spec.n_params == 34

    def test_length_mismatch_rejected(self):
        spec = ModelSpec(2, 2, 2)
        with pytest.raises(ContractError):
            ParameterVector(np.zeros(spec.n_params + 1), spec.layout())

    def test_non_finite_rejected(self):
        spec = ModelSpec(2, 2, 2)
        values = np.zeros(spec.n_params)
        values[0] = np.nan
        with pytest.raises(ContractError):
            ParameterVector(values, spec.layout())

    def test_values_read_only(self):
        p = init_params(ModelSpec(2, 2, 2), 0)
        with pytest.raises(ValueError):
            p.values[0] = 1.0

    def test_spec_validation(self):
        with pytest.raises(ContractError):
            ModelSpec(2, 2, 1)
        with pytest.raises(ContractError):
            ModelSpec(0, 2, 2)

    def test_init_range_and_zero_head_bias(self):
        spec = ModelSpec(6, 5, 4)
        p = init_params(spec, 3)
        assert np.all(np.abs(p.values) <= 0.05)
        assert np.all(p.values[-4:] == 0.0)
        assert init_params(spec, 3).equals(p)


class TestForward:
    def test_zero_head_gives_uniform(self):
        spec = ModelSpec(3, 4, 4)
        values = random_params(spec, 1).values.copy()
        values[spec.base_size:] = 0.0
        probs = forward(ParameterVector(values, spec.layout()), spec, [0.3, -1.0, 2.0])
        assert probs == pytest.approx([0.25] * 4, abs=1e-15)

    def test_saturation_two_classes(self):
        spec = ModelSpec(1, 1, 2)
        # z = tanh(1 * 1 + 0) ; logits = (0, 800 * z)
        values = np.array([1.0, 0.0, 0.0, 800.0, 0.0, 0.0])
        probs = forward(ParameterVector(values, spec.layout()), spec, [1.0])
        assert probs[0] == pytest.approx(0.0, abs=1e-200)
        assert probs[1] == pytest.approx(1.0, abs=1e-15)
        assert np.all(np.isfinite(probs))

    def test_matches_loop_oracle_seed_42(self):
        spec = ModelSpec(7, 5, 4)
        rng = np.random.default_rng(42)
        params = ParameterVector(rng.normal(0, 1, spec.n_params), spec.layout())
        x = rng.normal(size=7)
        expected = forward_loops(params.values, 7, 5, 4, list(x))
        np.testing.assert_allclose(forward(params, spec, x), expected, rtol=0, atol=1e-12)

    def test_dimension_mismatch(self):
        spec = ModelSpec(3, 2, 2)
        with pytest.raises(ContractError):
            forward(init_params(spec, 0), spec, [1.0, 2.0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-50, 50))
    def test_softmax_normalised(self, seed, shift):
        spec = ModelSpec(4, 3, 5)
        params = random_params(spec, seed, scale=3.0)
        x = np.random.default_rng(seed).normal(size=4) + shift
        p = forward(params, spec, x)
        assert np.all(np.isfinite(p))
        assert np.all((p >= 0) & (p <= 1))
        assert abs(p.sum() - 1.0) <= 1e-9


class TestLoss:
    def test_perfect(self):
        assert loss([0.0, 1.0], 1) == 0.0

    def test_half(self):
        assert loss([0.5, 0.5], 0) == pytest.approx(math.log(2), abs=1e-9)

    def test_floor(self):
        assert loss([1.0, 0.0], 1) == pytest.approx(-math.log(1e-12))

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            loss([0.5, 0.5], 2)


class TestGradient:
    def test_scalar_logistic_step_matches_finite_difference(self):
        # d=1, h=1, k=2: one sample, one SGD step
        spec = ModelSpec(1, 1, 2)
        values = np.array([0.7, -0.2, 0.4, -0.9, 0.1, 0.05])
        params = ParameterVector(values, spec.layout())
        X, y = np.array([[1.3]]), np.array([1])
        fd = central_difference_grad(values, 1, 1, 2, X, y)
        lr = 0.5
        stepped = fine_tune(params, spec, Dataset(X, y, ("a", "b")), TrainSettings(lr, 1, 1, 0))
        expected = values - lr * fd
        rel = np.abs(stepped.values - expected) / np.maximum(np.abs(expected), 1e-12)
        assert rel.max() <= 1e-5

    @pytest.mark.parametrize("seed", range(5))
    def test_full_gradient(self, seed):
        rng = np.random.default_rng(seed)
        spec = ModelSpec(3, 4, 3)
        params = random_params(spec, seed)
        X = rng.normal(size=(6, 3))
        y = rng.integers(0, 3, 6)
        _, grad = loss_and_grad(params, spec, X, y)
        fd = central_difference_grad(params.values, 3, 4, 3, X, y)
        np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-9)

    def test_head_only_leaves_base_gradient_zero(self):
        spec = ModelSpec(3, 4, 3)
        params = random_params(spec, 0)
        X = np.ones((2, 3))
        _, g_head = loss_and_grad(params, spec, X, [0, 1], head_only=True)
        _, g_full = loss_and_grad(params, spec, X, [0, 1])
        assert np.all(g_head[: spec.base_size] == 0)
        np.testing.assert_array_equal(g_head[spec.base_size:], g_full[spec.base_size:])


class TestFineTune:
    def test_zero_learning_rate_is_identity(self):
        spec = ModelSpec(3, 4, 2)
        params = random_params(spec, 1)
        out = fine_tune(params, spec, toy_dataset(), TrainSettings(0.0, 3, 8, 0))
        assert out.equals(params)

    def test_frozen_base_bit_identical(self):
        spec = ModelSpec(3, 4, 2)
        params = random_params(spec, 2, frozen=True)
        out = fine_tune(params, spec, toy_dataset(), TrainSettings(0.3, 5, 4, 9))
        assert out.base.tobytes() == params.base.tobytes()
        assert out.head.tobytes() != params.head.tobytes()
        assert out.frozen_base

    def test_deterministic(self):
        spec = ModelSpec(3, 4, 2)
        params = random_params(spec, 3)
        s = TrainSettings(0.2, 3, 5, 11)
        assert fine_tune(params, spec, toy_dataset(), s).equals(fine_tune(params, spec, toy_dataset(), s))

    def test_seed_changes_batch_order(self):
        spec = ModelSpec(3, 4, 2)
        params = random_params(spec, 3)
        a = fine_tune(params, spec, toy_dataset(), TrainSettings(0.2, 1, 5, 1))
        b = fine_tune(params, spec, toy_dataset(), TrainSettings(0.2, 1, 5, 2))
        assert not a.equals(b)

    def test_loss_decreases_or_flagged(self):
        spec = ModelSpec(3, 4, 2)
        _, stats = fine_tune_with_stats(random_params(spec, 4), spec, toy_dataset(),
                                        TrainSettings(0.1, 10, 8, 0))
        assert stats.improved
        assert stats.loss_after < stats.loss_before
        _, bad = fine_tune_with_stats(random_params(spec, 4), spec, toy_dataset(),
                                      TrainSettings(60.0, 1, 1, 0))
        assert bad.improved == (bad.loss_after <= bad.loss_before)

    def test_empty_dataset(self):
        spec = ModelSpec(3, 4, 2)
        empty = Dataset(np.empty((0, 3)), [], ("a", "b"))
        with pytest.raises(ContractError, match="no local data"):
            fine_tune(init_params(spec, 0), spec, empty, TrainSettings())

    def test_batch_clamped_with_warning(self):
        spec = ModelSpec(3, 4, 2)
        data = toy_dataset(n=5)
        with pytest.warns(UserWarning, match="clamped"):
            fine_tune(init_params(spec, 0), spec, data, TrainSettings(0.1, 1, 64, 0))

    def test_divergence_raises_with_context(self):
        spec = ModelSpec(3, 4, 2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            with pytest.raises(TrainingError, match=r"epoch 0, batch \d+"):
                fine_tune(random_params(spec, 0), spec, toy_dataset(), TrainSettings(1e308, 1, 4, 0))

    def test_nan_features_raise(self):
        spec = ModelSpec(1, 1, 2)
        data = Dataset([[np.nan], [1.0]], [0, 1], ("a", "b"))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            with pytest.raises(TrainingError, match="non-finite"):
                fine_tune(init_params(spec, 0), spec, data, TrainSettings(0.1, 1, 2, 0))


class TestPretrain:
    def source(self, seed=5):
        return generate_synthetic(SynthConfig(class_counts=(60, 60, 60), input_dim=4, seed=seed))

    def test_frozen_flag_and_fresh_head(self):
        spec = ModelSpec(4, 6, 2)
        p = pretrain_base(spec, self.source(), TrainSettings(0.1, 3, 16, 0))
        assert p.frozen_base
        assert np.all(np.abs(p.head) <= 0.05)
        assert np.all(p.head[-2:] == 0)

    def test_deterministic_base(self):
        spec = ModelSpec(4, 6, 2)
        s = TrainSettings(0.1, 3, 16, 0)
        assert pretrain_base(spec, self.source(), s).equals(pretrain_base(spec, self.source(), s))

    def test_head_only_finetune_separable(self):
        # source: 3 blobs; target: 2 well separated blobs on the same geometry
        spec = ModelSpec(4, 6, 2)
        pre = pretrain_base(spec, self.source(), TrainSettings(0.1, 20, 16, 0))
        target = generate_synthetic(SynthConfig(class_counts=(40, 40), input_dim=4,
                                                class_separation=8.0, noise_std=0.5, seed=1))
        tuned = fine_tune(pre, spec, target, TrainSettings(0.1, 200, 16, 0))
        acc = np.mean(predict(tuned, spec, target.X) == target.y)
        assert acc >= 0.95
        assert tuned.base.tobytes() == pre.base.tobytes()
