import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from admtl.loss import LossConfig, LossConfigError, mse_global, mse_subscores, total_loss


def random_batch(rng, n=None):
    n = n or rng.integers(1, 65)
    predictions = rng.normal(scale=5.0, size=(n, 14))
    targets = rng.normal(scale=5.0, size=(n, 14))
    return predictions, targets


def loop_mse_global(predictions, targets):
    n = predictions.shape[0]
    return sum((targets[i, 0] - predictions[i, 0]) ** 2 for i in range(n)) / n


def loop_mse_subscores(predictions, targets):
    n = predictions.shape[0]
    total = 0.0
    for j in range(1, 14):
        total += sum((targets[i, j] - predictions[i, j]) ** 2 for i in range(n)) / n
    return total / 13


def test_zero_when_equal():
    rng = np.random.default_rng(0)
    predictions, _ = random_batch(rng)
    assert float(mse_global(predictions, predictions)) == 0.0
    assert float(mse_subscores(predictions, predictions)) == 0.0
    assert float(total_loss(predictions, predictions)) == 0.0


def test_global_hand_case():
    predictions = np.zeros((2, 14))
    targets = np.zeros((2, 14))
    predictions[0, 0], predictions[1, 0] = 1.0, -1.0
    assert float(mse_global(predictions, targets)) == pytest.approx(1.0)


def test_subscore_hand_case():
    predictions = np.zeros((3, 14))
    targets = np.zeros((3, 14))
    predictions[:, 5] = 1.0  # one sub-score off by 1 for every sample
    assert float(mse_subscores(predictions, targets)) == pytest.approx(1.0 / 13.0)


def test_total_loss_combination():
    # alpha=0.5 with mse_global=2, mse_subscores=4 -> 3
    predictions = np.zeros((1, 14))
    targets = np.zeros((1, 14))
    targets[0, 0] = np.sqrt(2.0)
    targets[0, 1:] = np.sqrt(4.0 * 13.0 / 13.0)  # each item err^2 = 4 -> mean 4
    assert float(mse_global(predictions, targets)) == pytest.approx(2.0)
    assert float(mse_subscores(predictions, targets)) == pytest.approx(4.0)
    assert float(total_loss(predictions, targets, LossConfig(alpha=0.5))) == pytest.approx(3.0)


def test_alpha_boundaries():
    rng = np.random.default_rng(1)
    predictions, targets = random_batch(rng)
    assert float(total_loss(predictions, targets, LossConfig(alpha=1.0))) == float(
        mse_subscores(predictions, targets)
    )
    assert float(total_loss(predictions, targets, LossConfig(alpha=0.0))) == float(
        mse_global(predictions, targets)
    )


def test_alpha_range_validation():
    with pytest.raises(LossConfigError):
        LossConfig(alpha=1.5)
    with pytest.raises(LossConfigError):
        LossConfig(alpha=-0.1)


def test_oracle_equivalence():
    rng = np.random.default_rng(2)
    for _ in range(20):
        predictions, targets = random_batch(rng)
        assert float(mse_global(predictions, targets)) == pytest.approx(
            loop_mse_global(predictions, targets), rel=1e-9
        )
        assert float(mse_subscores(predictions, targets)) == pytest.approx(
            loop_mse_subscores(predictions, targets), rel=1e-9
        )


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_affine_in_alpha(seed):
    rng = np.random.default_rng(seed)
    predictions, targets = random_batch(rng)
    alphas = [0.0, 0.25, 0.5, 0.75, 1.0]
    values = [
        float(total_loss(predictions, targets, LossConfig(alpha=a))) for a in alphas
    ]
    # affine: second differences vanish
    diffs = np.diff(values)
    assert np.allclose(diffs, diffs[0], rtol=1e-9, atol=1e-12)


def test_non_negative_and_zero_iff_equal():
    rng = np.random.default_rng(3)
    predictions, targets = random_batch(rng)
    assert float(total_loss(predictions, targets)) > 0
    assert float(total_loss(targets, targets)) == 0.0


def test_permutation_invariance():
    rng = np.random.default_rng(4)
    predictions, targets = random_batch(rng, n=32)
    perm = rng.permutation(32)
    for fn in (mse_global, mse_subscores, total_loss):
        assert float(fn(predictions, targets)) == pytest.approx(
            float(fn(predictions[perm], targets[perm])), abs=1e-12
        )


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    predictions, targets = random_batch(rng, n=6)
    pred_t = torch.tensor(predictions, requires_grad=True)
    loss = total_loss(pred_t, torch.tensor(targets))
    loss.backward()
    analytic = pred_t.grad.numpy()
    step = 1e-4
    for _ in range(10):
        i = rng.integers(predictions.shape[0])
        j = rng.integers(14)
        plus = predictions.copy()
        minus = predictions.copy()
        plus[i, j] += step
        minus[i, j] -= step
        numeric = (
            float(total_loss(plus, targets)) - float(total_loss(minus, targets))
        ) / (2 * step)
        assert numeric == pytest.approx(analytic[i, j], rel=1e-3, abs=1e-8)


def test_empty_batch_rejected():
    with pytest.raises(ValueError, match="empty|shape"):
        mse_global(np.zeros((0, 14)), np.zeros((0, 14)))


def test_subscore_weights_validation():
    with pytest.raises(LossConfigError):
        LossConfig(subscore_weights=[1.0] * 12)
    uniform = LossConfig(subscore_weights=[1.0] * 13)
    rng = np.random.default_rng(6)
    predictions, targets = random_batch(rng)
    assert float(total_loss(predictions, targets, uniform)) == pytest.approx(
        float(total_loss(predictions, targets, LossConfig())), rel=1e-12
    )
