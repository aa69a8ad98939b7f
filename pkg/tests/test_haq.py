import numpy as np
import pytest

from biquant import autodiff as ad
from biquant.errors import ContractError, InfeasibleError
from biquant.haq import (
    AllocationProblem,
    channel_importance,
    enumerate_oracle,
    layer_score,
    loss_hor,
    optimize_allocation,
    read_assignment,
)


def test_channel_importance_example():
    np.testing.assert_array_equal(channel_importance([[[3.0, 4.0], [0.0, 0.0]]]), [3.0, 4.0])


def test_channel_importance_zero_and_duplicates(rng):
    np.testing.assert_array_equal(channel_importance(np.zeros((3, 2, 5))), np.zeros(5))
    X = rng.normal(size=(4, 3, 6))
    np.testing.assert_allclose(channel_importance(np.concatenate([X, X])), channel_importance(X), rtol=1e-15)


def test_channel_importance_empty_batch():
    with pytest.raises(ContractError):
        channel_importance(np.zeros((0, 2, 3)))


@pytest.mark.parametrize(
    "W, A, S",
    [(np.eye(2), [1.0, 1.0], 0.5), ([[1.0, -2.0], [0.0, 1.0]], [3.0, 4.0], 3.75), (np.zeros((2, 3)), [1.0, 2.0, 3.0], 0.0)],
)
def test_layer_score_examples(W, A, S):
    assert layer_score(W, A) == S


def test_layer_score_shape_mismatch():
    with pytest.raises(ContractError):
        layer_score(np.eye(2), [1.0, 2.0, 3.0])


def test_loss_hor_examples():
    single = AllocationProblem([1.0], [1], B_avg=4)
    assert loss_hor(single, np.array([4.0])).item() == 0.0625
    two = AllocationProblem([1.0, 0.5], [100, 100], B_avg=6)
    good = loss_hor(two, np.array([8.0, 4.0])).item()
    bad = loss_hor(two, np.array([4.0, 8.0])).item()
    assert good == pytest.approx(2**-8 + 0.5 * 2**-4, abs=1e-15)
    assert bad == pytest.approx(2**-4 + 0.5 * 2**-8, abs=1e-15)
    assert bad > good


def test_loss_hor_penalizes_overspend():
    p = AllocationProblem([1.0, 1.0], [1, 1], B_avg=5, lam=2.0)
    over = loss_hor(p, np.array([8.0, 8.0])).item()
    assert over == pytest.approx(2 * 2**-8 + 2.0 * 9.0)


def test_loss_hor_gradient(rng):
    p = AllocationProblem(rng.uniform(0.1, 2, 5), rng.integers(10, 100, 5), B_avg=5.5)
    assert ad.check_gradients(lambda b: loss_hor(p, b), rng.uniform(4, 8, 5)).passed


def test_hand_instance():
    p = AllocationProblem([3.0, 2.0, 1.0], [10, 10, 10], (4, 8), 6)
    assert optimize_allocation(p).assigned_bits == [8, 4, 4]
    oracle = enumerate_oracle(p)
    assert oracle.assigned_bits == [8, 4, 4]
    assert oracle.objective == pytest.approx(0.19921875, abs=1e-15)


def test_equal_scores_full_budget():
    p = AllocationProblem([1.0] * 4, [5, 6, 7, 8], (2, 4, 8), 8)
    assert optimize_allocation(p).assigned_bits == [8, 8, 8, 8]


def test_oracle_corner_cases():
    assert enumerate_oracle(AllocationProblem([1.0], [1], (4, 8), 8)).assigned_bits == [8]
    p = AllocationProblem([3.0, 1.0, 2.0], [1, 2, 3], (4, 8), 4)
    assert enumerate_oracle(p).assigned_bits == [4, 4, 4]
    assert optimize_allocation(p).assigned_bits == [4, 4, 4]


def test_oracle_tie_break_is_lexicographic():
    p = AllocationProblem([1.0, 1.0], [1, 1], (4, 8), 6)
    assert enumerate_oracle(p).assigned_bits == [4, 8]


def test_oracle_size_limit():
    with pytest.raises(ContractError):
        enumerate_oracle(AllocationProblem(np.ones(30), np.ones(30), (2, 4, 8), 4))


def test_infeasible_budget():
    with pytest.raises(ContractError):
        AllocationProblem([1.0], [1], (4, 8), 3)
    p = AllocationProblem([1.0], [1], (4, 8), 4)
    p.B_avg = 3.0
    with pytest.raises(InfeasibleError):
        optimize_allocation(p)


def test_scaling_scores_keeps_assignment(rng):
    for _ in range(10):
        S, p = rng.uniform(0.1, 3, 6), rng.integers(10, 500, 6)
        base = optimize_allocation(AllocationProblem(S, p, (2, 4, 8), 5)).assigned_bits
        scaled = optimize_allocation(AllocationProblem(S * 37.5, p, (2, 4, 8), 5)).assigned_bits
        assert base == scaled


def test_oracle_monotone_in_score(rng):
    for _ in range(30):
        S, p = rng.uniform(0.1, 3, 5), rng.integers(10, 100, 5)
        l = int(rng.integers(5))
        before = enumerate_oracle(AllocationProblem(S, p, (4, 8), 5.5)).bits[l]
        S2 = S.copy()
        S2[l] *= 3.0
        after = enumerate_oracle(AllocationProblem(S2, p, (4, 8), 5.5)).bits[l]
        assert after >= before


def test_assignment_text_round_trip():
    p = AllocationProblem([3.0, 2.0, 1.0], [10, 10, 10], (4, 8), 6, layer_ids=["a", "b", "c"])
    a = optimize_allocation(p)
    assert a.to_text().splitlines()[0] == "a 3.0 10 8"
    assert read_assignment(a.to_text()) == [("a", 3.0, 10, 8), ("b", 2.0, 10, 4), ("c", 1.0, 10, 4)]
