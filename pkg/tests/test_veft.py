import math

import numpy as np
import pytest

from biquant import autodiff as ad
from biquant.errors import ContractError
from biquant.fakequant import rtn_quantize_model
from biquant.veft import (
    ChannelMask,
    ContrastiveBatch,
    ProgressiveSchedule,
    build_mixed_model,
    combine_positives,
    finetune,
    loss_from_similarities,
    loss_ver,
    restore_count,
    sample_masks,
    select_restore_channels,
)


@pytest.fixture(scope="module")
def quantized(reference):
    det, train = reference["detector"], reference["train"]
    calib = train[np.arange(128)]
    return rtn_quantize_model(det, calib, 4), calib


def test_restore_counts():
    assert restore_count(10, 0.1) == 1
    assert restore_count(64, 0.1) == 6
    assert restore_count(5, 0.01) == 1


def test_mask_determinism(quantized):
    qm, _ = quantized
    a = select_restore_channels(qm, 1, 0.1, epoch=3, seed=9)
    assert a == select_restore_channels(qm, 1, 0.1, epoch=3, seed=9)
    draws = {select_restore_channels(qm, 1, 0.1, epoch=e, seed=9)[0].channels for e in range(10)}
    assert len(draws) > 1
    fixed = {select_restore_channels(qm, 1, 0.1, epoch=e, seed=9, fixed=True)[0].channels for e in range(10)}
    assert len(fixed) == 1


def test_unknown_block_rejected(quantized):
    qm, _ = quantized
    with pytest.raises(ContractError):
        select_restore_channels(qm, len(qm.blocks), 0.1)
    with pytest.raises(ContractError):
        build_mixed_model(qm, [ChannelMask(9, 0, (0,), 0.1, 0, 0)])


def test_restored_rows_bit_exact(quantized, reference):
    qm, _ = quantized
    mixed = build_mixed_model(qm, sample_masks(qm, 0.1, seed=4))
    det = reference["detector"]
    for layer, fp in zip(mixed.layers, det.layers_):
        w = layer.effective_weight()
        assert np.array_equal(w[layer.restored], fp.weight[layer.restored])
        assert layer.restored.sum() in (0, 6)


def test_full_restoration_recovers_fp(reference):
    det, train = reference["detector"], reference["train"]
    n = len(det.layers_)
    bits = [32] + [4] * (n - 2) + [32]
    qm = rtn_quantize_model(det, train[np.arange(64)], bits, act_bits=32)
    mixed = build_mixed_model(qm, sample_masks(qm, 1.0))
    X = reference["test"].X
    np.testing.assert_array_equal(mixed.forward(X), det.forward(X))
    assert np.any(qm.forward(X) != det.forward(X))


def test_no_quantization_is_identity(reference):
    det, train = reference["detector"], reference["train"]
    qm = rtn_quantize_model(det, train[np.arange(64)], 32, act_bits=32)
    mixed = build_mixed_model(qm, sample_masks(qm, 0.1))
    X = reference["test"].X
    np.testing.assert_array_equal(mixed.forward(X), qm.forward(X))
    np.testing.assert_array_equal(qm.forward(X), det.forward(X))


def test_schedule_endpoints_and_midpoint():
    a, b = np.array([0.3, -1.7]), np.array([2.5, 4.1])
    np.testing.assert_array_equal(combine_positives(a, b, ProgressiveSchedule(10, 0)), a)
    np.testing.assert_array_equal(combine_positives(a, b, ProgressiveSchedule(10, 10)), b)
    np.testing.assert_array_equal(combine_positives([0.0, 0.0], [2.0, 2.0], 0.5), [1.0, 1.0])
    with pytest.raises(ContractError):
        ProgressiveSchedule(10, 11)


def test_loss_hand_example():
    loss = loss_from_similarities([math.log(2)], [[0.0]], 1.0).item()
    assert loss == pytest.approx(math.log(1.5), abs=1e-15)


def test_loss_symmetric_similarities():
    loss = loss_from_similarities(np.full(3, 0.37), np.full((3, 4), 0.37), 0.2).item()
    assert abs(loss - math.log(5)) <= 1e-12


def test_loss_ver_symmetric_geometry():
    # every negative and the positive make the same angle with the anchor
    anchor = np.array([[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]])
    comb = np.array([[0.5, 1.0, 0.0, 0.0, 0.0, 0.0]])
    negs = np.array([[[0.5, 0.0, 1.0, 0.0, 0.0, 0.0], [0.5, 0.0, 0.0, 1.0, 0.0, 0.0],
                      [0.5, 0.0, 0.0, 0.0, 1.0, 0.0], [0.5, 0.0, 0.0, 0.0, 0.0, 1.0]]])
    loss = loss_ver(ContrastiveBatch(anchor, negs, 0.2), comb).item()
    assert abs(loss - math.log(5)) <= 1e-12


def test_loss_saturates_to_zero():
    assert loss_from_similarities([1.0], [[-1.0]], 0.01).item() < 1e-80


def test_loss_is_positive(rng):
    A = rng.normal(size=(6, 5))
    assert loss_ver(ContrastiveBatch.in_batch(A, 0.2), rng.normal(size=(6, 5))).item() > 0


def test_temperature_must_be_positive():
    with pytest.raises(ContractError):
        ContrastiveBatch.in_batch(np.eye(3), 0.0)
    with pytest.raises(ContractError):
        loss_from_similarities([0.0], [[0.0]], -1.0)


def test_loss_ver_gradient(rng):
    A = rng.normal(size=(4, 5))
    batch = ContrastiveBatch.in_batch(A, 0.2)
    assert ad.check_gradients(lambda c: loss_ver(batch, c), rng.normal(size=(4, 5))).passed


def test_zero_epochs_is_no_op(quantized, reference):
    qm, calib = quantized
    res = finetune(qm, reference["detector"], calib.X, T=0)
    assert res.M_q is qm
    assert res.loss_trace == []


def test_small_batch_rejected(quantized, reference):
    qm, calib = quantized
    with pytest.raises(ContractError):
        finetune(qm, reference["detector"], calib.X[:7], T=1, K=7)


def test_finetune_deterministic_and_exact_rows(quantized, reference):
    qm, calib = quantized
    det = reference["detector"]
    a = finetune(qm, det, calib.X, T=2, seed=3)
    b = finetune(qm, det, calib.X, T=2, seed=3)
    for la, lb in zip(a.M_q.layers, b.M_q.layers):
        np.testing.assert_array_equal(la.weight_q.scale, lb.weight_q.scale)
        np.testing.assert_array_equal(la.codes, lb.codes)
    for layer, fp in zip(a.M_qv.layers, det.layers_):
        assert np.array_equal(layer.effective_weight()[layer.restored], fp.weight[layer.restored])
    assert a.M_qv.restored_channels == 24


def test_fixed_and_random_masks_coincide_for_one_epoch(quantized, reference):
    qm, calib = quantized
    det = reference["detector"]
    a = finetune(qm, det, calib.X, T=1, seed=5, random_mask=True)
    b = finetune(qm, det, calib.X, T=1, seed=5, random_mask=False)
    assert [m.channels for m in a.masks] == [m.channels for m in b.masks]
    np.testing.assert_array_equal(a.M_qv.forward(calib.X), b.M_qv.forward(calib.X))


def test_fixed_masks_never_change(quantized, reference):
    qm, calib = quantized
    res = finetune(qm, reference["detector"], calib.X, T=3, seed=5, random_mask=False)
    assert len({tuple(m.channels for m in ms) for ms in res.mask_history}) == 1
