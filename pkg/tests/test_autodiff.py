import numpy as np
import pytest

from biquant import autodiff as ad
from biquant.errors import ContractError, DimensionError, DomainError


def test_matmul_identity():
    out = ad.matmul(np.eye(2), [[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])


def test_clamp_values():
    np.testing.assert_array_equal(ad.clamp([-3.0, 0.5, 9.0], 0.0, 1.0).data, [0.0, 0.5, 1.0])


def test_cosine_of_orthogonal_vectors_is_zero():
    assert ad.cosine_similarity([[1.0, 0.0]], [[0.0, 1.0]]).data[0] == 0.0


def test_apply_primitive_matches_wrapper():
    a = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(ad.apply_primitive("exp", [a]).data, ad.exp(a).data)
    with pytest.raises(ContractError):
        ad.apply_primitive("nope", [a])
    with pytest.raises(ContractError):
        ad.apply_primitive("add", [a])


def test_shape_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        ad.add(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(DimensionError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


@pytest.mark.parametrize("op", [ad.log, ad.sqrt])
def test_negative_domain(op):
    with pytest.raises(DomainError):
        op([-1.0, 2.0])


def test_sum_gradient_is_ones():
    x = ad.Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    g = ad.backward(ad.tsum(x))
    np.testing.assert_array_equal(g[x].data, np.ones((3, 4)))


def test_square_gradient():
    x = ad.Tensor([3.0], requires_grad=True)
    assert ad.backward(ad.tsum(ad.mul(x, x)))[x].data[0] == 6.0


def test_fan_out_doubles_gradient():
    x = ad.Tensor(np.random.default_rng(1).normal(size=5), requires_grad=True)
    single = ad.backward(ad.tsum(x))[x].data
    double = ad.backward(ad.add(ad.tsum(x), ad.tsum(x)))[x].data
    np.testing.assert_array_equal(double, 2 * single)


def test_non_scalar_loss_rejected():
    with pytest.raises(ContractError):
        ad.backward(ad.Tensor(np.ones(3), requires_grad=True))


def test_matmul_gradient_matches_differences(rng):
    A, B = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    assert ad.check_gradients(lambda a: ad.tsum(ad.matmul(a, B)), A).passed
    assert ad.check_gradients(lambda b: ad.tsum(ad.matmul(A, b)), B).passed


def test_sigmoid_gradient_at_zero():
    report = ad.check_gradients(lambda x: ad.tsum(ad.sigmoid(x)), np.array([0.0]))
    assert report.analytic[0] == 0.25
    assert report.numeric[0] == pytest.approx(0.25, rel=1e-8)
    assert report.passed


def test_check_gradients_rejects_non_finite():
    with pytest.raises(DomainError):
        ad.check_gradients(lambda x: ad.tsum(ad.div(1.0, x)), np.array([0.0]))


def test_forward_is_reproducible(rng):
    a, b = rng.normal(size=(20, 30)), rng.normal(size=(30, 10))
    f = lambda: ad.softmax(ad.matmul(a, b)).data
    np.testing.assert_array_equal(f(), f())


def test_tensor_data_is_read_only():
    t = ad.Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0
