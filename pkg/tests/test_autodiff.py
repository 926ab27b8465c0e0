import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from malt import autodiff as ad
from malt.autodiff import ParamStore, Tensor


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    npt.assert_array_equal(ad.matmul(Tensor(np.eye(2)), a).data, a.data)


def test_matmul_hand_product():
    out = ad.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
    npt.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_dimension_error_names_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_matmul_right_identity_exact(m, n, seed):
    a = np.random.default_rng(seed).integers(-50, 50, size=(m, n)).astype(float)
    npt.assert_array_equal(ad.matmul(Tensor(a), Tensor(np.eye(n))).data, a)


def test_softmax_examples():
    npt.assert_allclose(ad.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    out = ad.softmax_rows(Tensor([[-np.inf, 0.0]])).data
    assert out[0, 0] == 0.0 and out[0, 1] == 1.0
    npt.assert_allclose(ad.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data,
                        [[0.09003, 0.24473, 0.66524]], atol=5e-6)


def test_softmax_formula_direct():
    row = np.array([1.0, 2.0, 3.0])
    expect = np.exp(row) / np.exp(row).sum()
    npt.assert_allclose(ad.softmax_rows(Tensor(row[None])).data[0], expect, rtol=1e-14)


def test_softmax_all_masked_row():
    with pytest.raises(ad.InvalidMaskError):
        ad.softmax_rows(Tensor([[-np.inf, -np.inf]]))
    out = ad.softmax_rows(Tensor([[-np.inf, -np.inf], [0.0, 1.0]]), allow_empty=True).data
    npt.assert_array_equal(out[0], [0.0, 0.0])


@settings(max_examples=50)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2 ** 32 - 1))
def test_softmax_rows_are_distributions(m, n, seed):
    x = np.random.default_rng(seed).normal(scale=10.0, size=(m, n))
    p = ad.softmax_rows(Tensor(x)).data
    assert np.all((p >= 0) & (p <= 1))
    npt.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    npt.assert_array_equal(ad.layer_norm(Tensor([[5.0, 5.0, 5.0]]), one, zero).data, [[0, 0, 0]])
    out = ad.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-14)
    npt.assert_allclose(out.data, [[1.0, -1.0]], rtol=1e-12)
    bias = Tensor([0.5, -2.0, 3.0])
    out = ad.layer_norm(Tensor([[1.0, 7.0, -3.0]]), Tensor(np.zeros(3)), bias)
    npt.assert_array_equal(out.data, [bias.data])


def test_backward_sum_and_square():
    store = ParamStore()
    w = store.add("w", np.arange(6.0).reshape(2, 3))
    ad.backward(ad.tensor_sum(w))
    npt.assert_array_equal(w.grad, np.ones((2, 3)))

    store = ParamStore()
    x = store.add("x", [3.0])
    ad.backward(ad.tensor_sum(ad.mul(x, x)))
    npt.assert_array_equal(x.grad, [6.0])


def test_backward_accumulates_reused_parameter():
    store = ParamStore()
    x = store.add("x", [[1.5, -2.0]])
    ad.backward(ad.tensor_sum(ad.add(x, x)))
    npt.assert_array_equal(x.grad, [[2.0, 2.0]])


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ad.ContractError):
        ad.backward(x)


def test_unreachable_parameter_has_zero_grad():
    store = ParamStore()
    a = store.add("a", [[1.0]])
    store.add("b", [[2.0]])
    ad.backward(ad.tensor_sum(ad.mul(a, a)))
    grads = store.grads()
    assert grads["b"].tolist() == [[0.0]]
    assert grads["a"].tolist() == [[2.0]]


def test_finite_diff_square():
    store = ParamStore()
    x = store.add("x", [3.0])
    ad.backward(ad.tensor_sum(ad.mul(x, x)))
    assert x.grad[0] == 6.0
    err = ad.finite_diff_check(lambda: float(x.data[0] ** 2), store, "x", 0, h=1e-5)
    assert err < 1e-9


def test_finite_diff_softmax_cross_entropy():
    store = ParamStore()
    z = store.add("z", [[0.3, -1.2, 2.0]])

    def f():
        return ad.cross_entropy(z, np.array([1])).data.item()

    ad.backward(ad.cross_entropy(z, np.array([1])))
    for j in range(3):
        assert ad.finite_diff_check(f, store, "z", (0, j)) < 1e-7


def test_finite_diff_rejects_bad_step():
    store = ParamStore()
    store.add("x", [1.0])
    with pytest.raises(ad.ContractError):
        ad.finite_diff_check(lambda: 0.0, store, "x", 0, h=0.0)


def test_finite_diff_propagates_nonfinite():
    store = ParamStore()
    store.add("x", [1.0])
    with pytest.raises(FloatingPointError):
        ad.finite_diff_check(lambda: math.inf, store, "x", 0, analytic=0.0)


# every differentiable op against central differences on random small tensors

def _op_cases(rng):
    m, n, p = rng.integers(1, 9, size=3)
    b = rng.integers(1, 4)
    rows = rng.integers(0, m, size=m + 2)
    return {
        "add": ((m, n), (m, n), lambda a, c: ad.add(a, c)),
        "sub": ((m, n), (m, n), lambda a, c: ad.sub(a, c)),
        "mul": ((m, n), (m, n), lambda a, c: ad.mul(a, c)),
        "matmul": ((m, p), (p, n), ad.matmul),
        "matmul_batched": ((b, m, p), (b, p, n), ad.matmul),
        "matmul_shared": ((b, m, p), (p, n), ad.matmul),
        "add_bias": ((b, m, n), (n,), ad.add_bias),
        "layer_norm_gain": ((m, n), (n,), lambda a, g: ad.layer_norm(a, g, Tensor(np.full(n, 0.1)))),
        "gelu": ((m, n), None, lambda a: ad.gelu(a)),
        "softmax": ((m, n), None, lambda a: ad.softmax_rows(a)),
        "scale": ((m, n), None, lambda a: ad.scale(a, -1.7)),
        "transpose": ((m, n), None, ad.transpose_last),
        "heads": ((b, m, 2 * n), None, lambda a: ad.merge_heads(ad.mul(ad.split_heads(a, 2),
                                                                       ad.split_heads(a, 2)))),
        "take_rows": ((b, m, n), None, lambda a: ad.take_rows(a, rows)),
        "mean_rows": ((b, m, n), None, ad.mean_rows),
        "expand": ((m, n), None, lambda a: ad.expand_batch(a, (3,))),
        "concat": ((m, n), (p, n), lambda a, c: ad.concat_rows([a, c])),
        "mask": ((m, n), None, lambda a: ad.apply_score_mask(
            ad.mul(a, a), np.arange(n)[None, :] != 0 if n > 1 else np.ones((1, 1), bool))),
    }


# the masked case's loss value sums -inf terms (inf - inf); only its gradients are used
@pytest.mark.filterwarnings("ignore:invalid value encountered in reduce:RuntimeWarning")
@pytest.mark.parametrize("trial", range(20))
def test_every_op_matches_finite_differences(trial):
    rng = np.random.default_rng(1000 + trial)
    for name, (sa, sb, op) in _op_cases(rng).items():
        store = ParamStore()
        a = store.add("a", rng.normal(size=sa))
        args = [a]
        if sb is not None:
            args.append(store.add("b", rng.normal(size=sb)))
        proj = rng.normal(size=op(*args).shape)

        def objective():
            out = op(*args).data
            return float(np.where(np.isfinite(out), out * proj, 0.0).sum())

        # masked (-inf) outputs carry no gradient, matching the objective's zeros
        ad.backward(ad.tensor_sum(ad.mul(op(*args), Tensor(proj))))
        for pname in store.names():
            size = store.entries[pname].value.size
            for idx in rng.choice(size, size=min(size, 5), replace=False):
                err = ad.finite_diff_check(objective, store, pname, int(idx), h=1e-6)
                assert err < 1e-6, (name, pname, idx, err)


def test_cross_entropy_weighted_gradient():
    rng = np.random.default_rng(3)
    store = ParamStore()
    z = store.add("z", rng.normal(size=(2, 3, 4)))
    labels = rng.integers(0, 4, size=(2, 3))
    w = np.array([[1, 0, 1], [1, 1, 0]], dtype=float)
    ad.backward(ad.cross_entropy(z, labels, w))
    f = lambda: ad.cross_entropy(z, labels, w).data.item()  # noqa: E731
    for idx in range(z.data.size):
        assert ad.finite_diff_check(f, store, "z", idx) < 1e-7
    # rows with zero weight get no gradient
    assert np.all(z.grad[0, 1] == 0) and np.all(z.grad[1, 2] == 0)


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(ValueError):
        ad.cross_entropy(Tensor(np.zeros((1, 3))), np.array([3]))


# Adam

def _store_with_grad(value, grad):
    store = ParamStore()
    t = store.add("w", np.array(value, dtype=float))
    t.grad = np.array(grad, dtype=float)
    return store


def test_adam_first_step_is_lr_sized():
    store = _store_with_grad([1.0], [2.0])
    ad.adam_step(store, lr=0.1, t=1)
    # at t=1 the bias-corrected update is lr * g / (|g| + eps)
    npt.assert_allclose(store["w"].data, [1.0 - 0.1 * 2.0 / (2.0 + 1e-8)], rtol=1e-15)
    assert store["w"].grad is None


def test_adam_zero_gradient_is_noop():
    store = _store_with_grad([[1.0, -2.0]], [[0.0, 0.0]])
    ad.adam_step(store, lr=0.1, t=1)
    npt.assert_array_equal(store["w"].data, [[1.0, -2.0]])


def test_adam_steps_do_not_grow_under_fixed_gradient():
    store = _store_with_grad([0.0], [0.7])
    ad.adam_step(store, lr=0.01, t=1)
    d1 = abs(store["w"].data[0])
    store["w"].grad = np.array([0.7])
    before = store["w"].data[0]
    ad.adam_step(store, lr=0.01, t=2)
    d2 = abs(store["w"].data[0] - before)
    assert d2 <= d1 + 1e-12


def test_adam_rejects_step_zero():
    with pytest.raises(ad.ContractError):
        ad.adam_step(_store_with_grad([1.0], [1.0]), lr=0.1, t=0)


def test_param_store_rejects_duplicates():
    store = ParamStore()
    store.add("a", [1.0])
    with pytest.raises(KeyError):
        store.add("a", [2.0])
