import math

import numpy as np
import pytest

from cilmp import autodiff as ad
from cilmp.errors import (
    DegenerateInputError,
    DimensionError,
    EvaluationError,
    FrozenParameterError,
    LabelError,
)


def t(data, grad=True):
    return ad.Tensor(data, requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        a = t([[1.0, 0.0], [0.0, 1.0]])
        b = t([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(ad.matmul(a, b).data, b.data)

    def test_hand_product(self):
        # [[1,2]] @ [[3],[4]] = [[1*3 + 2*4]] = [[11]]
        out = ad.matmul(t([[1.0, 2.0]]), t([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_zero_matrix(self):
        z = t(np.zeros((2, 3)))
        b = t(np.arange(12.0).reshape(3, 4))
        assert np.array_equal(ad.matmul(z, b).data, np.zeros((2, 4)))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 4\)"):
            ad.matmul(t(np.ones((2, 3))), t(np.ones((2, 4))))

    def test_transpose_identity(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        lhs = ad.transpose(ad.matmul(t(a), t(b))).data
        rhs = ad.matmul(ad.transpose(t(b)), ad.transpose(t(a))).data
        assert np.max(np.abs(lhs - rhs)) <= 1e-12


class TestHadamard:
    def test_elementwise(self):
        out = ad.hadamard(t([1.0, 2.0]), t([3.0, 4.0]))
        assert out.data.tolist() == [3.0, 8.0]

    def test_ones_identity(self):
        x = t([[1.0, -2.0], [0.5, 3.0]])
        assert np.array_equal(ad.hadamard(x, t(np.ones((2, 2)))).data, x.data)

    def test_zeros_annihilate(self):
        x = t([1.0, -2.0, 3.0])
        assert np.array_equal(ad.hadamard(x, t(np.zeros(3))).data, np.zeros(3))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.hadamard(t([1.0, 2.0]), t([1.0, 2.0, 3.0]))


class TestL2Normalize:
    def test_three_four_five(self):
        out = ad.l2_normalize(t([3.0, 4.0]))
        assert np.allclose(out.data, [0.6, 0.8], atol=1e-15)

    def test_unit_vector_fixed_point(self):
        v = np.array([1.0, 0.0, 0.0])
        assert np.allclose(ad.l2_normalize(t(v)).data, v, atol=1e-15)

    def test_zero_vector_rejected(self):
        with pytest.raises(DegenerateInputError):
            ad.l2_normalize(t([0.0, 0.0]))

    def test_output_unit_norm(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            v = rng.normal(size=7)
            out = ad.l2_normalize(t(v))
            assert abs(np.linalg.norm(out.data) - 1.0) <= 1e-12


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        out = ad.softmax_cross_entropy(t([[0.5, 0.5]]), np.array([1]))
        assert abs(out.item() - math.log(2)) <= 1e-12

    def test_saturated_logits(self):
        out = ad.softmax_cross_entropy(t([[20.0, -20.0]]), np.array([0]))
        assert out.item() == pytest.approx(0.0, abs=1e-12)

    def test_log_sum_exp_oracle(self):
        # direct oracle: lse([1,2,3]) - 3 = log(e^-2 + e^-1 + 1)
        expect = math.log(math.exp(1) + math.exp(2) + math.exp(3)) - 3.0
        assert expect == pytest.approx(0.40760596, abs=1e-7)
        out = ad.softmax_cross_entropy(t([[1.0, 2.0, 3.0]]), np.array([2]))
        assert out.item() == pytest.approx(expect, abs=1e-12)

    def test_out_of_range_target(self):
        with pytest.raises(LabelError):
            ad.softmax_cross_entropy(t([[0.0, 1.0]]), np.array([2]))

    def test_huge_logits_stay_finite(self):
        out = ad.softmax_cross_entropy(t([[800.0, -800.0]]), np.array([0]))
        assert out.item() == 0.0


class TestSoftmaxRows:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        x = t(rng.normal(size=(6, 5)) * 10)
        out = ad.softmax_rows(x)
        assert np.max(np.abs(out.data.sum(axis=1) - 1.0)) <= 1e-12

    def test_causal_mask_zeroes_future(self):
        x = t(np.zeros((3, 3)))
        mask = np.tril(np.ones((3, 3), dtype=bool))
        out = ad.softmax_rows(x, mask=mask)
        assert out.data[0, 1] == 0.0 and out.data[0, 2] == 0.0
        assert np.allclose(out.data[2], [1 / 3, 1 / 3, 1 / 3])

    def test_fully_masked_row_rejected(self):
        with pytest.raises(EvaluationError):
            ad.softmax_rows(t(np.zeros((2, 2))), mask=np.zeros((2, 2), dtype=bool))


class TestGradientCheck:
    def test_square_polynomial(self):
        x = t([3.0])

        def f():
            return ad.tsum(ad.mul(x, x))

        assert ad.gradient_check(f, [x]) < 1e-8

    def test_cross_entropy_random_logits(self):
        rng = np.random.default_rng(7)
        logits = t(rng.normal(size=(4, 3)))
        targets = np.array([0, 2, 1, 1])

        def f():
            return ad.softmax_cross_entropy(logits, targets)

        assert ad.gradient_check(f, [logits]) < 1e-6

    def test_step_size_validated(self):
        x = t([1.0])
        with pytest.raises(ValueError):
            ad.gradient_check(lambda: ad.tsum(x), [x], h=1e-2)


@pytest.mark.parametrize("seed", range(20))
def test_all_ops_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a = t(rng.normal(size=(3, 4)))
    b = t(rng.normal(size=(3, 4)))
    m = t(rng.normal(size=(4, 3)))
    v = t(rng.normal(size=4))
    w = t(rng.normal(size=4) + 2.5)  # positive, for log
    g1 = t(rng.normal(size=3))
    b1 = t(rng.normal(size=3))
    tgt = rng.integers(0, 3, size=3)

    def f():
        x = ad.add(a, b)
        x = ad.sub(x, ad.scale(b, 0.3))
        x = ad.mul(x, a)
        x = ad.add_rowvec(x, v)
        x = ad.mul_rowvec(x, v)
        y = ad.matmul(x, m)  # (3, 3)
        y = ad.layer_norm(y, g1, b1)
        y = ad.add(y, ad.softmax_rows(y))
        z = ad.matvec(ad.transpose(y), g1)
        z = ad.add(z, ad.l2_normalize(b1))
        q = ad.concat([ad.reshape(z, (1, 3)), y], axis=0)[1:4]
        s = ad.softmax_cross_entropy(q, tgt)
        s = ad.add(s, ad.mean(ad.exp(ad.tanh(x))))
        s = ad.add(s, ad.mean(ad.log(w)))
        s = ad.add(s, ad.dot(v, v))
        return ad.add(s, ad.tsum(ad.rows(y, np.array([0, 2, 0]))))

    err = ad.gradient_check(f, [a, b, m, v, w, g1, b1])
    assert err <= 1e-5


def test_shared_subexpression_accumulates():
    # y = s + s must push twice the gradient into s's inputs, matching an
    # unrolled tape where the subexpression is duplicated as two nodes.
    x = t([1.5, -2.0])
    s = ad.mul(x, x)
    y = ad.tsum(ad.add(s, s))
    y.backward()
    shared_grad = x.grad.copy()

    x2 = t([1.5, -2.0])
    y2 = ad.tsum(ad.add(ad.mul(x2, x2), ad.mul(x2, x2)))
    y2.backward()
    assert np.array_equal(shared_grad, x2.grad)


def test_tape_topological_order_and_single_visit():
    x = t([2.0])
    s = ad.mul(x, x)
    y = ad.add(s, s)
    z = ad.tsum(ad.mul(y, s))
    tape = ad.Tape.trace(z)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    assert len(pos) == len(tape.nodes)  # each node recorded exactly once
    for node in tape.nodes:
        for parent in node._parents:
            assert pos[id(parent)] < pos[id(node)]


def test_backward_requires_scalar_root():
    with pytest.raises(DimensionError):
        t([[1.0, 2.0]]).backward()


def test_scalar_broadcast_grad_values():
    # loss = sum((x + s) * s) with x = ones(2,2): d/ds = sum(x) + 4*2s = 4 + 8s
    x = t(np.ones((2, 2)))
    s = t(2.0)

    def f():
        return ad.tsum(ad.mul(ad.add(x, s), s))

    assert ad.gradient_check(f, [x, s]) < 1e-7


def test_slice_and_concat_roundtrip():
    x = t(np.arange(12.0).reshape(4, 3))
    top, bottom = x[:2], x[2:]
    y = ad.concat([top, bottom], axis=0)
    assert np.array_equal(y.data, x.data)
    ad.tsum(ad.mul(y, y)).backward()
    assert np.allclose(x.grad, 2 * x.data)


def test_construction_rejects_non_finite():
    with pytest.raises(EvaluationError):
        ad.Tensor([np.inf, 1.0])


def test_exp_overflow_is_an_error():
    with pytest.raises(EvaluationError):
        ad.exp(t([1000.0]))


def test_log_of_non_positive_is_an_error():
    with pytest.raises(EvaluationError):
        ad.log(t([0.0, 1.0]))


class TestRegistryAndSGD:
    def test_checksum_changes_with_data(self):
        reg = ad.ParamRegistry()
        p = reg.register("w", t(np.ones(4)))
        c0 = reg.checksum()
        p.data = p.data + 1.0
        assert reg.checksum() != c0

    def test_registry_rejects_duplicates(self):
        reg = ad.ParamRegistry()
        reg.register("w", t(np.ones(2)))
        with pytest.raises(ValueError):
            reg.register("w", t(np.ones(2)))

    def test_bytes_roundtrip(self):
        rng = np.random.default_rng(5)
        reg = ad.ParamRegistry()
        reg.register("a", t(rng.normal(size=(2, 3))))
        reg.register("b", t(rng.normal(size=5)))
        raw = reg.to_bytes()
        snap = [p.data.copy() for p in reg.tensors()]
        for p in reg.tensors():
            p.data = np.zeros_like(p.data)
        reg.load_bytes(raw)
        for p, s in zip(reg.tensors(), snap):
            assert np.array_equal(p.data, s)

    def test_sgd_momentum_step(self):
        p = t(np.array([1.0]))
        opt = ad.SGD([p], lr=0.1, momentum=0.5)
        p.grad = np.array([2.0])
        opt.step()
        assert p.data == pytest.approx([1.0 - 0.2])
        p.grad = np.array([2.0])
        opt.step()  # velocity = 0.5*2 + 2 = 3
        assert p.data == pytest.approx([0.8 - 0.3])

    def test_sgd_rejects_frozen(self):
        reg = ad.ParamRegistry()
        p = reg.register("w", t(np.ones(2)))
        reg.freeze()
        with pytest.raises(FrozenParameterError):
            ad.SGD([p], lr=0.1)

    def test_frozen_grad_registration_is_an_error(self):
        reg = ad.ParamRegistry()
        p = reg.register("w", t(np.ones(2)))
        reg.freeze()
        with pytest.raises(FrozenParameterError):
            p.accumulate_grad(np.ones(2))

    def test_frozen_params_do_not_collect_grads_in_backward(self):
        reg = ad.ParamRegistry()
        p = reg.register("w", t(np.ones(2)))
        reg.freeze()
        x = t(np.ones(2))
        ad.tsum(ad.mul(p, x)).backward()
        assert p.grad is None
        assert x.grad is not None
