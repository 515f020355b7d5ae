"""Backward rules checked against central finite differences."""

import numpy as np
import pytest

from tcma import autodiff as ad
from tcma.errors import GraphError, ShapeError
from tcma.tensor import finite_diff_grad

H = 1e-5
REL_TOL = 1e-6


def _rel_err(analytic, numeric):
    analytic = np.atleast_1d(np.asarray(analytic, dtype=float))
    numeric = np.atleast_1d(np.asarray(numeric, dtype=float))
    denom = max(np.abs(analytic).max(), np.abs(numeric).max())
    if denom < 1e-8:
        return float(np.abs(analytic - numeric).max())
    return float(np.abs(analytic - numeric).max() / denom)


def check_grad(build, x0, seed_note=""):
    """``build`` maps a Node to a scalar Node; compares backward vs FD."""
    node = ad.Node(np.asarray(x0, dtype=float), trainable=True)
    out = build(node)
    ad.backward(out)
    fd = finite_diff_grad(lambda x: float(build(ad.Node(x)).value), np.asarray(x0, float), H)
    err = _rel_err(node.grad, fd)
    assert err < REL_TOL, f"gradient mismatch {err:.3e} {seed_note}"


class TestBasics:
    def test_sum_of_squares(self):
        x = np.array([1.0, -2.0, 3.0])
        n = ad.Node(x, trainable=True)
        ad.backward(ad.sum_axis(n * n))
        np.testing.assert_allclose(n.grad, 2 * x)

    def test_disconnected_param_stays_zero(self):
        used = ad.Node(np.ones(3), trainable=True)
        unused = ad.Node(np.ones(2), trainable=True)
        ad.backward(ad.sum_axis(used * 2.0))
        np.testing.assert_array_equal(unused.grad, np.zeros(2))

    def test_non_scalar_root_rejected(self):
        with pytest.raises(GraphError):
            ad.backward(ad.Node(np.ones(3)))

    def test_diamond_graph_counts_once(self):
        # z = (x + x) * x = 2x^2 -> dz/dx = 4x; double-visiting any node breaks this
        x = ad.Node(np.array(3.0), trainable=True)
        y = x + x
        z = y * x
        ad.backward(z)
        assert float(x.grad) == pytest.approx(12.0)

    def test_softmax_dot_matches_fd(self):
        c = np.random.default_rng(0).normal(size=6)
        for seed in range(20):
            x0 = np.random.default_rng(seed).normal(size=6)
            check_grad(lambda n: ad.sum_axis(ad.softmax_last(n) * c), x0, f"seed={seed}")


class TestElementwiseOps:
    @pytest.mark.parametrize("seed", range(5))
    def test_arithmetic_broadcast(self, seed):
        rs = np.random.default_rng(seed)
        b = rs.normal(size=(1, 4)) + 3.0
        check_grad(lambda n: ad.sum_axis((n + b) * (n - 0.5) / b), rs.normal(size=(3, 4)))

    @pytest.mark.parametrize("op,domain", [
        (ad.exp, (-2.0, 2.0)),
        (ad.log, (0.5, 3.0)),
        (ad.sqrt, (0.5, 3.0)),
        (ad.softplus, (-30.0, 30.0)),
    ])
    def test_unary(self, op, domain):
        rs = np.random.default_rng(7)
        x0 = rs.uniform(*domain, size=(2, 3))
        w = rs.normal(size=(2, 3))
        check_grad(lambda n: ad.sum_axis(op(n) * w), x0)

    def test_clamp_min(self):
        x0 = np.array([-1.0, 0.5, 2.0])
        check_grad(lambda n: ad.sum_axis(ad.clamp_min(n, 0.4) * np.array([1.0, 2.0, 3.0])), x0)

    def test_neg(self):
        check_grad(lambda n: ad.sum_axis(-n * 3.0), np.array([1.0, -2.0]))


class TestReductionsAndStructure:
    @pytest.mark.parametrize("axis,keepdims", [(None, False), (0, False), (1, True)])
    def test_sum_axis(self, axis, keepdims):
        rs = np.random.default_rng(11)
        w = 1.0 if axis is None else rs.normal(size=np.delete([3, 4], axis)) \
            if not keepdims else rs.normal(size=(3, 1))
        check_grad(lambda n: ad.sum_axis(ad.sum_axis(n, axis=axis, keepdims=keepdims) * w),
                   rs.normal(size=(3, 4)))

    def test_mean_axis(self):
        rs = np.random.default_rng(12)
        w = rs.normal(size=(2,))
        check_grad(lambda n: ad.sum_axis(ad.mean_axis(n, axis=1) * w), rs.normal(size=(2, 5)))

    def test_reshape_transpose(self):
        rs = np.random.default_rng(13)
        w = rs.normal(size=(4, 2))
        check_grad(lambda n: ad.sum_axis(ad.transpose2d(ad.reshape(n, (2, 4))) * w),
                   rs.normal(size=(8,)))

    def test_diagonal2d(self):
        rs = np.random.default_rng(14)
        check_grad(lambda n: ad.sum_axis(ad.diagonal2d(n) * np.array([1.0, -2.0, 0.5])),
                   rs.normal(size=(3, 3)))

    def test_matched_rows(self):
        rs = np.random.default_rng(15)
        w = rs.normal(size=(3, 4))
        check_grad(lambda n: ad.sum_axis(ad.matched_rows(n) * w), rs.normal(size=(3, 3, 4)))

    def test_gather_with_duplicates(self):
        rs = np.random.default_rng(16)
        idx = np.array([[0, 0, 2], [1, 1, 1]])
        w = rs.normal(size=(2, 3))
        check_grad(lambda n: ad.sum_axis(ad.gather_along(n, idx, axis=1) * w),
                   rs.normal(size=(2, 4)))


class TestEinsum:
    SPECS = [
        ("id,jd->ij", (3, 4), (5, 4)),
        ("id,jtd->ijt", (2, 4), (3, 5, 4)),
        ("ijt,jtd->ijd", (2, 3, 5), (3, 5, 4)),
        ("ild,jnd->iljn", (2, 3, 4), (3, 5, 4)),
        ("il,iljd->ijd", (2, 3), (2, 3, 4, 5)),
        ("id,d->i", (3, 4), (4,)),
        ("bd,be->de", (5, 3), (5, 4)),
    ]

    @pytest.mark.parametrize("spec,sa,sb", SPECS)
    def test_gradients_both_operands(self, spec, sa, sb):
        rs = np.random.default_rng(hash(spec) % 2 ** 32)
        a0, b0 = rs.normal(size=sa), rs.normal(size=sb)
        out_shape = ad.einsum2(spec, ad.Node(a0), ad.Node(b0)).value.shape
        w = rs.normal(size=out_shape)
        check_grad(lambda n: ad.sum_axis(ad.einsum2(spec, n, b0) * w), a0, spec)
        check_grad(lambda n: ad.sum_axis(ad.einsum2(spec, ad.Node(a0), n) * w), b0, spec)

    def test_matmul_node(self):
        rs = np.random.default_rng(17)
        b0 = rs.normal(size=(4, 2))
        w = rs.normal(size=(3, 2))
        check_grad(lambda n: ad.sum_axis(ad.matmul(n, b0) * w), rs.normal(size=(3, 4)))

    def test_rejects_unrecoverable_specs(self):
        a, b = ad.Node(np.ones((2, 3))), ad.Node(np.ones((4,)))
        with pytest.raises(ShapeError):
            ad.einsum2("il,n->n", a, b)  # l only in lhs, absent from out+rhs
        with pytest.raises(ShapeError):
            ad.einsum2("ii,i->i", ad.Node(np.ones((2, 2))), ad.Node(np.ones(2)))


class TestFusedOps:
    @pytest.mark.parametrize("seed", range(8))
    def test_softmax_last(self, seed):
        rs = np.random.default_rng(seed)
        w = rs.normal(size=(3, 5))
        check_grad(lambda n: ad.sum_axis(ad.softmax_last(n) * w),
                   rs.normal(size=(3, 5)) * 3, f"seed={seed}")

    def test_softmax_last_masked(self):
        rs = np.random.default_rng(21)
        mask = np.array([[True, True, False, True], [True, False, False, True]])
        w = rs.normal(size=(2, 4))
        x0 = rs.normal(size=(2, 4))

        def build(n):
            return ad.sum_axis(ad.softmax_last(n, mask=mask) * w)

        check_grad(build, x0)
        out = ad.softmax_last(ad.Node(x0), mask=mask).value
        assert np.all(out[~mask] == 0.0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(8))
    def test_logsumexp_last(self, seed):
        rs = np.random.default_rng(seed + 100)
        w = rs.normal(size=(4,))
        check_grad(lambda n: ad.sum_axis(ad.logsumexp_last(n) * w),
                   rs.normal(size=(4, 6)) * 5, f"seed={seed}")

    def test_logsumexp_extreme_values_stable(self):
        x = ad.Node(np.array([[1000.0, 999.0], [-1000.0, -1000.0]]))
        out = ad.logsumexp_last(x).value
        assert np.isfinite(out).all()
        assert out[0] == pytest.approx(1000.0 + np.log(1 + np.exp(-1.0)))

    @pytest.mark.parametrize("seed", range(8))
    def test_unit_last(self, seed):
        rs = np.random.default_rng(seed + 200)
        w = rs.normal(size=(3, 4))
        check_grad(lambda n: ad.sum_axis(ad.unit_last(n) * w),
                   rs.normal(size=(3, 4)), f"seed={seed}")

    def test_unit_last_zero_slice(self):
        x = np.zeros((2, 3))
        x[1] = [3.0, 0.0, 4.0]
        out = ad.unit_last(ad.Node(x)).value
        np.testing.assert_array_equal(out[0], np.zeros(3))
        np.testing.assert_allclose(out[1], [0.6, 0.0, 0.8])


class TestFullOpSweep:
    """Every op with a backward rule, exercised in one composite per seed."""

    @pytest.mark.parametrize("seed", range(20))
    def test_every_op_in_one_graph(self, seed):
        rs = np.random.default_rng(5000 + seed)
        c1 = rs.normal(size=(3, 4))
        c2 = rs.uniform(0.5, 2.0, size=(3, 4))
        cm = rs.normal(size=(4, 3))
        idx = rs.integers(0, 4, size=(3, 2))
        gw = rs.normal(size=(3, 2))
        pw = rs.normal(size=(3, 4))

        def build(n):
            a = (n + c1) * c2 - 0.3          # add, mul, sub (broadcast scalar)
            b = a / c2                        # div
            u = ad.exp(b * 0.2) + ad.log(ad.clamp_min(b, 0.1) + 2.0) \
                + ad.sqrt(ad.clamp_min(a * a, 1e-3)) + ad.softplus(-b)
            sm = ad.softmax_last(u)
            lse = ad.logsumexp_last(u)
            un = ad.unit_last(u)
            gathered = ad.gather_along(un, idx, axis=1)           # (3, 2)
            square = ad.matmul(u, ad.constant(cm))                # (3, 3)
            pair = ad.einsum2("id,jd->ijd", u, ad.reshape(n, (3, 4)))  # (3, 3, 4)
            total = ad.sum_axis(sm * c1)
            total = total + ad.mean_axis(lse)
            total = total + ad.sum_axis(gathered * gw)
            total = total + ad.sum_axis(ad.diagonal2d(square))
            total = total + ad.sum_axis(ad.mean_axis(ad.transpose2d(square), axis=0))
            total = total + ad.sum_axis(ad.matched_rows(pair) * pw)
            return -total

        check_grad(build, rs.normal(size=(3, 4)), f"seed={seed}")

    def test_backward_visits_each_node_once(self):
        x = ad.Node(np.array([1.0, 2.0]), trainable=True)
        shared = x * 2.0
        left = ad.sum_axis(shared * shared)
        right = ad.sum_axis(ad.exp(shared * 0.1))
        root = left + right
        calls: dict[int, int] = {}
        for node in ad._topo_order(root):
            if node.backward_fn is None:
                continue
            original = node.backward_fn

            def counted(g, _orig=original, _id=id(node)):
                calls[_id] = calls.get(_id, 0) + 1
                return _orig(g)

            node.backward_fn = counted
        ad.backward(root)
        assert calls and all(count == 1 for count in calls.values())
