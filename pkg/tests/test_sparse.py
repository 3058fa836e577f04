"""CSR construction and sparse/dense equivalence of the first layer."""
import numpy as np
import numpy.testing as npt
import pytest

from ctrnet.nn import DimensionError, LayerParams, dense_fc_backward, dense_fc_forward
from ctrnet.sparse import csr_from_rows, sparse_fc_backward, sparse_fc_forward

from conftest import random_rows


def make_params(rng, dim, out):
    return LayerParams(weights=rng.normal(size=(dim, out)), bias=rng.normal(size=out))


class TestCsrFromRows:
    def test_empty(self):
        v = csr_from_rows([], dim=10)
        assert v.num_rows == 0
        npt.assert_array_equal(v.row_offsets, [0])
        assert v.nnz == 0

    def test_sorts_indices_within_row(self):
        v = csr_from_rows([[(3, 1.0), (0, 1.0)]], dim=5)
        npt.assert_array_equal(v.col_indices, [0, 3])
        npt.assert_array_equal(v.values, [1.0, 1.0])

    def test_duplicate_index_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            csr_from_rows([[(2, 1.0), (2, 0.5)]], dim=5)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            csr_from_rows([[(5, 1.0)]], dim=5)
        with pytest.raises(ValueError, match="outside"):
            csr_from_rows([[(-1, 1.0)]], dim=5)

    def test_densify_roundtrip(self):
        rng = np.random.default_rng(0)
        rows = random_rows(rng, 100, 50, 4)
        v = csr_from_rows(rows, 50)
        dense = v.to_dense()
        rebuilt = csr_from_rows(
            [[(j, dense[r, j]) for j in np.nonzero(dense[r])[0]] for r in range(100)], 50
        )
        npt.assert_array_equal(rebuilt.row_offsets, v.row_offsets)
        npt.assert_array_equal(rebuilt.col_indices, v.col_indices)
        npt.assert_array_equal(rebuilt.values, v.values)

    def test_row_slice(self):
        rng = np.random.default_rng(1)
        v = csr_from_rows(random_rows(rng, 10, 30, 3), 30)
        sub = v.row_slice(4, 8)
        npt.assert_allclose(sub.to_dense(), v.to_dense()[4:8], atol=0)


class TestSparseFcForward:
    def test_onehot_selects_weight_row(self):
        rng = np.random.default_rng(0)
        p = make_params(rng, 8, 3)
        v = csr_from_rows([[(5, 1.0)]], dim=8)
        npt.assert_allclose(sparse_fc_forward(v, p), (p.weights[5] + p.bias)[None], atol=1e-15)

    def test_empty_row_gives_bias(self):
        rng = np.random.default_rng(1)
        p = make_params(rng, 8, 3)
        v = csr_from_rows([[]], dim=8)
        npt.assert_array_equal(sparse_fc_forward(v, p), p.bias[None])

    def test_dim_mismatch(self):
        rng = np.random.default_rng(2)
        p = make_params(rng, 8, 3)
        with pytest.raises(DimensionError):
            sparse_fc_forward(csr_from_rows([[(0, 1.0)]], dim=9), p)

    def test_matches_dense_path(self):
        rng = np.random.default_rng(3)
        p = make_params(rng, 40, 6)
        v = csr_from_rows(random_rows(rng, 12, 40, 5), 40)
        want = dense_fc_forward(v.to_dense(), p)
        npt.assert_allclose(sparse_fc_forward(v, p), want, atol=1e-12)


class TestSparseFcBackward:
    def test_zero_grad_out(self):
        rng = np.random.default_rng(0)
        p = make_params(rng, 8, 3)
        v = csr_from_rows(random_rows(rng, 4, 8, 2), 8)
        sparse_fc_backward(v, p, np.zeros((4, 3)))
        npt.assert_array_equal(p.grad_weights, 0.0)
        npt.assert_array_equal(p.grad_bias, 0.0)

    def test_onehot_touches_one_row(self):
        rng = np.random.default_rng(1)
        p = make_params(rng, 8, 3)
        v = csr_from_rows([[(6, 1.0)]], dim=8)
        g = rng.normal(size=(1, 3))
        sparse_fc_backward(v, p, g)
        npt.assert_allclose(p.grad_weights[6], g[0], atol=1e-15)
        touched = np.abs(p.grad_weights).sum(axis=1) > 0
        assert touched.sum() == 1

    def test_matches_dense_path(self):
        rng = np.random.default_rng(2)
        for trial in range(10):
            p_sparse = make_params(rng, 30, 4)
            p_dense = LayerParams(weights=p_sparse.weights.copy(), bias=p_sparse.bias.copy())
            v = csr_from_rows(random_rows(rng, 9, 30, 3), 30)
            g = rng.normal(size=(9, 4))
            sparse_fc_backward(v, p_sparse, g)
            dense_fc_backward(v.to_dense(), p_dense, g)
            npt.assert_allclose(p_sparse.grad_weights, p_dense.grad_weights, atol=1e-12)
            npt.assert_allclose(p_sparse.grad_bias, p_dense.grad_bias, atol=1e-12)


def test_forward_backward_equivalence_many_batches():
    """Sparse and dense paths agree elementwise over random batches."""
    rng = np.random.default_rng(42)
    for trial in range(25):
        dim = int(rng.integers(10, 80))
        out = int(rng.integers(1, 8))
        rows = int(rng.integers(1, 20))
        nnz = int(rng.integers(1, min(6, dim)))
        p_s = make_params(rng, dim, out)
        p_d = LayerParams(weights=p_s.weights.copy(), bias=p_s.bias.copy())
        v = csr_from_rows(random_rows(rng, rows, dim, nnz), dim)
        g = rng.normal(size=(rows, out))
        npt.assert_allclose(sparse_fc_forward(v, p_s), dense_fc_forward(v.to_dense(), p_d), atol=1e-12)
        sparse_fc_backward(v, p_s, g)
        dense_fc_backward(v.to_dense(), p_d, g)
        npt.assert_allclose(p_s.grad_weights, p_d.grad_weights, atol=1e-12)
        npt.assert_allclose(p_s.grad_bias, p_d.grad_bias, atol=1e-12)
