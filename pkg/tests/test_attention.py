"""Tests for the residual channel gate and global max pooling."""

import csv

import numpy as np
import pytest

from pointcloud_cil import nncore
from pointcloud_cil.attention import AttentionConfig, attend, export_attention_csv, global_pool, init_attention
from pointcloud_cil.errors import ConfigError, DimensionError
from pointcloud_cil.nncore import ParamSet, Tensor


def make_params(d: int = 4, r: int = 2, seed: int = 0) -> ParamSet:
    params = ParamSet()
    init_attention(params, AttentionConfig(d, r), np.random.default_rng(seed))
    return params


def test_zero_weights_give_half_gate():
    params = make_params()
    for tensor in params.values():
        tensor.data[...] = 0.0
    f_g = np.random.default_rng(1).standard_normal((3, 4))
    f_p, gate = attend(Tensor(f_g), params)
    assert np.all(gate.data == 0.5)
    assert np.allclose(f_p.data, 1.5 * f_g, atol=0)


def test_zero_input_stays_zero():
    f_p, _ = attend(Tensor(np.zeros((5, 4))), make_params(seed=2))
    assert not f_p.data.any()


def test_matches_step_by_step_evaluation():
    params = make_params(seed=3)
    f_g = np.random.default_rng(4).standard_normal((3, 4))
    down = np.maximum(f_g @ params["attention.down.W"].data + params["attention.down.b"].data, 0.0)
    up = down @ params["attention.up.W"].data + params["attention.up.b"].data
    gate = 1.0 / (1.0 + np.exp(-up))
    f_p, A = attend(Tensor(f_g), params)
    assert np.allclose(A.data, gate, atol=1e-12)
    assert np.allclose(f_p.data, gate * f_g + f_g, atol=1e-12)


def test_gate_range_and_exact_residual_form():
    params = make_params(seed=5)
    f_g = np.random.default_rng(6).standard_normal((8, 4)) * 3
    f_p, gate = attend(Tensor(f_g), params)
    assert np.all((gate.data > 0) & (gate.data < 1))
    assert np.array_equal(f_p.data, (1.0 + gate.data) * f_g)


def test_row_permutation_equivariance():
    params = make_params(seed=7)
    rng = np.random.default_rng(8)
    f_g = rng.standard_normal((6, 4))
    perm = rng.permutation(6)
    f_p, gate = attend(Tensor(f_g), params)
    f_p2, gate2 = attend(Tensor(f_g[perm]), params)
    assert np.allclose(f_p2.data, f_p.data[perm], atol=1e-12)
    assert np.allclose(gate2.data, gate.data[perm], atol=1e-12)
    assert np.array_equal(global_pool(f_p2).data, global_pool(f_p).data)


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        attend(Tensor(np.zeros((3, 5))), make_params())


def test_reduction_must_divide_channels():
    with pytest.raises(ConfigError):
        AttentionConfig(64, 3)
    assert AttentionConfig().bottleneck == 16


def test_global_pool_examples():
    row = np.array([[0.5, -1.0, 2.0]])
    assert np.array_equal(global_pool(Tensor(row)).data, row[0])
    assert np.array_equal(global_pool(Tensor(np.repeat(row, 4, axis=0))).data, row[0])
    assert global_pool(Tensor([[1.0, 0.0], [0.0, 1.0]])).data.tolist() == [1.0, 1.0]


def test_global_pool_needs_a_structure():
    with pytest.raises(DimensionError):
        global_pool(Tensor(np.zeros((0, 4))))


def test_gradient_check_through_attend_and_pool():
    params = make_params(seed=9)
    rng = np.random.default_rng(10)
    params.add("f_g", rng.standard_normal((5, 4)))
    weights = Tensor(rng.standard_normal(4))

    def loss():
        f_p, _ = attend(params["f_g"], params)
        return nncore.sum_reduce(nncore.mul(global_pool(f_p), weights))

    assert nncore.grad_check(loss, params) < 1e-3


def test_export_csv(tmp_path):
    gate = np.array([[0.25, 0.5], [0.75, 0.125]])
    path = tmp_path / "att.csv"
    export_attention_csv(gate, path)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["structure", "c0", "c1"]
    assert [float(v) for v in rows[2][1:]] == [0.75, 0.125]
