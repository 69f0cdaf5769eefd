import warnings

import numpy as np
import pytest

from rlednet import tensor as T
from rlednet.lsrb import RankWarning, init_lsrb, lsrb_forward, low_rank_project, shallow_extract, subspace_reconstruct
from rlednet.params import ParamBuilder, ParamTree
from rlednet.tensor import DimensionError, Tensor


def params_for(c=8, r=2, seed=0, dtype=np.float64, enable=True):
    b = ParamBuilder(seed, dtype)
    init_lsrb(b, "lsrb", c, r, enable)
    return b.tree


def randomised(tree, rng, scale=0.3):
    return ParamTree((k, Tensor(v.data + rng.normal(0, scale, v.shape).astype(v.dtype), requires_grad=True)) for k, v in tree.items())


def test_shallow_zero_weights():
    p = params_for()
    for t in p.values():
        t.data[...] = 0.0
    out = shallow_extract(Tensor(np.random.default_rng(0).uniform(size=(3, 8, 8))), p)
    np.testing.assert_array_equal(out.data, 0.0)


def test_shallow_shape():
    p = params_for(c=32, r=8, dtype=np.float32)
    assert shallow_extract(Tensor(np.zeros((3, 64, 64), np.float32)), p).shape == (32, 64, 64)


def test_shallow_channel_error():
    with pytest.raises(DimensionError):
        shallow_extract(Tensor(np.zeros((4, 8, 8))), params_for())


def test_shallow_gradient():
    rng = np.random.default_rng(1)
    p = randomised(params_for(c=4), rng)
    x = Tensor(rng.uniform(size=(3, 5, 5)), requires_grad=True)
    r = rng.normal(size=(4, 5, 5))
    w, b = p["lsrb.shallow.weight"], p["lsrb.shallow.bias"]

    def f(x, w, b):
        return T.tsum(shallow_extract(x, ParamTree({"lsrb.shallow.weight": w, "lsrb.shallow.bias": b})) * r)

    assert T.grad_check(f, [x, w, b]) < 1e-5


def test_forward_shape_default_sizes():
    p = params_for(c=32, r=8, dtype=np.float32)
    x = Tensor(np.random.default_rng(2).uniform(size=(3, 64, 64)).astype(np.float32))
    assert lsrb_forward(x, p, 8).shape == (32, 64, 64)


@pytest.mark.parametrize("seed", range(10))
def test_rank_bound_f64(seed):
    rng = np.random.default_rng(seed)
    p = randomised(params_for(c=12, r=3, seed=seed), rng)
    out = lsrb_forward(Tensor(rng.uniform(size=(3, 10, 10))), p, 3)
    s = np.linalg.svd(out.data.reshape(12, -1).T, compute_uv=False)
    assert s[3] / s[0] <= 1e-10


def test_rank_bound_batched():
    rng = np.random.default_rng(3)
    p = randomised(params_for(c=8, r=2), rng)
    out = lsrb_forward(Tensor(rng.uniform(size=(3, 3, 8, 8))), p, 2)
    for img in out.data:
        s = np.linalg.svd(img.reshape(8, -1).T, compute_uv=False)
        assert s[2] / s[0] <= 1e-10


def test_full_rank_reconstruction_is_exact():
    # r = min(hw, c) = hw, orthonormal U rows and V = U F reproduce F exactly
    rng = np.random.default_rng(4)
    hw, c = 6, 9
    f = rng.normal(size=(hw, c))
    q, _ = np.linalg.qr(rng.normal(size=(hw, hw)))
    out = subspace_reconstruct(Tensor(q.T), Tensor(f))
    np.testing.assert_allclose(out.data, f, atol=1e-11)


def test_rank_warning_when_bound_vacuous():
    p = params_for(c=4, r=4)
    with pytest.warns(RankWarning):
        low_rank_project(Tensor(np.ones((4, 4, 4))), p, 4)


def test_no_warning_when_rank_small():
    p = params_for(c=8, r=2)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        low_rank_project(Tensor(np.random.default_rng(5).normal(size=(8, 8, 8))), p, 2)


def test_disabled_returns_shallow_bitwise():
    rng = np.random.default_rng(6)
    p = params_for(c=8, r=2)
    x = Tensor(rng.uniform(size=(3, 8, 8)))
    np.testing.assert_array_equal(lsrb_forward(x, p, 2, enable=False).data, shallow_extract(x, p).data)


def test_disabled_has_no_projection_params():
    assert set(params_for(enable=False)) == {"lsrb.shallow.weight", "lsrb.shallow.bias"}


def test_f_u_source_requires_r_equal_c():
    p = params_for(c=8, r=2)
    with pytest.raises(ValueError):
        low_rank_project(Tensor(np.ones((8, 8, 8))), p, 2, v_source="F_U")


def test_f_u_source_runs_when_r_equals_c():
    rng = np.random.default_rng(7)
    p = randomised(params_for(c=4, r=4), rng)
    with pytest.warns(RankWarning):
        out = low_rank_project(Tensor(rng.normal(size=(4, 8, 8))), p, 4, v_source="F_U")
    assert out.shape == (4, 8, 8)


def test_invalid_rank():
    with pytest.raises(ValueError):
        low_rank_project(Tensor(np.ones((4, 4, 4))), params_for(c=4), 0)


def test_gradient_whole_block():
    rng = np.random.default_rng(8)
    p = randomised(params_for(c=5, r=2), rng)
    names = list(p)
    x = Tensor(rng.uniform(size=(3, 4, 4)), requires_grad=True)
    r = rng.normal(size=(5, 4, 4))

    def f(x, *ps):
        return T.tsum(lsrb_forward(x, ParamTree(zip(names, ps)), 2) * r)

    assert T.grad_check(f, [x] + [p[k] for k in names], max_elements=150) < 1e-4


def test_resolution_invariant_scale():
    # unit-norm U rows keep the output magnitude comparable across sizes
    rng = np.random.default_rng(9)
    p = randomised(params_for(c=8, r=2), rng)
    small = lsrb_forward(Tensor(np.full((3, 8, 8), 0.5)), p, 2).data
    large = lsrb_forward(Tensor(np.full((3, 32, 32), 0.5)), p, 2).data
    ratio = np.abs(large).mean() / np.abs(small).mean()
    assert 0.1 < ratio < 10
