import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from propalign import aligner as al
from propalign import hand_model as hm
from propalign import predictor as pr
from propalign.errors import ConfigurationError


def trained_like(seed=0, scale=0.05):
    """Parameters whose aligner heads are no longer zero."""
    params = pr.init_params(seed)
    g = torch.Generator().manual_seed(seed)
    for net in (pr.ROOT_ALIGNER, pr.ROT_ALIGNER):
        for part in ("weight", "bias"):
            t = params[f"{net}.2.{part}"]
            params[f"{net}.2.{part}"] = torch.randn(t.shape, generator=g, dtype=torch.float64) * scale
        params[f"{net}.0.bias"] = torch.randn(params[f"{net}.0.bias"].shape, generator=g, dtype=torch.float64) * 0.1
    return params


def _numpy_residual_mlp(params, net, x):
    w = [params[f"{net}.{i}.weight"].numpy() for i in range(3)]
    b = [params[f"{net}.{i}.bias"].numpy() for i in range(3)]
    h1 = np.maximum(0.0, x @ w[0] + b[0])
    h2 = np.maximum(0.0, h1 @ w[1] + b[1]) + h1
    return h2 @ w[2] + b[2]


def test_align_shape_is_a_copy():
    for beta in (np.zeros(10), np.ones(10) / np.sqrt(10)):
        assert al.align_shape(beta) is beta


def test_zero_heads_give_identity(rng):
    params = pr.init_params(0)
    r = rng.normal(size=3)
    theta = rng.normal(size=48)
    for _ in range(3):
        assert torch.equal(al.align_root(r, rng.normal(size=64), params), torch.tensor(r))
        assert torch.equal(al.align_pose(theta, rng.normal(size=64), params), torch.tensor(theta))


def test_residual_identity_is_structural(rng):
    params = trained_like(1)
    r, dz = torch.tensor(rng.normal(size=3)), torch.tensor(rng.normal(size=64))
    out = al.align_root(r, dz, params)
    phi = al.root_displacement(r, dz, params)
    assert torch.equal(out, r + phi)
    assert torch.allclose(out - r, phi, atol=1e-15, rtol=0)
    theta = torch.tensor(rng.normal(size=48))
    out = al.align_pose(theta, dz, params)
    assert torch.equal(out, theta + al.pose_offset(theta, dz, params))


def test_align_root_matches_independent_forward_pass():
    params = trained_like(2)
    r = np.array([0.0, 0.0, 0.5])
    dz = np.zeros(64)
    expected = r + _numpy_residual_mlp(params, pr.ROOT_ALIGNER, np.concatenate([r, dz]))
    np.testing.assert_allclose(al.align_root(r, dz, params).numpy(), expected, atol=1e-14)
    theta = np.linspace(-0.5, 0.5, 48)
    expected = theta + np.tanh(_numpy_residual_mlp(params, pr.ROT_ALIGNER, np.concatenate([theta, dz])))
    np.testing.assert_allclose(al.align_pose(theta, dz, params).numpy(), expected, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 50.0))
def test_pose_offset_bounded_by_one_radian(seed, scale):
    params = trained_like(seed % 7, scale=scale)
    rng = np.random.default_rng(seed)
    theta = rng.normal(0.0, 2.0, (4, 48))
    dz = rng.normal(0.0, 10.0, (4, 64))
    off = al.align_pose(theta, dz, params) - torch.tensor(theta)
    assert float(off.abs().max()) < 1.0 + 1e-12


def test_propagate_identity_at_init_and_shape_copy(rng):
    params = pr.init_params(0)
    gt = pr.Annotation(rng.normal(size=3), rng.normal(size=48), rng.normal(size=10))
    z_s = pr.encode(rng.normal(size=63), params)
    z_u = pr.encode(rng.normal(size=63), params)
    for zu in (z_s, z_u):
        out = al.propagate(gt, z_s, zu, params)
        np.testing.assert_array_equal(out.root.numpy(), gt.root)
        np.testing.assert_array_equal(out.pose.numpy(), gt.pose)
        np.testing.assert_array_equal(out.beta.numpy(), gt.beta)
    out = al.propagate(gt, z_s, z_u, trained_like(3))
    assert out.pose.shape == (48,)
    np.testing.assert_array_equal(out.beta.numpy(), gt.beta)


def test_dimension_mismatch():
    with pytest.raises(ConfigurationError):
        al.align_pose(np.zeros(45), np.zeros(64), pr.init_params(0))


def test_aligned_joint_gradients_match_finite_differences(spec, rng):
    params = trained_like(4, scale=0.01)
    names = [f"{pr.ROOT_ALIGNER}.2.weight", f"{pr.ROT_ALIGNER}.2.bias", f"{pr.ROT_ALIGNER}.0.bias"]
    r = torch.tensor([0.01, 0.0, 0.5])
    theta = torch.tensor(rng.normal(0.0, 0.3, 48))
    beta = torch.tensor(rng.normal(size=10))
    dz = torch.tensor(rng.normal(size=64))

    def f(*tensors):
        p = dict(params)
        p.update(zip(names, tensors))
        root = al.align_root(r, dz, p)
        pose = al.align_pose(theta, dz, p)
        return hm.forward(beta, pose, root, spec, with_vertices=False).joints

    inputs = tuple(params[n].clone().requires_grad_(True) for n in names)
    assert torch.autograd.gradcheck(f, inputs, eps=1e-6, atol=1e-7, rtol=1e-4)
