import numpy as np
import pytest

from gentopo.denoiser import ConvDenoiser, _col2im, _im2col, timestep_features
from gentopo.exceptions import InvalidInputError


def _fd_grad(den, params, args, h=1e-5):
    g = np.empty_like(params)
    for i in range(params.size):
        p = params.copy()
        p[i] += h
        lp = den.loss(p, *args)
        p[i] -= 2 * h
        g[i] = (lp - den.loss(p, *args)) / (2 * h)
    return g


@pytest.mark.parametrize("draw", range(3))
def test_gradient_matches_central_differences(draw):
    rng = np.random.default_rng(100 + draw)
    den = ConvDenoiser(2, hidden=4, n_layers=3, t_dim=6, seed=draw)
    params = rng.normal(0, 0.5, den.n_params)
    z = rng.normal(size=(2, 4, 4))
    cond = rng.uniform(size=(2, 2, 4, 4))
    t = np.array([3, 70])
    eps = rng.normal(size=(2, 4, 4))
    _, g = den.loss_and_grad(params, z, t, cond, eps)
    fd = _fd_grad(den, params, (z, t, cond, eps))
    err = np.abs(g - fd)
    assert np.all(err <= 1e-4 * np.maximum(np.abs(g), np.abs(fd)) + 1e-9)


def test_loss_and_grad_loss_matches_forward():
    den = ConvDenoiser(1, hidden=3)
    rng = np.random.default_rng(0)
    z, c, e = rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 1, 5, 3)), rng.normal(size=(2, 5, 3))
    loss, _ = den.loss_and_grad(den.params, z, [1, 2], c, e)
    assert loss == den.loss(den.params, z, [1, 2], c, e)


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(2, 4, 5, 3))
    d = rng.normal(size=(2, 4, 5, 27))
    assert np.sum(_im2col(a) * d) == pytest.approx(np.sum(a * _col2im(d, 3)), rel=1e-12)


def test_output_shape_and_determinism():
    den = ConvDenoiser(3, hidden=5, n_layers=4)
    rng = np.random.default_rng(2)
    z, c = rng.normal(size=(4, 7, 6)), rng.normal(size=(4, 3, 7, 6))
    out = den(z, np.arange(4) + 1, c)
    assert out.shape == z.shape
    assert np.array_equal(out, den(z, np.arange(4) + 1, c))
    assert np.array_equal(ConvDenoiser(3, 5, 4).params, den.params)


def test_timestep_features():
    f = timestep_features(np.array([0, 5]), 8)
    assert f.shape == (2, 8)
    np.testing.assert_allclose(f[0], [0, 0, 0, 0, 1, 1, 1, 1])
    assert np.abs(f).max() <= 1


def test_input_validation():
    den = ConvDenoiser(2, hidden=3)
    with pytest.raises(InvalidInputError):
        den(np.zeros((4, 4)), [1], np.zeros((1, 2, 4, 4)))
    with pytest.raises(InvalidInputError):
        den(np.zeros((1, 4, 4)), [1], np.zeros((1, 3, 4, 4)))
    with pytest.raises(InvalidInputError):
        den(np.zeros((1, 4, 4)), [1], None)
    with pytest.raises(InvalidInputError):
        ConvDenoiser(1, n_layers=1)
