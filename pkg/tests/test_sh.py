import numpy as np
import pytest

from surfel_avatar.sh import C0, sh_basis, sh_basis_grad, sh_to_color, sh_to_color_vjp


def _sphere_quadrature(n=40):
    # Gauss-Legendre in cos(theta), uniform in phi: exact for these polynomial degrees
    x, w = np.polynomial.legendre.leggauss(n)
    phi = np.linspace(0, 2 * np.pi, 2 * n, endpoint=False)
    ct, ph = np.meshgrid(x, phi, indexing="ij")
    st = np.sqrt(1 - ct ** 2)
    dirs = np.stack([st * np.cos(ph), st * np.sin(ph), ct], axis=-1).reshape(-1, 3)
    weights = np.repeat(w, 2 * n) * (np.pi / n)
    return dirs, weights


def test_basis_is_orthonormal():
    dirs, w = _sphere_quadrature()
    B = sh_basis(dirs, 3)
    gram = B.T @ (B * w[:, None])
    assert np.abs(gram - np.eye(16)).max() < 1e-12


@pytest.mark.parametrize("degree", [0, 1, 2, 3])
def test_basis_grad_fd(rng, degree):
    d = rng.normal(size=(6, 3))
    G = sh_basis_grad(d, degree)
    eps = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = eps
        fd = (sh_basis(d + e, degree) - sh_basis(d - e, degree)) / (2 * eps)
        assert np.abs(fd - G[..., k]).max() < 1e-8


def test_dc_only_color():
    sh = np.zeros((1, 16, 3))
    sh[0, 0] = [0.5, 0.0, -0.5] / np.float64(C0)
    c = sh_to_color(sh, np.array([[0.0, 0.0, 1.0]]), 3)
    assert np.allclose(c, [[1.0, 0.5, 0.0]])


def test_vjp_fd(rng):
    sh = rng.normal(0, 0.3, (4, 16, 3))
    d = rng.normal(size=(4, 3))
    g = rng.normal(size=(4, 3))
    gsh, gd = sh_to_color_vjp(sh, d, 3, g)
    eps = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = eps
        fd = np.sum(g * (sh_to_color(sh, d + e, 3) - sh_to_color(sh, d - e, 3)), axis=1) / (2 * eps)
        assert np.abs(fd - gd[:, k]).max() < 1e-7
    e = np.zeros_like(sh)
    e[2, 5, 1] = eps
    fd = np.sum(g * (sh_to_color(sh + e, d, 3) - sh_to_color(sh - e, d, 3))) / (2 * eps)
    assert abs(fd - gsh[2, 5, 1]) < 1e-7


def test_bad_degree():
    with pytest.raises(ValueError):
        sh_basis(np.zeros((1, 3)), 4)
    with pytest.raises(ValueError):
        sh_to_color(np.zeros((1, 4, 3)), np.zeros((1, 3)), 2)
