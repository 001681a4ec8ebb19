"""Real spherical harmonics up to degree 3 (splatting sign convention)."""
import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
      -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


def _check_degree(degree):
    if degree not in (0, 1, 2, 3):
        raise ValueError(f"SH degree must be in 0..3, got {degree}")


def sh_basis(dirs, degree):
    """Basis values, shape (..., (degree+1)**2), for unit directions."""
    _check_degree(degree)
    dirs = np.asarray(dirs, dtype=float)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full(x.shape, C0)]
    if degree >= 1:
        out += [-C1 * y, C1 * z, -C1 * x]
    if degree >= 2:
        xx, yy, zz, xy, yz, xz = x * x, y * y, z * z, x * y, y * z, x * z
        out += [C2[0] * xy, C2[1] * yz, C2[2] * (2 * zz - xx - yy), C2[3] * xz, C2[4] * (xx - yy)]
    if degree >= 3:
        out += [C3[0] * y * (3 * xx - yy), C3[1] * xy * z, C3[2] * y * (4 * zz - xx - yy),
                C3[3] * z * (2 * zz - 3 * xx - 3 * yy), C3[4] * x * (4 * zz - xx - yy),
                C3[5] * z * (xx - yy), C3[6] * x * (xx - 3 * yy)]
    return np.stack(out, axis=-1)


def sh_basis_grad(dirs, degree):
    """d basis / d dir, shape (..., (degree+1)**2, 3)."""
    _check_degree(degree)
    dirs = np.asarray(dirs, dtype=float)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        rows += [(zero, -C1 + zero, zero), (zero, zero, C1 + zero), (-C1 + zero, zero, zero)]
    if degree >= 2:
        rows += [(C2[0] * y, C2[0] * x, zero),
                 (zero, C2[1] * z, C2[1] * y),
                 (-2 * C2[2] * x, -2 * C2[2] * y, 4 * C2[2] * z),
                 (C2[3] * z, zero, C2[3] * x),
                 (2 * C2[4] * x, -2 * C2[4] * y, zero)]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        rows += [(C3[0] * 6 * x * y, C3[0] * (3 * xx - 3 * yy), zero),
                 (C3[1] * y * z, C3[1] * x * z, C3[1] * x * y),
                 (C3[2] * -2 * x * y, C3[2] * (4 * zz - xx - 3 * yy), C3[2] * 8 * y * z),
                 (C3[3] * -6 * x * z, C3[3] * -6 * y * z, C3[3] * (6 * zz - 3 * xx - 3 * yy)),
                 (C3[4] * (4 * zz - 3 * xx - yy), C3[4] * -2 * x * y, C3[4] * 8 * x * z),
                 (C3[5] * 2 * x * z, C3[5] * -2 * y * z, C3[5] * (xx - yy)),
                 (C3[6] * (3 * xx - 3 * yy), C3[6] * -6 * x * y, zero)]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def sh_to_color(sh_coeffs, view_dir, degree=None):
    """Evaluate SH colour, add 0.5 and clamp at zero.

    ``sh_coeffs`` is (..., M, 3) with M >= (degree+1)**2; extra
    coefficients beyond the active degree are ignored.
    """
    sh_coeffs = np.asarray(sh_coeffs, dtype=float)
    if degree is None:
        degree = int(round(np.sqrt(sh_coeffs.shape[-2]))) - 1
    _check_degree(degree)
    n = (degree + 1) ** 2
    if sh_coeffs.shape[-2] < n:
        raise ValueError("not enough SH coefficients for the requested degree")
    basis = sh_basis(view_dir, degree)
    raw = np.einsum("...k,...kc->...c", basis, sh_coeffs[..., :n, :])
    return np.maximum(raw + 0.5, 0.0)


def sh_to_color_vjp(sh_coeffs, view_dir, degree, grad_color):
    """Backward of :func:`sh_to_color`; returns (grad_sh, grad_view_dir)."""
    sh_coeffs = np.asarray(sh_coeffs, dtype=float)
    n = (degree + 1) ** 2
    basis = sh_basis(view_dir, degree)
    raw = np.einsum("...k,...kc->...c", basis, sh_coeffs[..., :n, :])
    g = np.where(raw + 0.5 > 0.0, grad_color, 0.0)
    grad_sh = np.zeros_like(sh_coeffs)
    grad_sh[..., :n, :] = basis[..., :, None] * g[..., None, :]
    dbasis = sh_basis_grad(view_dir, degree)
    gb = np.einsum("...kc,...c->...k", sh_coeffs[..., :n, :], g)
    grad_dir = np.einsum("...k,...kd->...d", gb, dbasis)
    return grad_sh, grad_dir
