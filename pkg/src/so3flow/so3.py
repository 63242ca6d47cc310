"""Rotation algebra on SO(3).

Rotations are numpy arrays: matrices with shape ``(..., 3, 3)`` and unit
quaternions with shape ``(..., 4)`` in ``(w, x, y, z)`` component order.
Quaternions are kept in canonical form (``w >= 0``, ties broken by the
first nonzero component being positive), so conversions are pure functions.

All densities in this package are taken with respect to the normalized
Haar probability measure on SO(3): the uniform density is identically one.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "MATRIX_TOL",
    "require_rotation",
    "project_to_rotation",
    "canonicalize_quat",
    "matrix_to_quat",
    "quat_to_matrix",
    "sixd_to_matrix",
    "matrix_to_sixd",
    "quat_columns",
    "haar_quat",
    "haar_sample",
    "from_axis_angle",
    "exp_map",
    "log_map",
    "geodesic_distance",
    "quat_geodesic_distance",
    "geodesic_distance_stable",
    "average_rotations",
    "average_quats",
    "plane_basis",
]

MATRIX_TOL = 1e-9


def require_rotation(m, tol=MATRIX_TOL):
    """Validate orthonormality and unit determinant of ``(..., 3, 3)`` input."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-2:] != (3, 3):
        raise ValueError(f"expected (..., 3, 3) matrices, got {m.shape}")
    eye = np.eye(3)
    err = np.abs(np.swapaxes(m, -1, -2) @ m - eye).max()
    if err > tol:
        raise ValueError(f"matrix is not orthonormal (deviation {err:.3e})")
    det_err = np.abs(np.linalg.det(m) - 1.0).max()
    if det_err > tol:
        raise ValueError(f"matrix determinant differs from 1 by {det_err:.3e}")
    return m


def project_to_rotation(m):
    """Nearest rotation matrix in the Frobenius sense (via SVD)."""
    m = np.asarray(m, dtype=np.float64)
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    det = np.linalg.det(r)
    flip = np.where(det < 0.0, -1.0, 1.0)[..., None]
    u = u.copy()
    u[..., :, 2] *= flip
    return u @ vt


def canonicalize_quat(q):
    """Flip sign so the first nonzero component is positive (w >= 0 rule)."""
    q = np.asarray(q, dtype=np.float64)
    sign = np.zeros(q.shape[:-1])
    for k in range(4):
        comp = q[..., k]
        sign = np.where((sign == 0.0) & (comp != 0.0), np.sign(comp), sign)
    sign = np.where(sign == 0.0, 1.0, sign)
    return q * sign[..., None]


def matrix_to_quat(r):
    """Convert ``(..., 3, 3)`` rotation matrices to canonical unit quaternions.

    Uses the largest-pivot variant of the trace method, which is stable for
    all rotation angles including 180 degrees.
    """
    r = np.asarray(r, dtype=np.float64)
    m00, m01, m02 = r[..., 0, 0], r[..., 0, 1], r[..., 0, 2]
    m10, m11, m12 = r[..., 1, 0], r[..., 1, 1], r[..., 1, 2]
    m20, m21, m22 = r[..., 2, 0], r[..., 2, 1], r[..., 2, 2]

    # four candidate pivots; the largest is numerically safe
    tw = 1.0 + m00 + m11 + m22
    tx = 1.0 + m00 - m11 - m22
    ty = 1.0 - m00 + m11 - m22
    tz = 1.0 - m00 - m11 + m22

    def piv(t):
        return 0.5 * np.sqrt(np.maximum(t, 0.0))

    w_, x_, y_, z_ = piv(tw), piv(tx), piv(ty), piv(tz)
    with np.errstate(divide="ignore", invalid="ignore"):
        qw = np.stack([w_, (m21 - m12) / (4 * w_), (m02 - m20) / (4 * w_), (m10 - m01) / (4 * w_)], axis=-1)
        qx = np.stack([(m21 - m12) / (4 * x_), x_, (m01 + m10) / (4 * x_), (m02 + m20) / (4 * x_)], axis=-1)
        qy = np.stack([(m02 - m20) / (4 * y_), (m01 + m10) / (4 * y_), y_, (m12 + m21) / (4 * y_)], axis=-1)
        qz = np.stack([(m10 - m01) / (4 * z_), (m02 + m20) / (4 * z_), (m12 + m21) / (4 * z_), z_], axis=-1)

    choice = np.argmax(np.stack([tw, tx, ty, tz], axis=-1), axis=-1)[..., None]
    q = np.choose(np.broadcast_to(choice, qw.shape), [qw, qx, qy, qz])
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return canonicalize_quat(q)


def quat_to_matrix(q, tol=1e-6):
    """Convert unit quaternions to rotation matrices; q and -q agree."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != 4:
        raise ValueError(f"expected (..., 4) quaternions, got {q.shape}")
    nrm = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(nrm - 1.0) > tol):
        raise ValueError("quaternion norm deviates from 1 by more than tolerance")
    q = q / nrm[..., None]
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def quat_columns(q, col):
    """Column ``col`` of the rotation matrix of ``q`` without forming it."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    if col == 0:
        return np.stack([1 - 2 * (y * y + z * z), 2 * (x * y + w * z), 2 * (x * z - w * y)], axis=-1)
    if col == 1:
        return np.stack([2 * (x * y - w * z), 1 - 2 * (x * x + z * z), 2 * (y * z + w * x)], axis=-1)
    if col == 2:
        return np.stack([2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    raise ValueError("col must be 0, 1, or 2")


def sixd_to_matrix(s):
    """Build a rotation from the 6D representation ``(a, b)``.

    The first column is ``a`` normalized, the second is the Gram-Schmidt
    complement of ``b``, the third their cross product.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != 6:
        raise ValueError(f"expected (..., 6) input, got {s.shape}")
    a, b = s[..., :3], s[..., 3:]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(na < 1e-12):
        raise ValueError("degenerate 6D input: first vector is zero")
    c0 = a / na
    b_perp = b - c0 * np.sum(c0 * b, axis=-1, keepdims=True)
    nb = np.linalg.norm(b_perp, axis=-1, keepdims=True)
    if np.any(nb < 1e-12):
        raise ValueError("degenerate 6D input: second vector is parallel to the first")
    c1 = b_perp / nb
    c2 = np.cross(c0, c1)
    return np.stack([c0, c1, c2], axis=-1)


def matrix_to_sixd(r):
    """First two columns of a rotation matrix, concatenated to ``(..., 6)``."""
    r = np.asarray(r, dtype=np.float64)
    return np.concatenate([r[..., :, 0], r[..., :, 1]], axis=-1)


def haar_quat(rng, shape=()):
    """Canonical unit quaternions distributed by normalized Haar measure.

    Drawn as normalized 4-dimensional Gaussians, which is exactly uniform
    on the 3-sphere and hence Haar on SO(3).
    """
    if isinstance(shape, int):
        shape = (shape,)
    g = rng.standard_normal(tuple(shape) + (4,))
    g = g / np.linalg.norm(g, axis=-1, keepdims=True)
    return canonicalize_quat(g)


def haar_sample(rng, shape=()):
    """Haar-uniform rotation matrices of shape ``shape + (3, 3)``."""
    return quat_to_matrix(haar_quat(rng, shape))


def from_axis_angle(axis, angle):
    """Rotation matrix about a (not necessarily unit) axis by ``angle`` radians."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    angle = np.asarray(angle, dtype=np.float64)
    half = 0.5 * angle
    q = np.concatenate([np.cos(half)[..., None], np.sin(half)[..., None] * axis], axis=-1)
    return quat_to_matrix(q)


def exp_map(v):
    """Rodrigues map: tangent vector ``(..., 3)`` to rotation matrix."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1)
    tiny = theta < 1e-12
    safe = np.where(tiny, 1.0, theta)
    axis = v / safe[..., None]
    r = from_axis_angle(np.where(tiny[..., None], np.array([1.0, 0.0, 0.0]), axis),
                        np.where(tiny, 0.0, theta))
    return r


def log_map(r):
    """Axis-angle vector of a rotation matrix (angle in [0, pi])."""
    r = np.asarray(r, dtype=np.float64)
    cos_t = np.clip((np.trace(r, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    skew = np.stack(
        [r[..., 2, 1] - r[..., 1, 2], r[..., 0, 2] - r[..., 2, 0], r[..., 1, 0] - r[..., 0, 1]],
        axis=-1,
    )
    sin_t = np.sin(theta)
    near_pi = theta > np.pi - 1e-6
    tiny = theta < 1e-8
    scale = np.where(tiny | near_pi, 0.5, theta / np.maximum(2.0 * sin_t, 1e-300))
    v = scale[..., None] * skew
    if np.any(near_pi):
        # near pi the skew part vanishes; recover the axis from the symmetric part
        q = matrix_to_quat(r)
        axis = q[..., 1:] / np.maximum(np.linalg.norm(q[..., 1:], axis=-1, keepdims=True), 1e-300)
        v = np.where(near_pi[..., None], axis * theta[..., None], v)
    return v


def geodesic_distance(r1, r2):
    """Intrinsic SO(3) distance ``arccos((tr(r1^T r2) - 1) / 2)`` in [0, pi]."""
    r1 = np.asarray(r1, dtype=np.float64)
    r2 = np.asarray(r2, dtype=np.float64)
    tr = np.einsum("...ij,...ij->...", r1, r2)
    return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))


def quat_geodesic_distance(q1, q2):
    """Same metric evaluated on quaternions: ``2 arccos |<q1, q2>|``."""
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    inner = np.abs(np.sum(q1 * q2, axis=-1))
    return 2.0 * np.arccos(np.clip(inner, -1.0, 1.0))


def geodesic_distance_stable(r1, r2):
    """Geodesic distance via ``2 arcsin(|r1 - r2|_F / sqrt(8))``.

    Algebraically identical to :func:`geodesic_distance` but free of the
    arccos cancellation near zero, so distances far below 1e-8 are resolved.
    Used when measuring roundtrip errors.
    """
    r1 = np.asarray(r1, dtype=np.float64)
    r2 = np.asarray(r2, dtype=np.float64)
    d = np.sqrt(np.sum((r1 - r2) ** 2, axis=(-2, -1)))
    return 2.0 * np.arcsin(np.clip(d / np.sqrt(8.0), -1.0, 1.0))


def average_quats(qs):
    """Chordal L2 mean: principal eigenvector of the outer-product accumulator."""
    qs = canonicalize_quat(np.asarray(qs, dtype=np.float64))
    if qs.ndim < 2 or qs.shape[-1] != 4 or qs.shape[-2] == 0:
        raise ValueError("expected a non-empty (..., k, 4) quaternion stack")
    acc = np.einsum("...ki,...kj->...ij", qs, qs) / qs.shape[-2]
    _, vecs = np.linalg.eigh(acc)
    mean = vecs[..., :, -1]
    return canonicalize_quat(mean)


def average_rotations(rs):
    """Chordal mean of a non-empty stack of rotation matrices."""
    rs = np.asarray(rs, dtype=np.float64)
    if rs.ndim < 3 or rs.shape[-3] == 0:
        raise ValueError("expected a non-empty (..., k, 3, 3) rotation stack")
    return quat_to_matrix(average_quats(matrix_to_quat(rs)))


def plane_basis(n, tol=1e-9):
    """Deterministic orthonormal basis of the plane perpendicular to unit ``n``.

    The reference axis is chosen from the largest-magnitude component of
    ``n`` (ties resolved toward the lowest index), so the basis varies
    continuously away from component ties and ``(e1, e2, n)`` is
    right-handed.
    """
    n = np.asarray(n, dtype=np.float64)
    if np.any(np.abs(np.linalg.norm(n, axis=-1) - 1.0) > tol):
        raise ValueError("plane_basis requires a unit vector")
    # argmax returns the lowest index on ties
    k = np.argmax(np.abs(n), axis=-1)
    t = np.zeros_like(n)
    idx = (k + 1) % 3
    np.put_along_axis(t, idx[..., None], 1.0, axis=-1)
    e1 = np.cross(n, t)
    e1 = e1 / np.linalg.norm(e1, axis=-1, keepdims=True)
    e2 = np.cross(n, e1)
    return e1, e2
