"""Diffeomorphic SO(3) flow layers: Mobius coupling, quaternion affine, permutation.

Each layer maps rotations to rotations with an exact log-determinant of the
induced map with respect to normalized Haar measure.  The kernels operate on
quaternion arrays and accept either plain numpy arrays or autodiff Vars, so
the same code serves sampling, density evaluation, and training.

The Mobius coupling keeps one matrix column fixed and moves the other along
the unit circle perpendicular to it.  Internally the update is realized as a
right quaternion multiplication by a rotation about the fixed column's body
axis, with the rotation angle supplied by the circle Mobius map.  Written
this way, a zero conditioner output is a bit-exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import so3

__all__ = [
    "OMEGA_MAX",
    "MAX_LOG_SCALE",
    "QuatAffineParams",
    "build_omega",
    "mobius_circle",
    "coupling_forward",
    "coupling_inverse",
    "quat_affine_forward",
    "quat_affine_inverse",
    "couple_quat",
    "affine_quat",
    "affine_params_from_raw",
    "permute_pose",
    "inverse_permutation",
    "compose_permutations",
]

# radial bound of the Mobius parameter inside the open unit disk
OMEGA_MAX = 0.99
# conditioning bound on the affine log singular values
MAX_LOG_SCALE = 5.0

_IDENT_QUAT = np.array([1.0, 0.0, 0.0, 0.0])
_CONJ_SIGNS = np.array([1.0, -1.0, -1.0, -1.0])


def _qcol(q, col):
    """Column ``col`` of the rotation matrix of ``q``; autodiff friendly."""
    w, x, y, z = q[..., 0:1], q[..., 1:2], q[..., 2:3], q[..., 3:4]
    if col == 0:
        parts = [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y + w * z), 2.0 * (x * z - w * y)]
    elif col == 1:
        parts = [2.0 * (x * y - w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z + w * x)]
    else:
        parts = [2.0 * (x * z + w * y), 2.0 * (y * z - w * x), 1.0 - 2.0 * (x * x + y * y)]
    return ad.concat(parts, axis=-1)


def _squash_omega(xi):
    """Map a plane vector to the open disk: radius 0.99 * tanh of its norm."""
    r = ad.clamp(ad.norm(xi, keepdims=True), lo=1e-30)
    return (OMEGA_MAX * ad.tanh(r) / r) * xi


def couple_quat(q, g_out, role, inverse=False, cols=None):
    """Mobius coupling on quaternion states.

    Parameters
    ----------
    q : (..., 4). Unit quaternions.
    g_out : (..., 3). Raw conditioner output; its projection onto the plane
        perpendicular to the fixed column, radially squashed, is the Mobius
        parameter.
    role : 0 or 1. Which matrix column stays fixed; the other column moves
        along the circle perpendicular to it, the third follows by cross
        product.
    inverse : apply the inverse circle map (the map with negated parameter).
    cols : optional precomputed (column 0, column 1) of ``q``.

    Returns
    -------
    (q', logdet) with logdet of the applied map per element.
    """
    if role not in (0, 1):
        raise ValueError("role must be 0 or 1")
    if cols is None:
        cols = (_qcol(q, 0), _qcol(q, 1))
    n = cols[role]
    y = cols[1 - role]

    xi = g_out - n * ad.dot(n, g_out, keepdims=True)
    omega = _squash_omega(xi)
    if inverse:
        omega = omega * (-1.0)

    # circle Mobius map h_w(y) = ((1-|w|^2)/|y-w|^2)(y-w) - w evaluated
    # intrinsically; |y-w|^2 is expanded with |y|=1 so that w=0 gives an
    # exact identity and zero logdet
    wsq = ad.dot(omega, omega)
    s = 1.0 - wsq
    c = ad.dot(omega, y)
    t = ad.dot(omega, ad.cross(n, y))
    denom = (1.0 - 2.0 * c) + wsq
    logdet = ad.log(s) - ad.log(denom)

    ratio = s / denom
    cos_d = ratio * (1.0 - c) - c
    sin_d = -(ratio + 1.0) * t
    delta = ad.atan2(sin_d, cos_d)

    half = 0.5 * delta
    ch, sh = ad.cos(half), ad.sin(half)
    zero = np.zeros(np.shape(ad.value_of(ch)))
    if role == 0:
        g = ad.stack([ch, sh, zero, zero], axis=-1)
    else:
        g = ad.stack([ch, zero, sh, zero], axis=-1)
    return ad.quat_mul(q, g), logdet


def _unit_quat_param(raw):
    v = raw + _IDENT_QUAT
    nn = ad.clamp(ad.norm(v, keepdims=True), lo=1e-12)
    return v / nn


def affine_params_from_raw(raw):
    """Split a raw 20-vector into (u_left, u_right, v_left, v_right, log_sigma).

    The four quaternions are unit by construction (identity plus offset,
    normalized); the log singular values are bounded to [-5, 5] by a tanh.
    A zero raw vector yields the exact neutral transformation.
    """
    u_l = _unit_quat_param(raw[..., 0:4])
    u_r = _unit_quat_param(raw[..., 4:8])
    v_l = _unit_quat_param(raw[..., 8:12])
    v_r = _unit_quat_param(raw[..., 12:16])
    log_sigma = MAX_LOG_SCALE * ad.tanh(raw[..., 16:20] / MAX_LOG_SCALE)
    return u_l, u_r, v_l, v_r, log_sigma


def affine_quat(q, u_l, u_r, v_l, v_r, log_sigma, inverse=False):
    """Quaternion affine map q -> W q / |W q| with W = U diag(exp(log_sigma)) V^T.

    U and V are the SO(4) rotations acting as p -> u_l * p * u_r and
    p -> v_l * p * v_r, so det U = det V = 1 and |det W| is exactly
    exp(sum log_sigma).  The output is re-canonicalized to w >= 0; the
    logdet is that of the induced SO(3) map under normalized Haar measure:
    sum(log_sigma) - 4 log |W q|.
    """
    if inverse:
        # W^-1 = V diag(exp(-log_sigma)) U^T
        t = ad.quat_mul(u_l * _CONJ_SIGNS, ad.quat_mul(q, u_r * _CONJ_SIGNS))
        sig = ad.exp(-log_sigma)
        sign_sum = -1.0
        l, r = v_l, v_r
    else:
        t = ad.quat_mul(v_l * _CONJ_SIGNS, ad.quat_mul(q, v_r * _CONJ_SIGNS))
        sig = ad.exp(log_sigma)
        sign_sum = 1.0
        l, r = u_l, u_r

    ts = sig * t
    out = ad.quat_mul(l, ad.quat_mul(ts, r))
    # |W q|^2 written as 1 + sum (sigma^2 - 1) t^2, exact at neutral sigma
    nsq = 1.0 + ad.dot(sig * sig - 1.0, t * t, keepdims=True)
    q_new = out / ad.sqrt(nsq)
    flip = ad.value_of(q_new)[..., 0:1] >= 0.0
    q_new = ad.where(flip, q_new, -q_new)
    logdet = sign_sum * ad.asum(log_sigma, axis=-1) - 2.0 * ad.log(nsq[..., 0])
    return q_new, logdet


# ---------------------------------------------------------------------------
# rotation-matrix facing API


@dataclass(frozen=True)
class QuatAffineParams:
    """Parameters of one quaternion affine transformation."""

    u_left: np.ndarray
    u_right: np.ndarray
    v_left: np.ndarray
    v_right: np.ndarray
    log_sigma: np.ndarray

    def __post_init__(self):
        for name in ("u_left", "u_right", "v_left", "v_right"):
            q = np.asarray(getattr(self, name), dtype=np.float64)
            if q.shape[-1] != 4 or np.any(np.abs(np.linalg.norm(q, axis=-1) - 1.0) > 1e-9):
                raise ValueError(f"{name} must be a unit quaternion")
            object.__setattr__(self, name, q)
        ls = np.asarray(self.log_sigma, dtype=np.float64)
        if ls.shape[-1] != 4 or np.any(np.abs(ls) > MAX_LOG_SCALE):
            raise ValueError(f"log_sigma must be a 4-vector within +-{MAX_LOG_SCALE}")
        object.__setattr__(self, "log_sigma", ls)

    @classmethod
    def neutral(cls):
        return cls(_IDENT_QUAT, _IDENT_QUAT, _IDENT_QUAT, _IDENT_QUAT, np.zeros(4))

    @classmethod
    def from_raw(cls, raw):
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape[-1] != 20:
            raise ValueError("raw parameter vector must have 20 entries")
        return cls(*affine_params_from_raw(raw))

    def as_matrix(self):
        """The 4x4 matrix W (mainly for verification)."""
        def lmat(p):
            w, x, y, z = p
            return np.array([
                [w, -x, -y, -z],
                [x, w, -z, y],
                [y, z, w, -x],
                [z, -y, x, w],
            ])

        def rmat(p):
            w, x, y, z = p
            return np.array([
                [w, -x, -y, -z],
                [x, w, z, -y],
                [y, -z, w, x],
                [z, y, -x, w],
            ])

        u = lmat(self.u_left) @ rmat(self.u_right)
        v = lmat(self.v_left) @ rmat(self.v_right)
        return u @ np.diag(np.exp(self.log_sigma)) @ v.T


def build_omega(g_out, x_fixed):
    """Mobius parameter in the plane chart perpendicular to ``x_fixed``.

    The raw 3-vector is projected onto the perpendicular plane, expressed in
    the :func:`so3.plane_basis` chart, and radially squashed so its norm
    stays strictly below one.
    """
    g_out = np.asarray(g_out, dtype=np.float64)
    n = np.asarray(x_fixed, dtype=np.float64)
    e1, e2 = so3.plane_basis(n)
    xi = g_out - n * np.sum(n * g_out, axis=-1, keepdims=True)
    chart = np.stack([np.sum(xi * e1, axis=-1), np.sum(xi * e2, axis=-1)], axis=-1)
    return ad.value_of(_squash_omega(chart))


def mobius_circle(x_move, omega, x_fixed):
    """Circle Mobius map of a unit vector perpendicular to ``x_fixed``.

    ``omega`` is a 2-vector in the :func:`so3.plane_basis` chart with norm
    strictly below one.  Returns the moved unit vector (still perpendicular
    to ``x_fixed``) and the log derivative of the induced circle map.
    """
    y = np.asarray(x_move, dtype=np.float64)
    n = np.asarray(x_fixed, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    if np.any(np.linalg.norm(omega, axis=-1) >= 1.0):
        raise ValueError("mobius parameter must lie strictly inside the unit disk")
    if np.any(np.abs(np.sum(y * n, axis=-1)) > 1e-9):
        raise ValueError("moved vector must be perpendicular to the fixed vector")
    e1, e2 = so3.plane_basis(n)
    w3 = omega[..., 0:1] * e1 + omega[..., 1:2] * e2
    wsq = np.sum(w3 * w3, axis=-1)
    s = 1.0 - wsq
    c = np.sum(w3 * y, axis=-1)
    denom = (1.0 - 2.0 * c) + wsq
    out = (s / denom)[..., None] * (y - w3) - w3
    return out, np.log(s) - np.log(denom)


def _pose_to_quat(r):
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-2:] == (3, 3):
        return so3.matrix_to_quat(r), True
    if r.shape[-1] == 4:
        return np.asarray(r, dtype=np.float64), False
    raise ValueError("expected rotation matrices (...,3,3) or quaternions (...,4)")


def coupling_forward(r, cond_out, role=0):
    """Apply the Mobius coupling layer to rotations ``r``.

    ``cond_out`` is the raw conditioner 3-vector (zero gives the identity).
    Returns the transformed rotations and the per-rotation logdet.
    """
    q, was_matrix = _pose_to_quat(r)
    q2, ld = couple_quat(q, np.asarray(cond_out, dtype=np.float64), role)
    return (so3.quat_to_matrix(q2) if was_matrix else so3.canonicalize_quat(q2)), ld


def coupling_inverse(r, cond_out, role=0):
    """Exact inverse of :func:`coupling_forward` for the same conditioner output."""
    q, was_matrix = _pose_to_quat(r)
    q2, ld = couple_quat(q, np.asarray(cond_out, dtype=np.float64), role, inverse=True)
    return (so3.quat_to_matrix(q2) if was_matrix else so3.canonicalize_quat(q2)), ld


def _affine_apply(r, params, inverse):
    q, was_matrix = _pose_to_quat(r)
    wq_sq = _affine_norm_sq(q, params, inverse)
    if np.any(wq_sq < 1e-24):
        raise ValueError("degenerate affine parameters: |W q| vanished")
    q2, ld = affine_quat(q, params.u_left, params.u_right, params.v_left,
                         params.v_right, params.log_sigma, inverse=inverse)
    return (so3.quat_to_matrix(q2) if was_matrix else so3.canonicalize_quat(q2)), ld


def _affine_norm_sq(q, params, inverse):
    if inverse:
        t = ad._quat_mul_raw(params.u_left * _CONJ_SIGNS,
                             ad._quat_mul_raw(q, params.u_right * _CONJ_SIGNS))
        sig = np.exp(-params.log_sigma)
    else:
        t = ad._quat_mul_raw(params.v_left * _CONJ_SIGNS,
                             ad._quat_mul_raw(q, params.v_right * _CONJ_SIGNS))
        sig = np.exp(params.log_sigma)
    return 1.0 + np.sum((sig * sig - 1.0) * t * t, axis=-1)


def quat_affine_forward(r, params):
    """Quaternion affine layer on rotations; see :func:`affine_quat`."""
    return _affine_apply(r, params, inverse=False)


def quat_affine_inverse(r, params):
    """Exact inverse of the quaternion affine layer up to the q ~ -q identification."""
    return _affine_apply(r, params, inverse=True)


# ---------------------------------------------------------------------------
# permutations


def permute_pose(pose, perm):
    """Reorder the manifold axis of a pose; volume preserving (logdet 0).

    ``out[i] = pose[perm[i]]`` along the joint axis, which is axis -3 for
    matrix poses and axis -2 for quaternion poses.
    """
    pose = np.asarray(pose)
    perm = np.asarray(perm)
    if pose.shape[-2:] == (3, 3):
        axis = pose.ndim - 3
    elif pose.shape[-1] == 4:
        axis = pose.ndim - 2
    else:
        raise ValueError("expected a pose of rotation matrices or quaternions")
    if perm.ndim != 1 or pose.shape[axis] != perm.size:
        raise ValueError(f"permutation length {perm.size} does not match pose axis {pose.shape[axis]}")
    if sorted(perm.tolist()) != list(range(perm.size)):
        raise ValueError("not a permutation")
    return np.take(pose, perm, axis=axis)


def inverse_permutation(perm):
    return np.argsort(np.asarray(perm))


def compose_permutations(p, q):
    """Permutation equivalent to applying ``p`` first, then ``q``."""
    p = np.asarray(p)
    q = np.asarray(q)
    return p[q]
