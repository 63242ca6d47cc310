"""Synthetic pose distributions with exact log-densities, plus dataset I/O.

The ground-truth family is a mixture of uniform geodesic balls: every joint
has K mode rotations with ball radii, and the per-joint component indices
are coupled by a Markov chain, which creates cross-joint dependence while
keeping the exact joint density computable by the forward (sum-product)
recursion.

Under normalized Haar measure a geodesic ball of radius r has mass
``(r - sin r) / pi``, so the in-ball density is ``pi / (r - sin r)`` and
both sampling and density evaluation are closed form.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from . import so3
from .autodiff import _quat_mul_raw

__all__ = [
    "SyntheticPriorSpec",
    "PoseDataset",
    "ball_volume",
    "chain_marginals",
    "generate",
    "oracle_log_prob",
    "write_dataset",
    "read_dataset",
    "save_prior_spec",
    "load_prior_spec",
]

_MAGIC = b"SO3DSET1"


def ball_volume(r):
    """Haar mass of a geodesic ball of radius ``r``."""
    r = np.asarray(r, dtype=np.float64)
    return (r - np.sin(r)) / np.pi


@dataclass(frozen=True)
class SyntheticPriorSpec:
    """Markov-coupled mixture of uniform geodesic balls, one set per joint.

    ``modes``: (N, K, 4) canonical unit quaternions.  ``radii``: (N, K) in
    (0, pi].  ``transition``: (K, K) row-stochastic coupling of joint j's
    component to joint j-1's.  ``initial``: (K,) weights for joint 0.
    """

    modes: np.ndarray
    radii: np.ndarray
    transition: np.ndarray
    initial: np.ndarray

    def __post_init__(self):
        modes = np.asarray(self.modes, dtype=np.float64)
        radii = np.asarray(self.radii, dtype=np.float64)
        transition = np.asarray(self.transition, dtype=np.float64)
        initial = np.asarray(self.initial, dtype=np.float64)
        if modes.ndim != 3 or modes.shape[-1] != 4:
            raise ValueError("modes must have shape (N, K, 4)")
        n, k = modes.shape[:2]
        if radii.shape != (n, k):
            raise ValueError("radii must have shape (N, K)")
        if np.any(radii <= 0.0) or np.any(radii > np.pi):
            raise ValueError("radii must lie in (0, pi]")
        if transition.shape != (k, k) or initial.shape != (k,):
            raise ValueError("transition must be (K, K) and initial (K,)")
        if np.any(transition < 0.0) or np.any(initial < 0.0):
            raise ValueError("weights must be non-negative")
        if np.any(np.abs(transition.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("transition rows must sum to 1")
        if abs(initial.sum() - 1.0) > 1e-12:
            raise ValueError("initial weights must sum to 1")
        nrm = np.linalg.norm(modes, axis=-1)
        if np.any(np.abs(nrm - 1.0) > 1e-9):
            raise ValueError("modes must be unit quaternions")
        object.__setattr__(self, "modes", so3.canonicalize_quat(modes))
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "initial", initial)

    @property
    def n_joints(self):
        return self.modes.shape[0]

    @property
    def n_components(self):
        return self.modes.shape[1]

    def digest(self):
        doc = _spec_doc(self)
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class PoseDataset:
    """Poses with optional oracle log-densities, keypoints, and masks."""

    poses: np.ndarray
    log_density: np.ndarray | None = None
    keypoints: np.ndarray | None = None
    masks: np.ndarray | None = None
    seed: int = 0
    spec_digest: str = ""

    def __post_init__(self):
        poses = np.asarray(self.poses, dtype=np.float64)
        if poses.ndim != 3 or poses.shape[-1] != 4:
            raise ValueError("poses must have shape (n, N, 4)")
        object.__setattr__(self, "poses", poses)
        for name in ("log_density", "keypoints", "masks"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.float64)
                if v.shape[0] != poses.shape[0]:
                    raise ValueError(f"{name} must have one row per pose")
                object.__setattr__(self, name, v)

    @property
    def n(self):
        return self.poses.shape[0]

    @property
    def n_joints(self):
        return self.poses.shape[1]

    def with_keypoints(self, keypoints, masks):
        return replace(self, keypoints=np.asarray(keypoints, dtype=np.float64),
                       masks=np.asarray(masks, dtype=np.float64))


def chain_marginals(spec):
    """Marginal component weights per joint under the Markov coupling."""
    out = np.empty((spec.n_joints, spec.n_components))
    mu = spec.initial
    for j in range(spec.n_joints):
        out[j] = mu
        mu = mu @ spec.transition
    return out


def _sample_ball_angles(rng, r, count):
    """Angles with density proportional to (1 - cos t) truncated to [0, r]."""
    target = rng.random(count) * (r - np.sin(r))
    lo = np.zeros(count)
    hi = np.full(count, r) if np.ndim(r) == 0 else np.array(r, dtype=np.float64)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        below = (mid - np.sin(mid)) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def generate(spec, n, seed):
    """Sample ``n`` poses from the prior; exact log-densities attached.

    Per pose: draw the component chain, then per joint compose the chosen
    mode with a uniform-ball rotation (truncated Haar angle law, uniform
    axis).  The (spec, n, seed) triple fully determines the dataset.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    nj, k = spec.n_joints, spec.n_components

    comps = np.empty((n, nj), dtype=np.int64)
    cum0 = np.cumsum(spec.initial)
    comps[:, 0] = np.minimum((rng.random(n)[:, None] >= cum0).sum(axis=1), k - 1)
    cum = np.cumsum(spec.transition, axis=1)
    for j in range(1, nj):
        rows = cum[comps[:, j - 1]]
        comps[:, j] = np.minimum((rng.random(n)[:, None] >= rows).sum(axis=1), k - 1)

    poses = np.empty((n, nj, 4))
    for j in range(nj):
        r = spec.radii[j, comps[:, j]]
        theta = _sample_ball_angles(rng, r, n)
        axis = rng.standard_normal((n, 3))
        axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
        half = 0.5 * theta
        delta = np.concatenate([np.cos(half)[:, None], np.sin(half)[:, None] * axis], axis=-1)
        poses[:, j] = _quat_mul_raw(spec.modes[j, comps[:, j]], delta)
    poses = so3.canonicalize_quat(poses)
    return PoseDataset(poses, log_density=oracle_log_prob(spec, poses),
                       seed=int(seed), spec_digest=spec.digest())


def oracle_log_prob(spec, poses):
    """Exact log-density under the prior, w.r.t. normalized Haar^N.

    Componentwise ball densities are marginalized over the Markov chain by
    the forward recursion in log space; returns -inf when no chain has
    positive density.
    """
    poses = np.asarray(poses, dtype=np.float64)
    single = poses.ndim == 2
    if single:
        poses = poses[None]
    if poses.shape[1] != spec.n_joints:
        raise ValueError(f"pose has {poses.shape[1]} joints, spec has {spec.n_joints}")
    log_t = _safe_log(spec.transition)
    alpha = None
    for j in range(spec.n_joints):
        d = so3.quat_geodesic_distance(poses[:, j, None, :], spec.modes[None, j])
        inside = d <= spec.radii[j]
        with np.errstate(divide="ignore"):
            ld = np.where(inside, np.log(np.pi) - np.log(spec.radii[j] - np.sin(spec.radii[j])), -np.inf)
        if alpha is None:
            alpha = _safe_log(spec.initial)[None, :] + ld
        else:
            alpha = logsumexp(alpha[:, :, None] + log_t[None, :, :], axis=1) + ld
    out = logsumexp(alpha, axis=1)
    return out[0] if single else out


def _safe_log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


# ---------------------------------------------------------------------------
# file formats


def _spec_doc(spec):
    return {
        "format": "so3flow-prior",
        "version": 1,
        "modes": spec.modes.tolist(),
        "radii": spec.radii.tolist(),
        "transition": spec.transition.tolist(),
        "initial": spec.initial.tolist(),
    }


def save_prior_spec(spec, path):
    with open(path, "w") as f:
        json.dump(_spec_doc(spec), f, indent=1, sort_keys=True)
        f.write("\n")


def load_prior_spec(path):
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != "so3flow-prior":
        raise ValueError("not a prior spec document")
    if doc.get("version") != 1:
        raise ValueError(f"unsupported prior spec version {doc.get('version')!r}")
    return SyntheticPriorSpec(np.array(doc["modes"]), np.array(doc["radii"]),
                              np.array(doc["transition"]), np.array(doc["initial"]))


def write_dataset(ds, path):
    """Binary dataset: header, then fixed-width little-endian sections."""
    flags = (1 if ds.log_density is not None else 0) \
        | (2 if ds.keypoints is not None else 0) \
        | (4 if ds.masks is not None else 0)
    j = ds.keypoints.shape[1] if ds.keypoints is not None else (
        ds.masks.shape[1] if ds.masks is not None else 0)
    k = ds.keypoints.shape[2] if ds.keypoints is not None else 0
    digest = bytes.fromhex(ds.spec_digest) if ds.spec_digest else b"\x00" * 32
    if len(digest) != 32:
        raise ValueError("spec digest must be a 32-byte hex string")
    header = _MAGIC + struct.pack("<IIQIIIQ", 1, flags, ds.n, ds.n_joints, j, k, ds.seed) + digest
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(so3.canonicalize_quat(ds.poses), dtype="<f8").tobytes())
        if ds.log_density is not None:
            f.write(np.ascontiguousarray(ds.log_density, dtype="<f8").tobytes())
        if ds.keypoints is not None:
            f.write(np.ascontiguousarray(ds.keypoints, dtype="<f8").tobytes())
        if ds.masks is not None:
            f.write(np.ascontiguousarray(ds.masks, dtype="u1").tobytes())


def read_dataset(path):
    """Read a dataset file; corrupt or truncated input raises, never truncates."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(_MAGIC) + 32 + 32:
        raise ValueError("dataset file too short")
    if data[: len(_MAGIC)] != _MAGIC:
        raise ValueError("not a dataset file (bad magic)")
    off = len(_MAGIC)
    version, flags, n, nj, j, k, seed = struct.unpack_from("<IIQIIIQ", data, off)
    off += struct.calcsize("<IIQIIIQ")
    if version != 1:
        raise ValueError(f"unsupported dataset version {version}")
    digest = data[off: off + 32]
    off += 32

    expect = n * nj * 4 * 8
    if flags & 1:
        expect += n * 8
    if flags & 2:
        expect += n * j * k * 8
    if flags & 4:
        expect += n * j
    if len(data) - off != expect:
        raise ValueError(f"dataset length mismatch: expected {expect} payload bytes, found {len(data) - off}")

    poses = np.frombuffer(data, dtype="<f8", count=n * nj * 4, offset=off).reshape(n, nj, 4).astype(np.float64)
    off += n * nj * 4 * 8
    log_density = keypoints = masks = None
    if flags & 1:
        log_density = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += n * 8
    if flags & 2:
        keypoints = np.frombuffer(data, dtype="<f8", count=n * j * k, offset=off).reshape(n, j, k).astype(np.float64)
        off += n * j * k * 8
    if flags & 4:
        masks = np.frombuffer(data, dtype="u1", count=n * j, offset=off).reshape(n, j).astype(np.float64)
        off += n * j
    digest_hex = digest.hex() if digest != b"\x00" * 32 else ""
    return PoseDataset(poses, log_density=log_density, keypoints=keypoints,
                       masks=masks, seed=int(seed), spec_digest=digest_hex)
