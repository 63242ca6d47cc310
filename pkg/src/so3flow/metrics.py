"""Evaluation protocols: rotation and position errors, precision/recall,
sample diversity, spherical correlation, and the Monte Carlo normalization
diagnostic.

Distances are exact: nearest-neighbor searches are full pairwise scans
(chunked for memory, never approximated).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import kinematics as kin
from . import so3
from .training import sample_mask

__all__ = [
    "EvalReport",
    "mgeo",
    "sum_geo",
    "mpjpe",
    "pose_distance_matrix",
    "precision_recall",
    "diversity",
    "diversity_per_joint",
    "spherical_correlation",
    "ik_loss",
    "mc_normalization",
    "eval_conditional",
    "write_report_csv",
]


@dataclass
class EvalReport:
    """Per-sample values of one metric plus its configuration."""

    name: str
    values: np.ndarray
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def mean(self):
        return float(np.mean(self.values))

    @property
    def median(self):
        return float(np.median(self.values))


def _as_quat(pose):
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape[-2:] == (3, 3):
        return so3.matrix_to_quat(pose)
    return pose


def mgeo(a, b):
    """Mean geodesic distance over joints; accepts matrix or quaternion poses."""
    qa, qb = _as_quat(a), _as_quat(b)
    if qa.shape[-2] != qb.shape[-2]:
        raise ValueError("poses have different joint counts")
    return np.mean(so3.quat_geodesic_distance(qa, qb), axis=-1)


def sum_geo(a, b):
    """Sum of per-joint geodesic distances."""
    qa, qb = _as_quat(a), _as_quat(b)
    if qa.shape[-2] != qb.shape[-2]:
        raise ValueError("poses have different joint counts")
    return np.sum(so3.quat_geodesic_distance(qa, qb), axis=-1)


def mpjpe(a, b, skel):
    """Mean per-joint position error between the keypoints of two poses."""
    pa = kin.keypoint_positions(_as_quat(a), skel)
    pb = kin.keypoint_positions(_as_quat(b), skel)
    return np.mean(np.linalg.norm(pa - pb, axis=-1), axis=-1)


def _distance_block(a, b, distance, skel):
    if distance == "sum_geo":
        inner = np.abs(np.einsum("ank,bnk->abn", a, b))
        return np.sum(2.0 * np.arccos(np.clip(inner, -1.0, 1.0)), axis=-1)
    if distance == "mpjpe":
        pa = kin.keypoint_positions(a, skel)
        pb = kin.keypoint_positions(b, skel)
        return np.mean(np.linalg.norm(pa[:, None] - pb[None], axis=-1), axis=-1)
    raise ValueError(f"unknown distance {distance!r}")


def pose_distance_matrix(a, b, distance="sum_geo", skel=None, chunk=256):
    """Exact pairwise distances between two pose sets, shape (len(a), len(b))."""
    qa, qb = _as_quat(a), _as_quat(b)
    if distance == "mpjpe" and skel is None:
        raise ValueError("mpjpe distance requires a skeleton")
    out = np.empty((qa.shape[0], qb.shape[0]))
    for i in range(0, qa.shape[0], chunk):
        for j in range(0, qb.shape[0], chunk * 8):
            out[i: i + chunk, j: j + chunk * 8] = _distance_block(
                qa[i: i + chunk], qb[j: j + chunk * 8], distance, skel)
    return out


def precision_recall(model_samples, data_samples, distance="sum_geo", skel=None, chunk=256):
    """Nearest-neighbor fit (precision) and coverage (recall) of a sample set.

    Recall: for each data sample, the minimum distance to any model sample.
    Precision: for each model sample, the minimum distance to any data
    sample.  The scan is exact; blocks only bound memory.  Returns
    ``(recall_report, precision_report)``.
    """
    model_samples = _as_quat(model_samples)
    data_samples = _as_quat(data_samples)
    if model_samples.shape[0] == 0 or data_samples.shape[0] == 0:
        raise ValueError("both sample sets must be non-empty")
    if distance == "mpjpe" and skel is None:
        raise ValueError("mpjpe distance requires a skeleton")
    nm, nd = model_samples.shape[0], data_samples.shape[0]
    rec = np.full(nd, np.inf)
    prec = np.full(nm, np.inf)
    for i in range(0, nm, chunk):
        mi = model_samples[i: i + chunk]
        for j in range(0, nd, chunk * 8):
            d = _distance_block(mi, data_samples[j: j + chunk * 8], distance, skel)
            np.minimum(rec[j: j + chunk * 8], d.min(axis=0), out=rec[j: j + chunk * 8])
            np.minimum(prec[i: i + chunk], d.min(axis=1), out=prec[i: i + chunk])
    cfg = {"distance": distance, "n_model": int(nm), "n_data": int(nd)}
    recall = EvalReport("recall", rec, dict(cfg))
    precision = EvalReport("precision", prec, dict(cfg))
    return recall, precision


def diversity(samples, skel, subset=None):
    """Average Euclidean deviation of keypoint positions from the sample mean.

    ``samples`` is a stack of poses (k, N, ...) for one condition; ``subset``
    selects keypoint rows (default: all).  Returns the scalar average over
    the subset; per-joint values via :func:`diversity_per_joint`.
    """
    return float(np.mean(diversity_per_joint(samples, skel, subset)))


def diversity_per_joint(samples, skel, subset=None):
    samples = _as_quat(samples)
    if samples.shape[0] < 2:
        raise ValueError("diversity needs at least two samples")
    pos = kin.keypoint_positions(samples, skel)
    if subset is not None:
        subset = np.asarray(subset, dtype=np.int64)
        if subset.size and (subset.min() < 0 or subset.max() >= pos.shape[1]):
            raise ValueError("subset indexes keypoints out of range")
        pos = pos[:, subset]
    center = pos.mean(axis=0, keepdims=True)
    return np.linalg.norm(pos - center, axis=-1).mean(axis=0)


def spherical_correlation(x, y):
    """Correlation of paired unit quaternions on the 3-sphere.

    ``det(S_xy) / sqrt(det(S_xx) det(S_yy))`` with second-moment matrices
    ``S_ab = sum_i a_i b_i^T / n``.  Inputs are used as given: the statistic
    is sign-covariant, so pass a consistent hemisphere convention (or the
    raw output of a quaternion-valued map).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 4 or x.shape[0] == 0:
        raise ValueError("expected matching non-empty (n, 4) quaternion arrays")
    n = x.shape[0]
    sxx = x.T @ x / n
    syy = y.T @ y / n
    sxy = x.T @ y / n
    dx, dy = np.linalg.det(sxx), np.linalg.det(syy)
    if dx <= 1e-300 or dy <= 1e-300:
        raise ValueError("degenerate sample: singular second-moment matrix")
    return float(np.linalg.det(sxy) / np.sqrt(dx * dy))


def ik_loss(gt_positions, pred_positions, mask):
    """Masked keypoint-position error: sum_i m_i |x_gt,i - x_i| per pose."""
    gt = np.asarray(gt_positions, dtype=np.float64)
    pred = np.asarray(pred_positions, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if gt.shape != pred.shape or mask.shape != gt.shape[:-1]:
        raise ValueError("position arrays and mask must agree in shape")
    return np.sum(mask * np.linalg.norm(gt - pred, axis=-1), axis=-1)


def mc_normalization(model, context=None, n_samples=10**6, seed=0, chunk=1 << 16):
    """Monte Carlo check that exp(log_prob) integrates to one under Haar^N.

    Returns ``(estimate, standard_error)``.
    """
    if n_samples < 10**4:
        raise ValueError("use at least 1e4 samples")
    rng = np.random.default_rng(seed)
    total = total_sq = 0.0
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        q = so3.haar_quat(rng, (m, model.config.n_manifolds))
        ctx = None
        if context is not None:
            ctx = np.broadcast_to(np.asarray(context, dtype=np.float64), (m, np.asarray(context).shape[-1]))
        w = np.exp(model.log_prob(q, ctx))
        total += w.sum()
        total_sq += (w * w).sum()
        done += m
    mean = total / done
    var = max(total_sq / done - mean * mean, 0.0)
    return mean, float(np.sqrt(var / done))


def _protocol_mask(protocol, skel, n_poses, rng, p_m=0.3, occlusion=None):
    j = skel.n_keypoints
    if protocol in ("ik", "uplift"):
        return np.ones((n_poses, j))
    if protocol == "five-point":
        m = np.zeros((n_poses, j))
        m[:, skel.leaf_keypoints] = 1.0
        return m
    if protocol == "masked-ik":
        if occlusion is not None:
            m = np.ones((n_poses, j))
            rows = skel.group_keypoints(occlusion) if isinstance(occlusion, str) \
                else np.asarray(occlusion, dtype=np.int64)
            m[:, rows] = 0.0
            return m
        return sample_mask(rng, (n_poses, j), p_m)
    raise ValueError(f"unknown protocol {protocol!r}")


def eval_conditional(model, dataset, skel, protocol, n_samples=10, seed=0,
                     p_m=0.3, occlusion=None):
    """Run a conditional evaluation protocol over a dataset.

    Per test pose: build the protocol's visibility mask (all-ones for ik
    and uplift, leaf joints only for five-point, named group or random for
    masked-ik), encode the context from the ground-truth keypoints, draw
    ``n_samples`` poses, and score the per-joint rotation average of the
    samples against the ground truth.  Reports MGEO and MPJPE of that mean
    pose plus sample diversity split into visible and occluded joints.
    """
    poses = dataset.poses
    t = poses.shape[0]
    rng = np.random.default_rng(seed)
    masks = _protocol_mask(protocol, skel, t, rng, p_m=p_m, occlusion=occlusion)
    kp3 = kin.keypoint_positions(poses, skel)
    kp = kin.project_2d(kp3) if protocol == "uplift" else kp3
    if kp.shape[-1] != model.config.keypoint_dim:
        raise ValueError(
            f"protocol supplies {kp.shape[-1]}D keypoints but the model encodes "
            f"{model.config.keypoint_dim}D")

    ctx = model.encode_context(kp, masks)
    ctx_rep = np.repeat(ctx, n_samples, axis=0)
    samples, _ = model.sample(rng, t * n_samples, context=ctx_rep)
    samples = samples.reshape(t, n_samples, poses.shape[1], 4)

    mean_poses = np.empty_like(poses)
    for i in range(t):
        mean_poses[i] = so3.average_quats(np.swapaxes(samples[i], 0, 1))

    mgeo_vals = mgeo(mean_poses, poses)
    mpjpe_vals = mpjpe(mean_poses, poses, skel)

    div_vis = np.full(t, np.nan)
    div_occ = np.full(t, np.nan)
    if n_samples >= 2:
        for i in range(t):
            per_joint = diversity_per_joint(samples[i], skel)
            vis = masks[i] > 0.5
            if vis.any():
                div_vis[i] = per_joint[vis].mean()
            if (~vis).any():
                div_occ[i] = per_joint[~vis].mean()

    cfg = {"protocol": protocol, "n_samples": int(n_samples), "seed": int(seed),
           "p_m": float(p_m), "occlusion": str(occlusion) if occlusion is not None else ""}
    out = {
        "mgeo": EvalReport("mgeo", mgeo_vals, dict(cfg)),
        "mpjpe": EvalReport("mpjpe", mpjpe_vals, dict(cfg)),
    }
    if n_samples >= 2:
        out["diversity_visible"] = EvalReport("diversity_visible", div_vis[~np.isnan(div_vis)], dict(cfg))
        occ = div_occ[~np.isnan(div_occ)]
        if occ.size:
            out["diversity_occluded"] = EvalReport("diversity_occluded", occ, dict(cfg))
    return out


def write_report_csv(report, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", report.name])
        for i, v in enumerate(report.values):
            w.writerow([i, repr(float(v))])
