"""Scikit-learn style front end for the product-SO(3) flow.

``SO3ProductFlowDensity`` behaves like sklearn's density estimators:
``fit`` trains by maximum likelihood, ``score_samples`` returns per-pose
log-densities, ``sample`` draws new poses, and hyperparameters are plain
constructor arguments exposed through ``get_params``/``set_params``.  For
conditional modes, keypoints (and optional visibility masks) are passed as
``y`` to ``fit`` and as ``conditions`` elsewhere.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import so3
from .flow import FlowConfig, ProductSO3Flow
from .kinematics import default_skeleton
from .synthetic import PoseDataset
from .training import TrainConfig, sample_mask, train

__all__ = ["SO3ProductFlowDensity", "check_pose_array"]


def check_pose_array(X, n_joints=None):
    """Validate and normalize poses to canonical quaternions (n, N, 4).

    Accepts rotation matrices (n, N, 3, 3), quaternions (n, N, 4), or a
    flattened (n, N*9) / (n, N*4) layout when ``n_joints`` is given.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2 and n_joints is not None:
        if X.shape[1] == n_joints * 9:
            X = X.reshape(X.shape[0], n_joints, 3, 3)
        elif X.shape[1] == n_joints * 4:
            X = X.reshape(X.shape[0], n_joints, 4)
        else:
            raise ValueError(f"cannot interpret flat width {X.shape[1]} as {n_joints} rotations")
    if X.ndim == 4 and X.shape[-2:] == (3, 3):
        so3.require_rotation(X, tol=1e-6)
        X = so3.matrix_to_quat(X)
    if X.ndim != 3 or X.shape[-1] != 4:
        raise ValueError(f"expected (n, N, 4) or (n, N, 3, 3) poses, got {X.shape}")
    nrm = np.linalg.norm(X, axis=-1)
    if np.any(np.abs(nrm - 1.0) > 1e-6):
        raise ValueError("quaternions must be unit length")
    if n_joints is not None and X.shape[1] != n_joints:
        raise ValueError(f"expected {n_joints} joints, got {X.shape[1]}")
    return so3.canonicalize_quat(X / nrm[..., None])


class SO3ProductFlowDensity(BaseEstimator):
    """Density estimation on SO(3)^N with exact likelihoods.

    Parameters mirror the flow and training configuration; ``conditioning``
    is one of ``None``, ``"keypoints-3d"``, ``"keypoints-2d"``.  With
    conditioning enabled, ``fit(X, y)`` expects keypoints ``y`` of shape
    (n, J, k); when ``y`` is omitted they are computed by forward
    kinematics on the ``skeleton``.
    """

    def __init__(self, n_joints=19, n_coupling_layers=12, hidden_width=16,
                 conditioning=None, context_dim=64, skeleton="humanoid-19",
                 batch_size=256, learning_rate=5e-3, decay_factor=0.5,
                 decay_every=2000, max_steps=1000, mask_probability=0.0,
                 random_state=0):
        self.n_joints = n_joints
        self.n_coupling_layers = n_coupling_layers
        self.hidden_width = hidden_width
        self.conditioning = conditioning
        self.context_dim = context_dim
        self.skeleton = skeleton
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.decay_factor = decay_factor
        self.decay_every = decay_every
        self.max_steps = max_steps
        self.mask_probability = mask_probability
        self.random_state = random_state

    def _skeleton(self):
        if isinstance(self.skeleton, str):
            return default_skeleton(self.skeleton)
        return self.skeleton

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this estimator is not fitted yet; call fit first")

    def fit(self, X, y=None):
        X = check_pose_array(X, self.n_joints)
        skel = self._skeleton() if self.conditioning else None
        if self.conditioning:
            if skel.n_joints != self.n_joints:
                raise ValueError("skeleton joint count does not match n_joints")
            kdim = 3 if self.conditioning == "keypoints-3d" else 2
            cfg = FlowConfig(n_manifolds=self.n_joints, n_coupling=self.n_coupling_layers,
                             hidden_width=self.hidden_width, context_dim=self.context_dim,
                             n_keypoints=skel.n_keypoints, keypoint_dim=kdim,
                             seed=self.random_state)
        else:
            cfg = FlowConfig(n_manifolds=self.n_joints, n_coupling=self.n_coupling_layers,
                             hidden_width=self.hidden_width, seed=self.random_state)
        self.model_ = ProductSO3Flow(cfg)
        tcfg = TrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate,
                           decay_factor=self.decay_factor, decay_every=self.decay_every,
                           max_steps=self.max_steps,
                           mask_probability=self.mask_probability,
                           seed=self.random_state,
                           conditioning=self.conditioning or "none")
        self.loss_trace_ = train(self.model_, PoseDataset(X), tcfg, skel=skel)
        return self

    def _context(self, conditions, masks, n):
        if not self.conditioning:
            if conditions is not None:
                raise ValueError("estimator is unconditional: no conditions accepted")
            return None
        if conditions is None:
            raise ValueError("conditional estimator requires keypoint conditions")
        conditions = np.asarray(conditions, dtype=np.float64)
        if conditions.ndim == 2:
            conditions = np.broadcast_to(conditions, (n,) + conditions.shape)
        if masks is None:
            masks = np.ones(conditions.shape[:-1])
        return self.model_.encode_context(conditions, np.asarray(masks, dtype=np.float64))

    def score_samples(self, X, conditions=None, masks=None):
        """Per-pose log-density with respect to normalized Haar measure."""
        self._require_fitted()
        X = check_pose_array(X, self.n_joints)
        ctx = self._context(conditions, masks, X.shape[0])
        return self.model_.log_prob(X, ctx)

    def score(self, X, y=None):
        """Mean log-density of ``X`` (conditions may be passed as ``y``)."""
        return float(np.mean(self.score_samples(X, conditions=y)))

    def sample(self, n_samples=1, conditions=None, masks=None, random_state=None):
        """Draw poses as canonical quaternions of shape (n_samples, N, 4)."""
        self._require_fitted()
        seed = self.random_state if random_state is None else random_state
        rng = np.random.default_rng(seed)
        ctx = self._context(conditions, masks, n_samples)
        poses, _ = self.model_.sample(rng, n_samples, ctx)
        return poses

    def random_visibility(self, n, random_state=None):
        """Convenience: visibility masks with the estimator's mask probability."""
        self._require_fitted()
        seed = self.random_state if random_state is None else random_state
        return sample_mask(np.random.default_rng(seed),
                           (n, self.model_.config.n_keypoints), self.mask_probability)
