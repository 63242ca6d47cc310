"""Maximum-likelihood training: Adam, step LR schedule, random joint masking.

Training minimizes the mean negative log-density of the data under the
flow.  For conditional models the context is recomputed every step from
forward-kinematics keypoints with a fresh random mask per sample, so the
model learns to handle any number of occluded joints.  Everything is
driven by a single seeded generator: two runs with the same configuration
produce bit-identical traces and parameters.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kinematics as kin
from .autodiff import Tape

__all__ = [
    "TrainConfig",
    "AdamState",
    "TrainingDiverged",
    "adam_step",
    "sample_mask",
    "schedule_lr",
    "train",
    "write_trace",
    "read_trace",
]

CONDITIONING_MODES = ("none", "keypoints-3d", "keypoints-2d")


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults follow the large-scale recipe."""

    batch_size: int = 1000
    learning_rate: float = 5e-3
    decay_factor: float = 0.5
    decay_every: int = 2000
    max_steps: int = 1000
    mask_probability: float = 0.0
    seed: int = 0
    conditioning: str = "none"
    checkpoint_every: int = 0
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.mask_probability <= 1.0:
            raise ValueError("mask_probability must lie in [0, 1]")
        if self.conditioning not in CONDITIONING_MODES:
            raise ValueError(f"conditioning must be one of {CONDITIONING_MODES}")


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite; the last checkpoint survives."""


class AdamState:
    """First/second moment accumulators with standard constants."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {name: np.zeros_like(value) for name, value in params.items()}
        self.v = {name: np.zeros_like(value) for name, value in params.items()}


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update of every parameter in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name in params.names():
        g = np.asarray(grads[name])
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = np.sqrt(v / c2)
        update += state.eps
        np.divide(m / c1, update, out=update)
        update *= lr
        params.update(name, params[name] - update)


def sample_mask(rng, shape, p_m):
    """Visibility flags: each entry is 0 (occluded) with probability ``p_m``."""
    if not 0.0 <= p_m <= 1.0:
        raise ValueError("p_m must lie in [0, 1]")
    return (rng.random(shape) >= p_m).astype(np.float64)


def schedule_lr(cfg, step):
    """Step schedule: the rate decays by ``decay_factor`` every ``decay_every``."""
    return cfg.learning_rate * cfg.decay_factor ** (step // cfg.decay_every)


def _conditioning_inputs(model, dataset, skel, cfg):
    if cfg.conditioning == "none":
        return None
    if skel is None:
        raise ValueError("conditional training requires a skeleton")
    if model.config.context_dim == 0:
        raise ValueError("model is unconditional but conditioning was requested")
    dim = 3 if cfg.conditioning == "keypoints-3d" else 2
    if model.config.keypoint_dim != dim:
        raise ValueError(
            f"model encodes {model.config.keypoint_dim}D keypoints but conditioning is {cfg.conditioning}")
    kp = kin.keypoint_positions(dataset.poses, skel)
    if cfg.conditioning == "keypoints-2d":
        kp = kin.project_2d(kp)
    if kp.shape[1] != model.config.n_keypoints:
        raise ValueError(
            f"skeleton provides {kp.shape[1]} keypoints, model expects {model.config.n_keypoints}")
    return kp


def train(model, dataset, cfg, skel=None, start_step=0):
    """Run the optimizer loop; returns the loss trace [(step, lr, loss), ...].

    Batches come from an epoch-wise seeded shuffle.  Target poses are never
    masked; masking applies only to the context path.  A non-finite loss or
    gradient raises :class:`TrainingDiverged` with the last written
    checkpoint retained on disk.  ``start_step`` offsets the step counter
    and learning-rate schedule when resuming.
    """
    if dataset.n < 1:
        raise ValueError("dataset is empty")
    keypoints = _conditioning_inputs(model, dataset, skel, cfg)
    poses = dataset.poses
    n = dataset.n
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState(model.params)
    trace = []

    order = rng.permutation(n)
    cursor = 0
    for step in range(start_step, start_step + cfg.max_steps):
        if cfg.batch_size >= n:
            idx = np.arange(n)
        else:
            if cursor + cfg.batch_size > n:
                order = rng.permutation(n)
                cursor = 0
            idx = order[cursor: cursor + cfg.batch_size]
            cursor += cfg.batch_size

        tape = Tape()
        leaves = model.params.as_leaves(tape)
        ctx = None
        if keypoints is not None:
            masks = sample_mask(rng, (idx.size, keypoints.shape[1]), cfg.mask_probability)
            ctx = model._encode_core(leaves, keypoints[idx], masks)
        lp = model._log_prob_core(leaves, poses[idx], ctx)
        loss = ad.mean(-lp)
        loss_val = float(ad.value_of(loss))
        if not np.isfinite(loss_val):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        tape.backward(loss)
        grads = model.mask_gradients(tape.gradients())

        lr = schedule_lr(cfg, step)
        adam_step(model.params, grads, adam, lr)
        trace.append((step, lr, loss_val))

        if cfg.checkpoint_path and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            model.save(cfg.checkpoint_path)
    if cfg.checkpoint_path:
        model.save(cfg.checkpoint_path)
    return trace


def write_trace(trace, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "lr", "loss"])
        for step, lr, loss in trace:
            w.writerow([step, repr(float(lr)), repr(float(loss))])


def read_trace(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["step", "lr", "loss"]:
        raise ValueError("not a loss trace file")
    return [(int(s), float(lr), float(loss)) for s, lr, loss in rows[1:]]
