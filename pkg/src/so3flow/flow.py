"""Autoregressive normalizing flow on a product of SO(3) manifolds.

The model composes Mobius coupling layers (each followed by a quaternion
affine layer, except the last) over ``N`` rotation manifolds.  Every layer
draws its own conditioning order from the model seed at construction;
within a layer, the transformation parameters of the manifold at position
``p`` are an MLP function of positions ``0..p-1`` on the transformed side
(6D encoded) plus an optional context vector, which makes density
evaluation parallel across manifolds and sampling sequential.

Densities are with respect to normalized Haar measure on SO(3)^N, so the
identity-initialized model has log-density exactly zero everywhere.

Parameters live in a :class:`~so3flow.autodiff.ParamStore`.  Conditioner
first-stage weights are stored padded to the full feature width with a
constant block-triangular mask; masked entries are structurally zero and
receive exactly zero gradient, which enforces autoregressive causality.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import so3
from .autodiff import ParamStore
from .layers import _qcol, affine_params_from_raw, affine_quat, couple_quat

__all__ = ["FlowConfig", "ProductSO3Flow", "save_checkpoint", "load_checkpoint"]

_MAGIC = b"SO3FLOW1"


@dataclass(frozen=True)
class FlowConfig:
    """Hyperparameters of a :class:`ProductSO3Flow`."""

    n_manifolds: int
    n_coupling: int = 12
    hidden_width: int = 16
    n_hidden: int = 3
    context_dim: int = 0
    n_keypoints: int = 0
    keypoint_dim: int = 3
    encoder_width: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.n_manifolds < 1 or self.n_coupling < 1:
            raise ValueError("need at least one manifold and one coupling layer")
        if self.context_dim < 0:
            raise ValueError("context_dim must be non-negative")
        if self.context_dim > 0 and self.n_keypoints > 0 and self.keypoint_dim not in (2, 3):
            raise ValueError("keypoint_dim must be 2 or 3")


class _Layer:
    __slots__ = ("kind", "role", "order", "inv_order", "prefix", "mask")

    def __init__(self, kind, role, order, prefix, mask):
        self.kind = kind
        self.role = role
        self.order = order
        self.inv_order = np.argsort(order)
        self.prefix = prefix
        self.mask = mask


class ProductSO3Flow:
    """Exact-likelihood flow over ``N`` rotations with optional conditioning."""

    def __init__(self, config):
        self.config = config
        self.params = ParamStore()
        self.layers = []
        n = config.n_manifolds
        feat = 6 * n + config.context_dim
        rng = np.random.default_rng(config.seed)

        idx = 0
        for c in range(config.n_coupling):
            self._add_layer("couple", c % 2, idx, rng, feat)
            idx += 1
            if c < config.n_coupling - 1:
                self._add_layer("affine", None, idx, rng, feat)
                idx += 1
        if config.context_dim > 0:
            self._init_encoder(rng)

    # ------------------------------------------------------------------
    # construction

    def _add_layer(self, kind, role, idx, rng, feat):
        cfg = self.config
        n, h, L = cfg.n_manifolds, cfg.hidden_width, cfg.context_dim
        order = rng.permutation(n)
        prefix = f"layer{idx:02d}.{kind}"
        out_dim = 3 if kind == "couple" else 20

        # first-stage weights for all positions side by side: (feat, n*h);
        # position p owns columns [p*h, (p+1)*h) and may read the 6D blocks
        # of positions before it plus (where gated) the context rows
        mask = np.zeros((feat, n * h))
        for p in range(n):
            cols = slice(p * h, (p + 1) * h)
            mask[: 6 * p, cols] = 1.0
            if L > 0 and (kind == "couple" or p > 0):
                mask[6 * n:, cols] = 1.0

        w_in = np.zeros((feat, n * h))
        w_own = np.zeros((n, 3, h)) if kind == "couple" else None
        for p in range(n):
            cols = slice(p * h, (p + 1) * h)
            fan = int(mask[:, p * h].sum()) + (3 if kind == "couple" else 0)
            std = np.sqrt(2.0 / fan) if fan > 0 else 0.0
            w_in[:, cols] = std * rng.standard_normal((feat, h)) * mask[:, cols]
            if w_own is not None:
                w_own[p] = std * rng.standard_normal((3, h))
        self.params.register(prefix + ".w_in", w_in)
        if w_own is not None:
            self.params.register(prefix + ".w_own", w_own)
        self.params.register(prefix + ".b0", np.zeros((n, 1, h)))
        for k in range(cfg.n_hidden - 1):
            self.params.register(prefix + f".w_h{k}", np.sqrt(2.0 / h) * rng.standard_normal((n, h, h)))
            self.params.register(prefix + f".b_h{k}", np.zeros((n, 1, h)))
        # zero-initialized output stage: the fresh model is the identity flow
        self.params.register(prefix + ".w_out", np.zeros((n, h, out_dim)))
        self.params.register(prefix + ".b_out", np.zeros((n, 1, out_dim)))
        self.layers.append(_Layer(kind, role, order, prefix, mask))

    def _init_encoder(self, rng):
        cfg = self.config
        if cfg.n_keypoints <= 0:
            return
        d_in = cfg.n_keypoints * cfg.keypoint_dim + cfg.n_keypoints
        w = cfg.encoder_width
        self.params.register("encoder.w0", np.sqrt(2.0 / d_in) * rng.standard_normal((d_in, w)))
        self.params.register("encoder.b0", np.zeros(w))
        self.params.register("encoder.w1", np.sqrt(1.0 / w) * rng.standard_normal((w, cfg.context_dim)))
        self.params.register("encoder.b1", np.zeros(cfg.context_dim))

    @property
    def n_manifolds(self):
        return self.config.n_manifolds

    def n_parameters(self):
        return self.params.n_parameters()

    def perturb(self, rng, scale=0.1):
        """Add seeded Gaussian noise to all parameters (masked entries stay zero)."""
        masks = self.grad_masks()
        for name in self.params.names():
            noise = scale * rng.standard_normal(self.params[name].shape)
            if name in masks:
                noise = noise * masks[name]
            self.params.update(name, self.params[name] + noise)

    def grad_masks(self):
        """Constant masks that keep structurally-zero weight entries at zero.

        Gradients of the first-stage conditioner weights must be multiplied
        by these masks before an optimizer update; the entries they zero
        are the padding of the autoregressive layout.
        """
        return {layer.prefix + ".w_in": layer.mask for layer in self.layers}

    def mask_gradients(self, grads):
        for name, mask in self.grad_masks().items():
            grads[name] = grads[name] * mask
        return grads

    # ------------------------------------------------------------------
    # shared computation (plain numpy or taped Vars, depending on P)

    def _features(self, state, ctx):
        """Conditioner features of a (permuted) state: returns (F, col0, col1).

        F has shape (batch, 6N + L): the per-position 6D encodings in layer
        order, then the context.  The columns are returned for reuse.
        """
        n = self.config.n_manifolds
        col0, col1 = _qcol(state, 0), _qcol(state, 1)
        sixd = ad.concat([col0, col1], axis=-1)
        flat = ad.reshape(ad.transpose(sixd, (1, 0, 2)), (-1, 6 * n))
        if ctx is not None:
            flat = ad.concat([flat, ctx], axis=-1)
        return flat, col0, col1

    def _bank(self, P, layer, F, own):
        # first stage as one wide matmul: (B, D) @ (D, N*H); padded weight
        # entries are structurally zero (see grad_masks), which enforces the
        # autoregressive causality of the layout
        cfg = self.config
        n, hw = cfg.n_manifolds, cfg.hidden_width
        h = ad.transpose(ad.reshape(ad.matmul(F, P[layer.prefix + ".w_in"]), (-1, n, hw)), (1, 0, 2))
        if own is not None:
            h = h + ad.matmul(own, P[layer.prefix + ".w_own"])
        h = ad.relu(h + P[layer.prefix + ".b0"])
        for k in range(cfg.n_hidden - 1):
            h = ad.relu(ad.matmul(h, P[layer.prefix + f".w_h{k}"]) + P[layer.prefix + f".b_h{k}"])
        return ad.matmul(h, P[layer.prefix + ".w_out"]) + P[layer.prefix + ".b_out"]

    def _bank_single(self, P, layer, p, row, own):
        hw = self.config.hidden_width
        h = row @ P[layer.prefix + ".w_in"][:, p * hw: (p + 1) * hw]
        if own is not None:
            h = h + own @ P[layer.prefix + ".w_own"][p]
        h = np.maximum(h + P[layer.prefix + ".b0"][p, 0], 0.0)
        for k in range(self.config.n_hidden - 1):
            h = np.maximum(h @ P[layer.prefix + f".w_h{k}"][p] + P[layer.prefix + f".b_h{k}"][p, 0], 0.0)
        return h @ P[layer.prefix + ".w_out"][p] + P[layer.prefix + ".b_out"][p, 0]

    def _invert_layer(self, P, layer, state, ctx):
        s = ad.take(state, layer.order, axis=0)
        F, col0, col1 = self._features(s, ctx)
        if layer.kind == "couple":
            own = (col0, col1)[layer.role]
            g_out = self._bank(P, layer, F, own)
            s2, ld = couple_quat(s, g_out, layer.role, inverse=True, cols=(col0, col1))
        else:
            raw = self._bank(P, layer, F, None)
            s2, ld = affine_quat(s, *affine_params_from_raw(raw), inverse=True)
        return ad.take(s2, layer.inv_order, axis=0), ad.asum(ld, axis=0)

    def _log_prob_core(self, P, poses, ctx, return_base=False):
        """Log-density of ``poses`` (B, N, 4): inverse pass, logdets accumulated."""
        state = np.transpose(poses, (1, 0, 2))
        total = np.zeros(poses.shape[0])
        for layer in reversed(self.layers):
            state, ld = self._invert_layer(P, layer, state, ctx)
            total = total + ld
        if return_base:
            return total, state
        return total

    def _sample_layer(self, P, layer, state, ctx, logdet):
        """Forward (generative) pass of one layer, sequential in the layer order."""
        cfg = self.config
        n = cfg.n_manifolds
        s = state[layer.order]
        b = s.shape[1]
        F = np.zeros((b, 6 * n + cfg.context_dim))
        F[:, : 6 * n] = np.concatenate(
            [so3.quat_columns(s, 0), so3.quat_columns(s, 1)], axis=-1
        ).transpose(1, 0, 2).reshape(b, 6 * n)
        if ctx is not None:
            F[:, 6 * n:] = ctx
        for p in range(n):
            q = s[p]
            if layer.kind == "couple":
                own = so3.quat_columns(q, layer.role)
                g_out = self._bank_single(P, layer, p, F, own)
                q2, ld = couple_quat(q, g_out, layer.role)
            else:
                raw = self._bank_single(P, layer, p, F, None)
                q2, ld = affine_quat(q, *affine_params_from_raw(raw))
            s[p] = q2
            F[:, 6 * p: 6 * p + 3] = so3.quat_columns(q2, 0)
            F[:, 6 * p + 3: 6 * p + 6] = so3.quat_columns(q2, 1)
            logdet += ld
        return s[layer.inv_order], logdet

    def _encode_core(self, P, keypoints, masks):
        keypoints = np.asarray(keypoints, dtype=np.float64)
        masks = np.asarray(masks, dtype=np.float64)
        cfg = self.config
        if keypoints.shape[-2:] != (cfg.n_keypoints, cfg.keypoint_dim):
            raise ValueError(
                f"expected keypoints (..., {cfg.n_keypoints}, {cfg.keypoint_dim}), got {keypoints.shape}")
        if masks.shape != keypoints.shape[:-1]:
            raise ValueError("mask shape must match keypoints minus the coordinate axis")
        kp = keypoints * masks[..., None]
        x = np.concatenate([kp.reshape(kp.shape[0], -1), masks], axis=-1)
        h = ad.relu(ad.matmul(x, P["encoder.w0"]) + P["encoder.b0"])
        return ad.matmul(h, P["encoder.w1"]) + P["encoder.b1"]

    # ------------------------------------------------------------------
    # public inference API

    def _as_pose_batch(self, poses):
        poses = np.asarray(poses, dtype=np.float64)
        n = self.config.n_manifolds
        if poses.shape[-2:] == (3, 3):
            poses = so3.matrix_to_quat(poses)
        if poses.ndim == 2:
            poses = poses[None]
        if poses.ndim != 3 or poses.shape[1] != n or poses.shape[2] != 4:
            raise ValueError(f"expected poses of {n} rotations, got shape {poses.shape}")
        return so3.canonicalize_quat(poses)

    def _check_ctx(self, context, batch):
        if context is None:
            if self.config.context_dim > 0:
                raise ValueError("this model is conditional: a context is required")
            return None
        if self.config.context_dim == 0:
            raise ValueError("this model is unconditional: no context accepted")
        ctx = np.asarray(context, dtype=np.float64)
        if ctx.ndim == 1:
            ctx = np.broadcast_to(ctx, (batch, ctx.size)).copy()
        if ctx.shape != (batch, self.config.context_dim):
            raise ValueError(f"context must have shape ({batch}, {self.config.context_dim})")
        return ctx

    def log_prob(self, poses, context=None):
        """Log-density w.r.t. normalized Haar^N, shape (batch,)."""
        q = self._as_pose_batch(poses)
        ctx = self._check_ctx(context, q.shape[0])
        P = dict(self.params.items())
        return self._log_prob_core(P, q, ctx)

    def transform_from_base(self, base, context=None):
        """Push base poses through the generative stack: (poses, log_prob)."""
        base = self._as_pose_batch(base)
        ctx = self._check_ctx(context, base.shape[0])
        P = dict(self.params.items())
        state = np.transpose(base, (1, 0, 2)).copy()
        logdet = np.zeros(base.shape[0])
        for layer in self.layers:
            state, logdet = self._sample_layer(P, layer, state, ctx, logdet)
        poses = so3.canonicalize_quat(np.transpose(state, (1, 0, 2)))
        return poses, -logdet

    def transform_to_base(self, poses, context=None):
        """Invert the stack: returns (base poses (B, N, 4), log_prob (B,))."""
        q = self._as_pose_batch(poses)
        ctx = self._check_ctx(context, q.shape[0])
        P = dict(self.params.items())
        lp, state = self._log_prob_core(P, q, ctx, return_base=True)
        base = so3.canonicalize_quat(np.transpose(state, (1, 0, 2)))
        return base, lp

    def sample(self, rng, count, context=None):
        """Draw ``count`` poses; returns (poses (count, N, 4), log_prob (count,)).

        Haar base samples are pushed through the generative stack; each
        layer fills its conditioning order sequentially.
        """
        if count < 1:
            raise ValueError("count must be at least 1")
        base = so3.haar_quat(rng, (count, self.config.n_manifolds))
        return self.transform_from_base(base, context)

    def encode_context(self, keypoints, mask):
        """Context vector(s) from (masked) keypoints; masked entries are zeroed."""
        if self.config.context_dim == 0 or self.config.n_keypoints == 0:
            raise ValueError("this model has no context encoder")
        keypoints = np.asarray(keypoints, dtype=np.float64)
        single = keypoints.ndim == 2
        if single:
            keypoints = keypoints[None]
            mask = np.asarray(mask, dtype=np.float64)[None]
        out = self._encode_core(dict(self.params.items()), keypoints, np.asarray(mask, dtype=np.float64))
        return out[0] if single else out

    # ------------------------------------------------------------------
    # persistence

    def save(self, path):
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path):
        return load_checkpoint(path)


def save_checkpoint(model, path):
    """Serialize config and parameters; loading reproduces log_prob bit for bit.

    Layout: magic, little-endian uint32 header length, JSON header (config
    and the parameter name/shape list in storage order), then raw
    little-endian float64 parameter blobs in that order.
    """
    names = model.params.names()
    header = {
        "format": "so3flow-checkpoint",
        "version": 1,
        "config": asdict(model.config),
        "params": [[name, list(model.params[name].shape)] for name in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for name in names:
        buf.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[: len(_MAGIC)] != _MAGIC:
        raise ValueError("not a flow checkpoint (bad magic)")
    off = len(_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off: off + hlen].decode())
    off += hlen
    if header.get("version") != 1:
        raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
    model = ProductSO3Flow(FlowConfig(**header["config"]))
    for name, shape in header["params"]:
        size = int(np.prod(shape)) if shape else 1
        nbytes = size * 8
        if off + nbytes > len(data):
            raise ValueError("truncated checkpoint")
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape)
        off += nbytes
        model.params.update(name, arr.astype(np.float64))
    if off != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return model
