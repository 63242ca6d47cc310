"""Articulated skeletons, forward kinematics, and 2D projection.

A :class:`Skeleton` is a tree of nodes.  Node 0 is the root, pinned at the
origin.  A subset of nodes carries modeled rotations ("rotating" nodes);
the remaining nodes are static end sites whose positions still respond to
their ancestors.  Keypoints are the positions of every node except the
root, so a skeleton with R rotating nodes and S end sites conditions on
``J = R + S - 1`` keypoints when the root rotates, or ``R + S`` nodes minus
the root in general.

Forward kinematics places each node at its parent's position plus the
parent-chain rotation applied to its rest offset, so a node's own rotation
moves only its descendants.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import so3

__all__ = [
    "Skeleton",
    "default_skeleton",
    "forward_kinematics",
    "keypoint_positions",
    "project_2d",
    "total_chain_length",
    "save_skeleton",
    "load_skeleton",
]


@dataclass(frozen=True)
class Skeleton:
    """Joint tree: parent indices, rest offsets, names, rotating set, leaves.

    ``parents[0]`` must be -1 (the root); every other node's parent must
    precede it.  ``rotating`` lists the nodes whose rotations form a pose,
    in pose order.  ``leaf_set`` lists the nodes used as the sparse
    end-effector conditioning set.
    """

    parents: np.ndarray
    offsets: np.ndarray
    names: tuple
    rotating: np.ndarray
    leaf_set: np.ndarray
    occlusion_groups: dict = field(default_factory=dict)

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64)
        offsets = np.asarray(self.offsets, dtype=np.float64)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "rotating", np.asarray(self.rotating, dtype=np.int64))
        object.__setattr__(self, "leaf_set", np.asarray(self.leaf_set, dtype=np.int64))
        m = parents.size
        if offsets.shape != (m, 3) or len(self.names) != m:
            raise ValueError("parents, offsets, and names must agree in length")
        if parents[0] != -1:
            raise ValueError("node 0 must be the root (parent -1)")
        if m > 1 and not np.all((parents[1:] >= 0) & (parents[1:] < np.arange(1, m))):
            raise ValueError("parents must form a tree with each parent preceding its child")
        if not np.all(np.isfinite(offsets)):
            raise ValueError("offsets must be finite")
        if np.linalg.norm(offsets, axis=-1).sum() <= 0.0:
            raise ValueError("total chain length must be positive")
        rot = self.rotating
        if rot.size == 0 or np.any(rot < 0) or np.any(rot >= m) or np.unique(rot).size != rot.size:
            raise ValueError("rotating must be a non-empty set of distinct node indices")
        if np.any(self.leaf_set <= 0) or np.any(self.leaf_set >= m):
            raise ValueError("leaf_set must index non-root nodes")

    @property
    def n_nodes(self):
        return self.parents.size

    @property
    def n_joints(self):
        """Number of modeled rotations (pose length)."""
        return self.rotating.size

    @property
    def n_keypoints(self):
        """Number of conditioning positions: every node except the root."""
        return self.parents.size - 1

    def keypoint_index(self, node):
        """Keypoint row of a node index (root has none)."""
        if node <= 0:
            raise ValueError("the root is not a keypoint")
        return node - 1

    @property
    def leaf_keypoints(self):
        return self.leaf_set - 1

    def group_keypoints(self, name):
        """Keypoint rows of a named occlusion group."""
        return np.asarray(self.occlusion_groups[name], dtype=np.int64) - 1


def forward_kinematics(pose, skel, root_rotation=None):
    """Node positions of a pose; shape ``batch + (n_nodes, 3)``.

    ``pose`` holds one rotation per entry of ``skel.rotating`` as matrices
    ``(..., n_joints, 3, 3)`` or quaternions ``(..., n_joints, 4)``.  The
    root sits at the origin; ``root_rotation`` (a single rotation or batch)
    rigidly rotates everything when given.
    """
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape[-1] == 4 and pose.shape[-2:] != (3, 3):
        pose = so3.quat_to_matrix(pose)
    if pose.shape[-3] != skel.n_joints:
        raise ValueError(f"pose has {pose.shape[-3]} rotations, skeleton expects {skel.n_joints}")
    batch = pose.shape[:-3]
    m = skel.n_nodes
    rot_slot = {int(node): k for k, node in enumerate(skel.rotating)}

    acc = np.empty(batch + (m, 3, 3))
    pos = np.zeros(batch + (m, 3))
    root = np.broadcast_to(np.eye(3), batch + (3, 3)) if root_rotation is None else np.asarray(root_rotation)
    if 0 in rot_slot:
        acc[..., 0, :, :] = root @ pose[..., rot_slot[0], :, :]
    else:
        acc[..., 0, :, :] = root
    for j in range(1, m):
        p = skel.parents[j]
        pos[..., j, :] = pos[..., p, :] + np.einsum("...ij,j->...i", acc[..., p, :, :], skel.offsets[j])
        if j in rot_slot:
            acc[..., j, :, :] = acc[..., p, :, :] @ pose[..., rot_slot[j], :, :]
        else:
            acc[..., j, :, :] = acc[..., p, :, :]
    return pos


def keypoint_positions(pose, skel, root_rotation=None):
    """Positions of all non-root nodes: ``batch + (n_keypoints, 3)``."""
    return forward_kinematics(pose, skel, root_rotation)[..., 1:, :]


def project_2d(positions):
    """Orthographic projection: drop the third coordinate."""
    positions = np.asarray(positions, dtype=np.float64)
    return positions[..., :2]


def total_chain_length(skel):
    """Sum of all bone lengths."""
    return float(np.linalg.norm(skel.offsets, axis=-1).sum())


def _chain(n):
    # root joint pinned at the origin, n-1 further joints, one end site;
    # n rotating joints driving n unit bones along +x
    m = n + 1
    parents = [-1] + list(range(m - 1))
    offsets = np.zeros((m, 3))
    offsets[1:, 0] = 1.0
    names = [f"joint{k}" for k in range(n)] + ["end"]
    return Skeleton(parents, offsets, names, rotating=np.arange(n), leaf_set=np.array([m - 1]))


def _humanoid19():
    # 19 rotating joints (torso chain of five, collar/shoulder/elbow/wrist
    # arms, hip/knee/ankle legs) under a static pelvis root, plus five end
    # sites; mirrors a five-end-effector humanoid at unit scale
    names = []
    parents = []
    offsets = []
    rotating = []

    def add(name, parent, offset, rotates=True):
        idx = len(names)
        names.append(name)
        parents.append(parent)
        offsets.append(offset)
        if rotates:
            rotating.append(idx)
        return idx

    pelvis = add("pelvis", -1, [0.0, 0.0, 0.0], rotates=False)
    spine1 = add("spine1", pelvis, [0.0, 0.12, 0.0])
    spine2 = add("spine2", spine1, [0.0, 0.12, 0.0])
    spine3 = add("spine3", spine2, [0.0, 0.12, 0.0])
    chest = add("chest", spine3, [0.0, 0.12, 0.0])
    neck = add("neck", chest, [0.0, 0.10, 0.0])

    l_collar = add("l_collar", chest, [0.08, 0.06, 0.0])
    l_shoulder = add("l_shoulder", l_collar, [0.12, 0.0, 0.0])
    l_elbow = add("l_elbow", l_shoulder, [0.26, 0.0, 0.0])
    l_wrist = add("l_wrist", l_elbow, [0.25, 0.0, 0.0])

    r_collar = add("r_collar", chest, [-0.08, 0.06, 0.0])
    r_shoulder = add("r_shoulder", r_collar, [-0.12, 0.0, 0.0])
    r_elbow = add("r_elbow", r_shoulder, [-0.26, 0.0, 0.0])
    r_wrist = add("r_wrist", r_elbow, [-0.25, 0.0, 0.0])

    l_hip = add("l_hip", pelvis, [0.09, -0.08, 0.0])
    l_knee = add("l_knee", l_hip, [0.0, -0.38, 0.0])
    l_ankle = add("l_ankle", l_knee, [0.0, -0.38, 0.0])

    r_hip = add("r_hip", pelvis, [-0.09, -0.08, 0.0])
    r_knee = add("r_knee", r_hip, [0.0, -0.38, 0.0])
    r_ankle = add("r_ankle", r_knee, [0.0, -0.38, 0.0])

    head = add("head", neck, [0.0, 0.16, 0.0], rotates=False)
    l_hand = add("l_hand", l_wrist, [0.10, 0.0, 0.0], rotates=False)
    r_hand = add("r_hand", r_wrist, [-0.10, 0.0, 0.0], rotates=False)
    l_foot = add("l_foot", l_ankle, [0.0, -0.06, 0.12], rotates=False)
    r_foot = add("r_foot", r_ankle, [0.0, -0.06, 0.12], rotates=False)

    groups = {
        "left_arm": [l_collar, l_shoulder, l_elbow, l_wrist, l_hand],
        "right_arm": [r_collar, r_shoulder, r_elbow, r_wrist, r_hand],
        "left_leg": [l_hip, l_knee, l_ankle, l_foot],
        "right_leg": [r_hip, r_knee, r_ankle, r_foot],
        "head": [neck, head],
    }
    skel = Skeleton(parents, np.array(offsets), names,
                    rotating=np.array(rotating),
                    leaf_set=np.array([head, l_hand, r_hand, l_foot, r_foot]),
                    occlusion_groups={k: np.array(v) for k, v in groups.items()})
    return skel


def default_skeleton(variant):
    """Built-in skeletons: ``chain-N`` or ``humanoid-19``."""
    if variant == "humanoid-19":
        return _humanoid19()
    if variant.startswith("chain-"):
        n = int(variant.split("-", 1)[1])
        if n < 1:
            raise ValueError("chain length must be at least 1")
        return _chain(n)
    raise ValueError(f"unknown skeleton variant {variant!r}")


def save_skeleton(skel, path):
    """Write a skeleton as a JSON document."""
    doc = {
        "format": "so3flow-skeleton",
        "version": 1,
        "parents": skel.parents.tolist(),
        "offsets": skel.offsets.tolist(),
        "names": list(skel.names),
        "rotating": skel.rotating.tolist(),
        "leaf_set": skel.leaf_set.tolist(),
        "occlusion_groups": {k: np.asarray(v).tolist() for k, v in skel.occlusion_groups.items()},
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_skeleton(path):
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != "so3flow-skeleton":
        raise ValueError("not a skeleton document")
    if doc.get("version") != 1:
        raise ValueError(f"unsupported skeleton version {doc.get('version')!r}")
    return Skeleton(
        np.array(doc["parents"]),
        np.array(doc["offsets"]),
        doc["names"],
        rotating=np.array(doc["rotating"]),
        leaf_set=np.array(doc["leaf_set"]),
        occlusion_groups={k: np.array(v) for k, v in doc.get("occlusion_groups", {}).items()},
    )
