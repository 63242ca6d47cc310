import numpy as np
import pytest

from so3flow import kinematics as kin
from so3flow import so3


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def identity_pose(skel):
    return np.broadcast_to(np.eye(3), (skel.n_joints, 3, 3)).copy()


class TestForwardKinematics:
    def test_rest_pose_is_cumulative_offsets(self):
        skel = kin.default_skeleton("chain-3")
        pos = kin.forward_kinematics(identity_pose(skel), skel)
        np.testing.assert_allclose(pos, [[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], atol=1e-15)

    def test_three_joint_chain_middle_bend(self):
        # bare chain of three joints with unit x offsets; bending the middle
        # joint 90 degrees about z puts the end effector at (1, 1, 0)
        skel = kin.Skeleton(parents=[-1, 0, 1],
                            offsets=[[0, 0, 0], [1, 0, 0], [1, 0, 0]],
                            names=["j0", "j1", "j2"],
                            rotating=[0, 1, 2], leaf_set=[2])
        pose = np.stack([np.eye(3), rot_z(np.pi / 2), np.eye(3)])
        pos = kin.forward_kinematics(pose, skel)
        np.testing.assert_allclose(pos[-1], [1.0, 1.0, 0.0], atol=1e-15)

    def test_root_prerotation_rotates_rigidly(self):
        skel = kin.default_skeleton("humanoid-19")
        rng = np.random.default_rng(0)
        pose = so3.haar_sample(rng, skel.n_joints)
        q = so3.haar_sample(rng)
        base = kin.forward_kinematics(pose, skel)
        rotated = kin.forward_kinematics(pose, skel, root_rotation=q)
        np.testing.assert_allclose(rotated, base @ q.T, atol=1e-9)

    def test_chain_root_rotation_moves_everything(self):
        skel = kin.default_skeleton("chain-2")
        pose = np.stack([rot_z(np.pi / 2), np.eye(3)])
        pos = kin.forward_kinematics(pose, skel)
        np.testing.assert_allclose(pos[1], [0.0, 1.0, 0.0], atol=1e-15)
        np.testing.assert_allclose(pos[2], [0.0, 2.0, 0.0], atol=1e-15)

    def test_bone_lengths_preserved(self):
        skel = kin.default_skeleton("humanoid-19")
        rng = np.random.default_rng(1)
        pose = so3.haar_sample(rng, (20, skel.n_joints))
        pos = kin.forward_kinematics(pose, skel)
        for j in range(1, skel.n_nodes):
            lengths = np.linalg.norm(pos[:, j] - pos[:, skel.parents[j]], axis=-1)
            np.testing.assert_allclose(lengths, np.linalg.norm(skel.offsets[j]), atol=1e-9)

    def test_rotation_affects_only_descendants(self):
        skel = kin.default_skeleton("humanoid-19")
        rng = np.random.default_rng(2)
        pose = so3.haar_sample(rng, skel.n_joints)
        base = kin.forward_kinematics(pose, skel)
        # perturb the left elbow; only left wrist/hand may move
        slot = list(skel.rotating).index(skel.names.index("l_elbow"))
        pose2 = pose.copy()
        pose2[slot] = pose2[slot] @ rot_z(0.7)
        moved = np.linalg.norm(kin.forward_kinematics(pose2, skel) - base, axis=-1) > 1e-12
        allowed = {skel.names.index("l_wrist"), skel.names.index("l_hand")}
        assert set(np.nonzero(moved)[0]) == allowed

    def test_quaternion_pose_accepted(self):
        skel = kin.default_skeleton("chain-3")
        rng = np.random.default_rng(3)
        q = so3.haar_quat(rng, (skel.n_joints,))
        a = kin.forward_kinematics(q, skel)
        b = kin.forward_kinematics(so3.quat_to_matrix(q), skel)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_size_mismatch_rejected(self):
        skel = kin.default_skeleton("chain-3")
        with pytest.raises(ValueError, match="rotations"):
            kin.forward_kinematics(np.broadcast_to(np.eye(3), (5, 3, 3)), skel)


class TestProjection:
    def test_drops_third_coordinate(self):
        np.testing.assert_array_equal(kin.project_2d(np.array([1.0, 2.0, 3.0])), [1.0, 2.0])

    def test_z_translation_invariance(self):
        p = np.random.default_rng(4).standard_normal((7, 3))
        shifted = p + np.array([0.0, 0.0, 11.0])
        np.testing.assert_array_equal(kin.project_2d(p), kin.project_2d(shifted))

    def test_rest_pose_projection(self):
        skel = kin.default_skeleton("chain-3")
        kp = kin.keypoint_positions(identity_pose(skel), skel)
        np.testing.assert_allclose(kin.project_2d(kp), [[1, 0], [2, 0], [3, 0]], atol=1e-15)


class TestDefaultSkeletons:
    def test_chain3_rest_end_effector(self):
        skel = kin.default_skeleton("chain-3")
        assert skel.n_joints == 3
        pos = kin.forward_kinematics(identity_pose(skel), skel)
        np.testing.assert_allclose(pos[-1], [3.0, 0.0, 0.0], atol=1e-15)

    def test_humanoid_tree_is_valid(self):
        skel = kin.default_skeleton("humanoid-19")
        assert skel.n_joints == 19
        assert skel.parents[0] == -1
        assert np.all(skel.parents[1:] < np.arange(1, skel.n_nodes))
        # 19 rotating joints plus five end sites hang under a static root
        assert skel.n_keypoints == 24

    def test_humanoid_leaf_set_has_five_entries(self):
        skel = kin.default_skeleton("humanoid-19")
        assert skel.leaf_set.size == 5
        children = set(skel.parents[1:].tolist())
        for leaf in skel.leaf_set:
            assert int(leaf) not in children  # true tree leaves

    def test_occlusion_groups_cover_limbs(self):
        skel = kin.default_skeleton("humanoid-19")
        assert {"left_arm", "right_arm", "left_leg", "right_leg"} <= set(skel.occlusion_groups)
        rows = skel.group_keypoints("left_arm")
        assert rows.min() >= 0 and rows.max() < skel.n_keypoints

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError, match="variant"):
            kin.default_skeleton("biped-7")


class TestSkeletonValidation:
    def test_cycle_rejected(self):
        with pytest.raises(ValueError, match="tree"):
            kin.Skeleton(parents=[-1, 2, 1], offsets=np.ones((3, 3)),
                         names=["a", "b", "c"], rotating=[0], leaf_set=[2])

    def test_zero_total_length_rejected(self):
        with pytest.raises(ValueError, match="length"):
            kin.Skeleton(parents=[-1, 0], offsets=np.zeros((2, 3)),
                         names=["a", "b"], rotating=[0], leaf_set=[1])

    def test_json_roundtrip(self, tmp_path):
        skel = kin.default_skeleton("humanoid-19")
        path = tmp_path / "skel.json"
        kin.save_skeleton(skel, path)
        back = kin.load_skeleton(path)
        np.testing.assert_array_equal(back.parents, skel.parents)
        np.testing.assert_array_equal(back.offsets, skel.offsets)
        assert back.names == skel.names
        np.testing.assert_array_equal(back.leaf_set, skel.leaf_set)
        np.testing.assert_array_equal(back.group_keypoints("left_leg"),
                                      skel.group_keypoints("left_leg"))

    def test_wrong_document_rejected(self, tmp_path):
        path = tmp_path / "not_skel.json"
        path.write_text('{"format": "something-else"}')
        with pytest.raises(ValueError, match="skeleton"):
            kin.load_skeleton(path)
