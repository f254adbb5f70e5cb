import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from surfgen import synthetic as sy
from surfgen.mesh import Upsampler, regress_joints, vertex_normals


@pytest.fixture(scope="module")
def spec():
    return sy.default_skeleton()


@pytest.fixture(scope="module")
def topo(spec):
    return sy.build_topology(spec)


@pytest.fixture(scope="module")
def data(spec, topo):
    return sy.generate_dataset(spec, 12, seed=3, topology=topo)


def unit_scale(spec):
    return np.ones(len(spec.parents))


def test_topology_counts(spec, topo):
    # torso 16 rings and four limbs of 8 rings, each ring 8 vertices; coarse halves both directions
    assert topo.n_dense == 8 * (16 + 4 * 8) == 384
    assert topo.n_coarse == 96 and topo.n_mid == 192 and topo.n_joints == 10
    assert spec.n_dof == 10
    topo.validate()
    np.testing.assert_allclose(np.asarray(topo.downsample.sum(axis=1)).ravel(), 1.0)
    np.testing.assert_allclose(np.asarray(topo.joint_regressor.sum(axis=1)).ravel(), 1.0)
    np.testing.assert_allclose(np.asarray(topo.prolong_mid.sum(axis=1)).ravel(), 1.0)
    np.testing.assert_allclose(np.asarray(topo.prolong_dense.sum(axis=1)).ravel(), 1.0, atol=1e-12)


def test_forward_kinematics_against_rotation_oracle(spec):
    offsets = spec.offsets
    ax, az = 0.3, -0.5
    pos, rot = sy.forward_kinematics(spec, {1: np.array([ax, az])}, offsets)
    r_neck = Rotation.from_euler("z", az).as_matrix() @ Rotation.from_euler("x", ax).as_matrix()
    np.testing.assert_allclose(rot[1], r_neck, atol=1e-14)
    np.testing.assert_allclose(pos[1], r_neck @ offsets[1], atol=1e-14)
    # the shoulder rides along with the neck bone
    np.testing.assert_allclose(pos[4], pos[1] + r_neck @ offsets[4], atol=1e-14)
    # untouched branches keep their rest placement
    np.testing.assert_allclose(pos[8], offsets[2] + offsets[8], atol=1e-14)


def test_rest_pose_regresses_to_fk_joints(spec, topo):
    dense, joints = sy.pose_body(spec, {}, unit_scale(spec), 1.0)
    np.testing.assert_allclose(regress_joints(dense, topo), joints, atol=1e-12)


def test_dataset_joints_are_regressed_and_canonical(data, topo):
    np.testing.assert_allclose(regress_joints(data.dense, topo), data.joints, atol=1e-10)
    ids = topo.landmark_ids
    j = data.joints
    np.testing.assert_allclose(j[:, ids["pelvis"]], 0.0, atol=1e-12)
    spine = j[:, ids["neck"]]
    np.testing.assert_allclose(spine[:, [0, 2]], 0.0, atol=1e-12)
    assert np.all(spine[:, 1] > 0)
    hips = j[:, ids["hip_left"]] - j[:, ids["hip_right"]]
    np.testing.assert_allclose(hips[:, 2], 0.0, atol=1e-12)
    assert np.all(hips[:, 0] > 0)


def test_coarse_is_downsampled_dense_and_normals_unit(data, topo):
    np.testing.assert_allclose(data.coarse, np.stack([topo.downsample @ d for d in data.dense]), atol=1e-15)
    np.testing.assert_allclose(np.linalg.norm(data.normals, axis=-1), 1.0, atol=1e-12)


def test_normals_point_away_from_bone(spec, topo):
    dense, _ = sy.pose_body(spec, {}, unit_scale(spec), 1.0)
    n = vertex_normals(dense, topo.faces_dense)
    # torso rings sit around the y axis; outward means along the radial direction
    torso = dense[:128]
    radial = torso * np.array([1.0, 0.0, 1.0])
    assert np.all(np.sum(n[:128] * radial, axis=1) > 0)


def test_generation_is_seeded(spec, topo):
    a = sy.generate_dataset(spec, 4, seed=11, topology=topo)
    b = sy.generate_dataset(spec, 4, seed=11, topology=topo)
    c = sy.generate_dataset(spec, 4, seed=12, topology=topo)
    assert np.array_equal(a.dense, b.dense) and np.array_equal(a.joints, b.joints)
    assert not np.allclose(a.dense, c.dense)


def test_prolongation_exact_at_rest(spec, topo):
    for radius in (0.9, 1.0, 1.1):
        dense, _ = sy.pose_body(spec, {}, unit_scale(spec), radius)
        up = Upsampler.from_topology(topo)
        up.trained = True
        np.testing.assert_allclose(up(topo.downsample @ dense), dense, atol=1e-12)


def test_bone_lengths_follow_scale(spec):
    scale = np.linspace(0.9, 1.1, len(spec.parents))
    angles = {k: np.array([0.2, -0.1]) for k in spec.limits}
    _, joints = sy.pose_body(spec, angles, scale, 1.0)
    for c in range(1, len(spec.parents)):
        length = np.linalg.norm(joints[c] - joints[spec.parents[c]])
        assert length == pytest.approx(np.linalg.norm(spec.offsets[c]) * scale[c], rel=1e-12)


def test_sample_pose_within_limits(spec):
    rng = np.random.default_rng(0)
    for _ in range(50):
        angles, scale, radius = sy.sample_pose(spec, rng)
        for k, lim in spec.limits.items():
            assert np.all(angles[k] >= lim[:, 0]) and np.all(angles[k] <= lim[:, 1])
        assert 0.85 <= radius <= 1.15
        assert np.all((scale >= 0.9**2 - 1e-12) & (scale <= 1.1**2 + 1e-12))


def test_resegment_skeleton(spec):
    parents = spec.parents
    rng = np.random.default_rng(4)
    a = rng.normal(size=(10, 3))
    b = rng.normal(size=(10, 3))
    out = sy.resegment_skeleton(a, b, parents)
    for c in range(1, 10):
        p = parents[c]
        assert np.linalg.norm(out[c] - out[p]) == pytest.approx(np.linalg.norm(b[c] - b[p]))
        d_out = (out[c] - out[p]) / np.linalg.norm(out[c] - out[p])
        d_a = (a[c] - a[p]) / np.linalg.norm(a[c] - a[p])
        np.testing.assert_allclose(d_out, d_a, atol=1e-12)
    np.testing.assert_array_equal(out[0], a[0])
    with pytest.raises(ValueError):
        sy.resegment_skeleton(a, b[:5], parents)


def test_skeleton_spec_validation(spec):
    with pytest.raises(ValueError):
        sy.SkeletonSpec(spec.joint_names, [-1, 2, 0, 0, 1, 1, 4, 5, 2, 3], spec.offsets, spec.limits, spec.tubes)
    with pytest.raises(ValueError):
        sy.SkeletonSpec(spec.joint_names, spec.parents, spec.offsets, {1: [[0.5, -0.5], [0, 0]]}, spec.tubes)
    with pytest.raises(ValueError):
        sy.SkeletonSpec(spec.joint_names, spec.parents, spec.offsets, spec.limits, [sy.Tube(0, 6, 8, 0.1)])


def test_dataset_disk_roundtrip(tmp_path, data, topo):
    small = data.subset([0, 1, 2])
    sy.write_dataset(tmp_path, small)
    back = sy.read_dataset(tmp_path)
    assert back.topology.n_dense == topo.n_dense
    np.testing.assert_allclose(back.dense, small.dense, atol=1e-6)
    np.testing.assert_allclose(back.joints, small.joints, atol=1e-6)
    np.testing.assert_allclose(back.coarse, small.coarse, atol=1e-6)
    with pytest.raises(FileNotFoundError):
        sy.read_dataset(tmp_path / "missing", topology=topo)
