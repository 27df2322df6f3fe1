"""Kinematics, markers, capsule vertices, projection, pose prior."""
import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from lemo import autodiff as ad
from lemo import body as bd


def segment_distance(p, a, b):
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else np.clip((p - a) @ ab / denom, 0.0, 1.0)
    return np.linalg.norm(p - (a + t * ab))


def fk_scalar(gamma, theta, beta, body, wts):
    fk = bd.forward_kinematics(gamma, theta, beta, body)
    return (fk.markers() * wts).sum()


def test_rest_pose_joint_table():
    body = bd.build_body()
    joints = bd.rest_joints(body)
    assert joints.shape == (22, 3)
    assert np.allclose(joints[0], 0.0)
    names = {n: i for i, n in enumerate(bd.JOINT_NAMES)}
    # spine stacks straight up, legs reach down symmetric about x
    assert np.allclose(joints[names["head"]], [0, 0, 0.57])
    assert np.allclose(joints[names["l_ankle"]], [-0.09, 0, -0.89])
    assert np.allclose(joints[names["r_ankle"]], [0.09, 0, -0.89])
    l_toe, r_toe = joints[names["l_toe"]], joints[names["r_toe"]]
    assert np.allclose(l_toe * [-1, 1, 1], r_toe)
    # standing at the canonical pelvis height puts toe-cap bottoms at z=0
    toe_r = body.radii[names["l_toe"]]
    assert abs(l_toe[2] + bd.STANDING_PELVIS_Z - toe_r) < 1e-12


def test_fk_zero_pose_matches_rest_table():
    body = bd.build_body()
    gamma = np.array([[0.3, -0.2, bd.STANDING_PELVIS_Z]])
    fk = bd.forward_kinematics(gamma, np.zeros((1, 22, 3)), np.ones(22), body)
    expect = bd.rest_joints(body) + gamma
    assert np.allclose(fk.joints.data[0], expect, atol=1e-12)


def test_fk_translation_equivariance():
    body = bd.build_body()
    rng = np.random.default_rng(3)
    theta = rng.normal(0.0, 0.25, size=(4, 22, 3))
    gamma = rng.normal(0.0, 0.5, size=(4, 3))
    beta = rng.uniform(0.9, 1.1, size=22)
    fk0 = bd.forward_kinematics(gamma, theta, beta, body)
    shift = np.array([1.0, 0.0, 0.0])
    fk1 = bd.forward_kinematics(gamma + shift, theta, beta, body)
    assert np.allclose(fk1.joints.data, fk0.joints.data + shift, atol=1e-12)
    assert np.allclose(fk1.markers().data, fk0.markers().data + shift,
                       atol=1e-12)
    v0, n0 = fk0.surface_vertices(beta)
    v1, n1 = fk1.surface_vertices(beta)
    assert np.allclose(v1.data, v0.data + shift, atol=1e-12)
    assert np.allclose(n1.data, n0.data, atol=1e-12)


def test_rodrigues_matches_reference_rotations():
    rng = np.random.default_rng(11)
    aa = rng.normal(0.0, 1.2, size=(40, 3))
    aa[0] = 0.0
    aa[1] = [1e-9, -2e-9, 5e-10]  # small-angle branch
    ours = bd.rodrigues(aa).data
    ref = Rotation.from_rotvec(aa).as_matrix()
    assert np.max(np.abs(ours - ref)) < 1e-9


def test_knee_bend_moves_ankle_like_a_rigid_transform():
    body = bd.build_body()
    names = {n: i for i, n in enumerate(bd.JOINT_NAMES)}
    theta = np.zeros((1, 22, 3))
    theta[0, names["l_knee"], 0] = -np.pi / 2  # flexion, shin swings backward
    fk = bd.forward_kinematics(np.zeros((1, 3)), theta, np.ones(22), body)
    joints = fk.joints.data[0]
    knee = bd.rest_joints(body)[names["l_knee"]]
    rot = Rotation.from_rotvec([-np.pi / 2, 0, 0]).as_matrix()
    expect = knee + rot @ body.offsets[names["l_ankle"]]
    assert np.allclose(joints[names["l_ankle"]], expect, atol=1e-12)
    assert joints[names["l_ankle"], 1] < knee[1] - 0.4  # behind the knee


def test_fk_gradients_match_finite_differences():
    body = bd.build_body(marker_kind="desk")
    rng = np.random.default_rng(19)
    t_frames = 2
    gamma0 = rng.normal(0.0, 0.3, size=(t_frames, 3))
    theta0 = rng.normal(0.0, 0.3, size=(t_frames, 22, 3))
    beta0 = rng.uniform(0.9, 1.1, size=22)
    wts = rng.normal(size=(t_frames, body.markers.count, 3))

    gamma = ad.Tensor(gamma0.copy(), requires_grad=True)
    theta = ad.Tensor(theta0.copy(), requires_grad=True)
    beta = ad.Tensor(beta0.copy(), requires_grad=True)
    fk_scalar(gamma, theta, beta, body, wts).backward()

    h = 1e-5
    cases = [("gamma", gamma, (0, 1)), ("gamma", gamma, (1, 2)),
             ("beta", beta, (7,)), ("beta", beta, (0,)), ("beta", beta, (16,)),
             ("theta", theta, (0, 7, 0)), ("theta", theta, (1, 0, 2)),
             ("theta", theta, (0, 15, 1)), ("theta", theta, (1, 11, 0))]
    for name, tensor, idx in cases:
        shifted = {"gamma": gamma0.copy(), "theta": theta0.copy(),
                   "beta": beta0.copy()}
        shifted[name][idx] += h
        f_up = fk_scalar(shifted["gamma"], shifted["theta"], shifted["beta"],
                         body, wts).item()
        shifted[name][idx] -= 2 * h
        f_dn = fk_scalar(shifted["gamma"], shifted["theta"], shifted["beta"],
                         body, wts).item()
        fd = (f_up - f_dn) / (2 * h)
        got = tensor.grad[idx]
        assert abs(got - fd) < 1e-3 * max(1.0, abs(fd)), (name, idx, got, fd)


def test_fk_global_yaw_rotates_everything_rigidly():
    body = bd.build_body()
    rng = np.random.default_rng(23)
    theta = rng.normal(0.0, 0.3, size=(3, 22, 3))
    theta[:, 0, :] = 0.0
    gamma = rng.normal(0.0, 0.4, size=(3, 3))
    yaw = 1.1
    rot = Rotation.from_rotvec([0, 0, yaw]).as_matrix()
    theta_y = theta.copy()
    theta_y[:, 0, :] = [0, 0, yaw]
    fk0 = bd.forward_kinematics(gamma, theta, np.ones(22), body)
    fk1 = bd.forward_kinematics(gamma @ rot.T, theta_y, np.ones(22), body)
    m0, m1 = fk0.markers().data, fk1.markers().data
    assert np.max(np.abs(m0 @ rot.T - m1)) < 1e-6


def test_marker_tables():
    full = bd.build_marker_set("full")
    assert full.count == 81
    assert len(full.body_indices) == 67
    assert len(full.face_indices) == 14
    assert len(full.heel_toe_indices) == 4
    assert len(full.lower_body_indices) == 20
    assert len(set(full.names)) == full.count
    desk = bd.build_marker_set("desk")
    assert desk.count == 23
    assert len(desk.body_indices) == 19
    assert len(set(desk.names)) == desk.count
    for ms in (full, desk):
        for k in ("l_heel", "l_toe", "r_heel", "r_toe"):
            assert ms.names[ms.heel_toe[k]] == k
            assert ms.heel_toe[k] in set(ms.lower_body_indices)
    with pytest.raises(ValueError):
        bd.build_marker_set("tiny")


def test_vertex_sets_counts_and_surface_placement():
    body = bd.build_body()
    vs = body.vertices
    assert len(vs.foot_indices) == 194
    assert len(vs.gluteus_indices) == 113
    assert not set(vs.foot_indices) & set(vs.gluteus_indices)
    contact = vs.contact_indices
    assert len(contact) == 307
    assert set(contact) <= set(range(vs.count))
    # every vertex sits exactly one radius away from its bone axis segment
    for i in range(0, vs.count, 7):
        j = vs.joints[i]
        local = vs.fracs[i] * body.offsets[j] + vs.radials[i]
        d = segment_distance(local, np.zeros(3), body.offsets[j])
        assert abs(d - body.radii[j]) < 1e-9
        assert abs(np.linalg.norm(vs.normals[i]) - 1.0) < 1e-9
    # gluteus points hang below and behind the pelvis center
    glut = vs.radials[vs.gluteus_indices]
    assert np.all(glut[:, 2] < 0)


def test_standing_feet_graze_the_ground():
    body = bd.build_body()
    gamma = np.array([[0.0, 0.0, bd.STANDING_PELVIS_Z]])
    fk = bd.forward_kinematics(gamma, np.zeros((1, 22, 3)), np.ones(22), body)
    verts, _ = fk.surface_vertices(np.ones(22))
    feet = verts.data[0, body.vertices.foot_indices]
    assert feet[:, 2].min() > -1e-9
    assert feet[:, 2].min() < 0.005


def test_project_2d_pinhole_properties():
    cam = bd.camera_lookat([0.0, -2.0, 1.0], [0.0, 0.0, 1.0],
                           focal=400.0, cx=320.0, cy=240.0)
    on_axis = np.array([[0.0, 0.0, 1.0]])
    pix, valid = bd.project_2d(on_axis, cam)
    assert valid.all()
    assert np.allclose(pix.data, [[320.0, 240.0]], atol=1e-9)

    # doubling depth along the axis halves the principal-point offset
    eye = np.array([0.0, -2.0, 1.0])
    fwd = np.array([0.0, 1.0, 0.0])
    side = np.array([0.3, 0.0, 0.17])
    p1 = eye + 1.0 * fwd + side
    p2 = eye + 2.0 * fwd + 2 * side  # same ray, twice the depth
    px1, _ = bd.project_2d(p1.reshape(1, 3), cam)
    px2, _ = bd.project_2d(p2.reshape(1, 3), cam)
    assert np.allclose(px1.data, px2.data, atol=1e-9)
    p3 = eye + 2.0 * fwd + side
    px3, _ = bd.project_2d(p3.reshape(1, 3), cam)
    off1 = px1.data[0] - [320.0, 240.0]
    off3 = px3.data[0] - [320.0, 240.0]
    assert np.allclose(off3, off1 / 2.0, atol=1e-9)

    rng = np.random.default_rng(5)
    pts = rng.normal(0.0, 1.0, size=(20, 3)) + [0, 0, 1]
    pix, valid = bd.project_2d(pts, cam)
    campts = pts @ cam.rot.T + cam.trans
    for i in range(20):
        x, y, z = campts[i]
        assert valid[i] == (z > 1e-6)
        if valid[i]:
            assert abs(pix.data[i, 0] - (400.0 * x / z + 320.0)) < 1e-9
            assert abs(pix.data[i, 1] - (400.0 * y / z + 240.0)) < 1e-9

    behind = eye.reshape(1, 3) - fwd  # 1 m behind the camera
    _, valid = bd.project_2d(behind, cam)
    assert not valid.any()


def test_project_2d_gradients():
    cam = bd.camera_lookat([0.5, -2.0, 1.4], [0.0, 0.0, 0.9])
    rng = np.random.default_rng(7)
    pts0 = rng.normal(0.0, 0.5, size=(4, 3))
    wts = rng.normal(size=(4, 2))
    pts = ad.Tensor(pts0.copy(), requires_grad=True)
    pix, _ = bd.project_2d(pts, cam)
    (pix * wts).sum().backward()
    h = 1e-6
    for idx in [(0, 0), (1, 2), (3, 1)]:
        up, dn = pts0.copy(), pts0.copy()
        up[idx] += h
        dn[idx] -= h
        fd = ((bd.project_2d(up, cam)[0] * wts).sum().item()
              - (bd.project_2d(dn, cam)[0] * wts).sum().item()) / (2 * h)
        assert abs(pts.grad[idx] - fd) < 1e-3 * max(1.0, abs(fd))


def test_e_prior_values():
    body = bd.build_body()
    zero = bd.e_prior(np.zeros((1, 22, 3)), np.ones(22), body)
    assert zero.item() == 0.0

    names = {n: i for i, n in enumerate(bd.JOINT_NAMES)}
    theta = np.zeros((1, 22, 3))
    lo = body.limits_lo[names["l_knee"], 0]
    theta[0, names["l_knee"], 0] = lo - 0.2  # 0.2 rad past the hinge stop
    e = bd.e_prior(theta, np.ones(22), body,
                   pose_weight=0.0, limit_weight=7.0, shape_weight=0.0)
    assert abs(e.item() - 0.04 * 7.0) < 1e-12

    beta = np.ones(22)
    beta[4] = 1.1
    e = bd.e_prior(np.zeros((1, 22, 3)), beta, body,
                   pose_weight=0.0, limit_weight=0.0, shape_weight=10.0)
    assert abs(e.item() - 0.1) < 1e-12

    # inside the limit boxes only the quadratic pull remains; root exempt
    theta = np.zeros((2, 22, 3))
    theta[:, 0, :] = 2.0  # root heading, not penalized
    theta[0, names["spine2"], 1] = 0.1
    e = bd.e_prior(theta, np.ones(22), body,
                   pose_weight=3.0, limit_weight=0.0, shape_weight=0.0)
    assert abs(e.item() - 3.0 * 0.01) < 1e-12


def test_e_prior_gradient_flows_to_pose():
    body = bd.build_body()
    theta = ad.Tensor(np.full((1, 22, 3), 0.05), requires_grad=True)
    beta = ad.Tensor(np.ones(22), requires_grad=True)
    bd.e_prior(theta, beta, body).backward()
    assert theta.grad is not None
    assert np.allclose(theta.grad[0, 0], 0.0)  # root heading exempt
    assert np.any(theta.grad[0, 1:] != 0.0)


def test_body_config_round_trip(tmp_path):
    body = bd.build_body(marker_kind="desk", foot_count=48, gluteus_count=25)
    path = tmp_path / "body.cfg"
    bd.save_body_config(path, body)
    back = bd.load_body_config(path)
    assert np.array_equal(back.offsets, body.offsets)
    assert np.array_equal(back.radii, body.radii)
    assert np.array_equal(back.limits_lo, body.limits_lo)
    assert back.markers.names == body.markers.names
    assert np.array_equal(back.markers.offsets, body.markers.offsets)
    assert back.markers.heel_toe == body.markers.heel_toe
    assert np.array_equal(back.vertices.radials, body.vertices.radials)
    assert len(back.vertices.foot_indices) == 48
    assert len(back.vertices.gluteus_indices) == 25
