"""Synthetic motion generator and observation pipeline."""
import numpy as np
import pytest

from lemo import autodiff as ad
from lemo import body as bd
from lemo import motion as mo
from lemo import scene as sc
from lemo import synth as sy


BODY = bd.build_body()


def heel_toe_tracks(clip):
    markers = clip.markers(BODY)
    ms = BODY.markers
    return {k: markers[:, ms.heel_toe[k]] for k in ms.heel_toe}


def test_generation_is_deterministic():
    a, la = sy.generate_motion("walk", 4.0, 17)
    b, lb = sy.generate_motion("walk", 4.0, 17)
    assert np.array_equal(a.translations(), b.translations())
    assert np.array_equal(a.rotations(), b.rotations())
    assert np.array_equal(la, lb)
    c, _ = sy.generate_motion("walk", 4.0, 18)
    assert not np.array_equal(a.rotations(), c.rotations())
    with pytest.raises(ValueError, match="unknown motion kind"):
        sy.generate_motion("cartwheel", 4.0, 0)
    with pytest.raises(ValueError, match="fewer than"):
        sy.generate_motion("walk", 1.0, 0)


def test_walk_shape_and_progress():
    clip, labels = sy.generate_motion("walk", 4.0, 3)
    assert clip.T == 120 and clip.fps == 30
    assert labels.shape == (120, 4)
    # canonical start, forward progress along +y
    assert np.allclose(clip.translations()[0, :2], 0.0, atol=1e-9)
    assert clip.translations()[-1, 1] > 0.5


def test_walk_planted_heels_are_static():
    for seed in (0, 1, 2):
        clip, _ = sy.generate_motion("walk", 4.0, seed)
        tracks = heel_toe_tracks(clip)
        planted_frac = []
        for side in "lr":
            heel = tracks[side + "_heel"]
            speed = np.linalg.norm(np.diff(heel, axis=0), axis=1) * clip.fps
            still = speed < 1e-6
            planted_frac.append(still.mean())
            assert np.all(heel[:-1][still][:, 2] < 0.03)
        assert min(planted_frac) > 0.45  # duty cycle 0.6 minus transitions


def test_walk_labels_match_threshold_rule():
    for seed in (5, 6):
        clip, labels = sy.generate_motion("walk", 4.0, seed)
        ref = mo.contact_labels(clip, BODY)
        agreement = (labels == ref).mean()
        assert agreement >= 0.95
        # both feet alternate: every foot has contact and swing frames
        assert 0.2 < labels.mean() < 0.95
        assert labels.min() == 0 and labels.max() == 1


def test_generated_poses_respect_joint_limits():
    for kind, seed in (("walk", 11), ("sit", 12), ("idle", 13)):
        clip, _ = sy.generate_motion(kind, 4.0, seed)
        theta = ad.as_tensor(clip.rotations())
        beta = ad.as_tensor(clip.scales())
        penalty = bd.e_prior(theta, beta, BODY, pose_weight=0.0,
                             limit_weight=1.0, shape_weight=0.0)
        assert penalty.data == 0.0


def test_sit_reaches_seat_without_collision():
    clip, labels = sy.generate_motion("sit", 4.0, 23)
    scene = sy.scene_for_kind("sit")
    fk = bd.forward_kinematics(clip.translations(), clip.rotations(),
                               clip.scales(), BODY)
    verts, _ = fk.surface_vertices(clip.scales())
    verts = verts.data
    sdf, _, _ = sc.sdf_query(verts.reshape(-1, 3), scene)
    sdf = sdf.reshape(verts.shape[:2])
    assert sdf.min() > -0.005  # nothing sinks into ground or seat
    glute = sdf[:, BODY.vertices.gluteus_indices]
    assert abs(glute[-1].min()) < 0.01       # seated contact at the end
    assert glute[0].min() > 0.25             # standing start is clear
    assert np.all(labels == 1)               # feet never leave the ground


def test_idle_is_nearly_static():
    clip, labels = sy.generate_motion("idle", 4.0, 31)
    vm = mo.build_velocity_map(clip, BODY)
    assert np.abs(vm).max() < 0.01           # meters per frame
    assert np.all(labels == 1)
    tracks = heel_toe_tracks(clip)
    speed = np.linalg.norm(np.diff(tracks["l_heel"], axis=0), axis=1) * clip.fps
    assert speed.max() < 1e-6


def front_camera():
    return bd.camera_lookat((0.0, 3.0, 1.0), (0.0, 0.0, 0.9))


def test_observations_noise_free_consistency():
    clip, _ = sy.generate_motion("idle", 1.5, 2, target_frames=45)
    cam = front_camera()
    obs = sy.synth_observations(clip, cam, BODY, seed=4)
    pix, valid = bd.project_2d(clip.joints(BODY), cam)
    assert np.array_equal(obs.joints2d, pix.data)
    assert np.array_equal(obs.confidence, valid.astype(float))
    assert obs.confidence.min() == 1.0
    assert obs.marker_visible.all()
    assert len(obs.clouds) == clip.T
    fk = bd.forward_kinematics(clip.translations(), clip.rotations(),
                               clip.scales(), BODY)
    verts, _ = fk.surface_vertices(clip.scales())
    for t in (0, 20):
        assert obs.clouds[t].shape == (150, 3)
        gap = np.linalg.norm(
            obs.clouds[t][:, None] - verts.data[t][None], axis=-1).min(axis=1)
        assert gap.max() < 1e-12  # clean clouds sit exactly on the surface


def test_observation_noise_levels():
    clip, _ = sy.generate_motion("idle", 1.5, 2, target_frames=45)
    cam = front_camera()
    clean = sy.synth_observations(clip, cam, BODY, 0.0, 0.0, seed=9)
    noisy = sy.synth_observations(clip, cam, BODY, 2.0, 0.01, seed=9)
    d2 = (noisy.joints2d - clean.joints2d).ravel()
    assert abs(d2.std() - 2.0) < 0.2
    d3 = np.concatenate([n - c for n, c in zip(noisy.clouds, clean.clouds)])
    assert abs(d3.ravel().std() - 0.01) < 0.001


def test_occluder_hides_lower_body():
    clip, _ = sy.generate_motion("idle", 1.5, 2, target_frames=45)
    cam = front_camera()
    wall = sc.Box((0.0, 1.5, 0.45), (1.0, 0.1, 0.45))  # shields z < ~0.8
    obs = sy.synth_observations(clip, cam, BODY, occluders=[wall], seed=4)
    ms = BODY.markers
    for key in ("l_heel", "l_toe", "r_heel", "r_toe"):
        assert not obs.marker_visible[ms.heel_toe[key]].any()
    head = [i for i, n in enumerate(ms.names) if n.startswith("head")]
    assert obs.marker_visible[head].all()
    mask, mb = sy.mask_from_visibility(obs.marker_visible, ms)
    p_rows, nb = mo.infill_dims(ms)
    assert mask.shape == (p_rows, clip.T)
    assert not mask[3 * nb:].any()  # hidden feet mask every contact row
    names = {n: i for i, n in enumerate(bd.JOINT_NAMES)}
    knees = [names["l_knee"], names["r_knee"]]
    assert obs.confidence[:, knees].max() == 0.0
    assert obs.confidence[:, names["head"]].min() == 1.0


def test_camera_behind_body_rejected():
    clip, _ = sy.generate_motion("idle", 1.5, 2, target_frames=45)
    cam = bd.camera_lookat((0.0, 3.0, 1.0), (0.0, 6.0, 1.0))
    with pytest.raises(ValueError, match="behind"):
        sy.synth_observations(clip, cam, BODY)


def test_build_dataset_layout_and_determinism(tmp_path):
    out = tmp_path / "data"
    dataset, manifest = sy.build_dataset(
        out, BODY, counts=(3, 1, 1), seed_starts=(10, 20, 30))
    assert [e.kind for e in dataset["train"]] == ["walk", "sit", "walk"]
    assert [e.seed for e in dataset["train"]] == [10, 11, 12]
    assert dataset["val"][0].kind == "walk"
    with open(manifest) as f:
        first = f.read()
    assert first.startswith("# split kind seed duration frames path\n")
    assert len(first.strip().splitlines()) == 6
    clip_file = out / "train" / "clip_10.txt"
    with open(clip_file) as f:
        clip_first = f.read()
    loaded, _ = mo.load_clip(clip_file)
    assert np.array_equal(loaded.translations(),
                          dataset["train"][0].clip.translations())

    sy.build_dataset(out, BODY, counts=(3, 1, 1), seed_starts=(10, 20, 30))
    with open(manifest) as f:
        assert f.read() == first
    with open(clip_file) as f:
        assert f.read() == clip_first

    with pytest.raises(ValueError, match="overlap"):
        sy.build_dataset(out, BODY, counts=(3, 1, 1), seed_starts=(10, 12, 30))
