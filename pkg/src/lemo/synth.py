"""Deterministic synthetic motion and observation generation.

Walks are built from an analytic gait plan: stance ankles are pinned in
world space and a two-link leg IK turns targets into hip/knee/ankle
rotations, so planted heels are exactly static.  Sitting lowers the
pelvis onto a fixed seat box until the gluteus sphere touches its top;
idling sways in place.  Observations project joints through a camera,
sample visible surface points, and apply box occluders.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import body as bd
from . import motion as mo
from . import scene as sc

SEAT_BOX = ((0.0, -0.23, 0.20), (0.25, 0.10, 0.20))  # center, half extents


def scene_for_kind(kind):
    if kind == "sit":
        return sc.make_ground_scene([SEAT_BOX])
    return sc.make_ground_scene()


def _quintic(u):
    """Smoothstep with zero velocity and acceleration at both ends."""
    return u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)


def _bump(u):
    return np.sin(np.pi * u)


def _leg_ik(hip_world, ankle_world, rot_root, l_thigh, l_shin):
    """Hip/knee axis-angle putting the ankle at the target.

    The knee is a pure x hinge; the hip takes the minimal rotation that
    aligns the bent leg with the target direction.
    """
    d = rot_root.T @ (ankle_world - hip_world)
    dist = np.linalg.norm(d)
    reach = 0.995 * (l_thigh + l_shin)
    if dist > reach:
        d = d * (reach / dist)
        dist = reach
    dist = max(dist, 1e-6)
    cos_k = (l_thigh ** 2 + l_shin ** 2 - dist ** 2) / (2 * l_thigh * l_shin)
    interior = np.arccos(np.clip(cos_k, -1.0, 1.0))
    knee = -(np.pi - interior)  # flexion swings the shin backward
    # leg direction with only the knee bent
    u = np.array([0.0, l_shin * np.sin(knee), -l_thigh - l_shin * np.cos(knee)])
    axis = np.cross(u, d)
    norm = np.linalg.norm(axis)
    if norm < 1e-12:
        hip = np.zeros(3)
    else:
        ang = np.arctan2(norm, float(u @ d))
        hip = axis / norm * ang
    return hip, np.array([knee, 0.0, 0.0])


def _plant_ankle_z(body, beta):
    names = {n: i for i, n in enumerate(bd.JOINT_NAMES)}
    j = names["l_toe"]
    return body.radii[j] - body.offsets[j][2] * beta[j]


@dataclass
class GaitPlan:
    period: float
    stride: float
    duty: float
    lift: float
    foot_x: dict
    ankle_z: float

    def foot_state(self, t, side):
        """(ankle target, planted) for one foot at time t."""
        phase = 0.0 if side == "l" else 0.5
        c = t / self.period + phase
        k = np.floor(c)
        u = c - k
        y_now = (k - phase) * self.stride
        x = self.foot_x[side]
        if u < self.duty:
            return np.array([x, y_now, self.ankle_z]), True
        w = (u - self.duty) / (1.0 - self.duty)
        y = y_now + _quintic(w) * self.stride
        z = self.ankle_z + self.lift * _bump(w)
        return np.array([x, y, z]), False


def _arm_pose(rots, names, t, period, amp, side_sign, phase):
    s = np.sin(2.0 * np.pi * t / period + phase)
    rots[names["l_shoulder" if side_sign < 0 else "r_shoulder"], 0] = amp * s
    rots[names["l_elbow" if side_sign < 0 else "r_elbow"], 0] = \
        0.25 + 0.10 * max(0.0, s)


def _solve_legs(trans, rot_root, plan_l, plan_r, body, beta, names, rots):
    for side, target in (("l", plan_l), ("r", plan_r)):
        hip_j = names[side + "_hip"]
        knee_j = names[side + "_knee"]
        ankle_j = names[side + "_ankle"]
        thigh = np.linalg.norm(body.offsets[knee_j]) * beta[knee_j]
        shin = np.linalg.norm(body.offsets[ankle_j]) * beta[ankle_j]
        hip_world = trans + rot_root @ (body.offsets[hip_j] * beta[hip_j])
        hip_aa, knee_aa = _leg_ik(hip_world, target, rot_root, thigh, shin)
        rots[names[side + "_hip"]] = hip_aa
        rots[names[side + "_knee"]] = knee_aa
        # ankle counter-rotation keeps the foot flat and world-aligned
        chain = rot_root @ mo.axis_angle_to_matrix(hip_aa) \
            @ mo.axis_angle_to_matrix(knee_aa)
        rots[names[side + "_ankle"]] = mo.matrix_to_axis_angle(chain.T)


def _planned_marker_labels(heel_traj, toe_traj, fps):
    """Thresholded contact labels from planned marker tracks (T,3) each."""
    labels = np.zeros((len(heel_traj), 2), dtype=np.int64)
    for i, traj in enumerate((heel_traj, toe_traj)):
        speed = np.linalg.norm(np.diff(traj, axis=0), axis=1) * fps
        speed = np.concatenate([speed, speed[-1:]])
        low = traj[:, 2] < mo.CONTACT_HEIGHT_LIMIT
        labels[:, i] = (speed < mo.CONTACT_SPEED_LIMIT) & low
    return labels


def generate_motion(kind, duration, seed, body=None, fps=mo.DEFAULT_FPS,
                    target_frames=120):
    """Procedural clip + ground-truth contact labels [l_heel,l_toe,r_heel,r_toe].

    Deterministic per seed; the returned clip is canonicalized (frame-0
    pelvis over the origin, hips spanning x).
    """
    if duration * fps < target_frames:
        raise ValueError(
            f"duration {duration}s gives fewer than {target_frames} frames")
    if body is None:
        body = bd.build_body()
    rng = np.random.default_rng(seed)
    names = {n: i for i, n in enumerate(bd.JOINT_NAMES)}
    t_raw = int(round(duration * fps))
    beta = rng.uniform(0.98, 1.02, size=22)
    ankle_z = _plant_ankle_z(body, beta)
    times = np.arange(t_raw) / fps

    trans = np.zeros((t_raw, 3))
    rots = np.zeros((t_raw, 22, 3))
    ms = body.markers
    heel_off = {s: ms.offsets[ms.heel_toe[s + "_heel"]] for s in "lr"}
    toe_off = {s: ms.offsets[ms.heel_toe[s + "_toe"]] for s in "lr"}
    marker_tracks = {s: {"heel": np.zeros((t_raw, 3)),
                         "toe": np.zeros((t_raw, 3))} for s in "lr"}

    def record_foot_markers(i, side, ankle_target):
        # planned marker tracks; foot world rotation is identity by design
        tr = marker_tracks[side]
        tr["heel"][i] = ankle_target + heel_off[side]
        j = names[side + "_toe"]
        tr["toe"][i] = ankle_target + body.offsets[j] * beta[j] + toe_off[side]

    if kind == "walk":
        period = rng.uniform(1.0, 1.25)
        speed = rng.uniform(0.28, 0.38)
        stride = min(speed * period, 0.40)  # keeps stance legs off the reach clamp
        speed = stride / period
        plan = GaitPlan(period, stride, 0.60, rng.uniform(0.04, 0.07),
                        {"l": -0.10, "r": 0.10}, ankle_z)
        bob = rng.uniform(0.008, 0.018)
        sway = rng.uniform(0.015, 0.030)
        arm = rng.uniform(0.15, 0.30)
        yaw_osc = rng.uniform(0.01, 0.04)
        z_walk = rng.uniform(0.865, 0.885)
        lean = rng.uniform(0.02, 0.06)
        for i, t in enumerate(times):
            ph = 2.0 * np.pi * t / period
            trans[i] = [sway * np.sin(ph),
                        speed * t - 0.25 * stride,
                        z_walk + bob * np.sin(2 * ph)]
            rots[i, 0] = [0.0, 0.0, yaw_osc * np.sin(ph)]
            rots[i, names["spine1"], 0] = lean
            rots[i, names["spine2"], 2] = 0.4 * yaw_osc * np.sin(ph + np.pi)
            rots[i, names["neck"], 0] = -0.5 * lean
            rot_root = mo.rot_z(rots[i, 0, 2])
            tgt_l, _ = plan.foot_state(t, "l")
            tgt_r, _ = plan.foot_state(t, "r")
            _solve_legs(trans[i], rot_root, tgt_l, tgt_r, body, beta,
                        names, rots[i])
            _arm_pose(rots[i], names, t, period, arm, -1, 0.0)
            _arm_pose(rots[i], names, t, period, arm, +1, np.pi)
            record_foot_markers(i, "l", tgt_l)
            record_foot_markers(i, "r", tgt_r)
    elif kind in ("sit", "idle"):
        foot_y = 0.12 if kind == "sit" else 0.0
        feet = {"l": np.array([-0.10, foot_y, ankle_z]),
                "r": np.array([0.10, foot_y, ankle_z])}
        if kind == "sit":
            top = SEAT_BOX[0][2] + SEAT_BOX[1][2]
            seat_z = top + body.radii[0]
            t_down0 = rng.uniform(0.5, 0.9)
            t_down1 = t_down0 + rng.uniform(0.9, 1.3)
        sway_a = rng.uniform(0.01, 0.025)
        sway_p = rng.uniform(1.8, 3.0)
        z_stand = rng.uniform(0.895, 0.910)
        for i, t in enumerate(times):
            s = np.sin(2 * np.pi * t / sway_p)
            c = np.cos(2 * np.pi * t / sway_p)
            if kind == "sit":
                u = np.clip((t - t_down0) / (t_down1 - t_down0), 0.0, 1.0)
                blend = _quintic(u)
                pz = (1 - blend) * z_stand + blend * seat_z
                py = blend * -0.16
                lean = 0.35 * _bump(blend)  # lean into the descent
            else:
                pz, py, lean = z_stand, 0.0, 0.0
            trans[i] = [sway_a * s * 0.5, py + sway_a * c * 0.3, pz]
            rots[i, names["spine1"], 0] = lean + 0.02 * s
            rots[i, names["spine2"], 0] = 0.5 * lean
            rots[i, names["neck"], 0] = -0.6 * lean + 0.02 * c
            rots[i, names["head"], 2] = 0.05 * s
            rot_root = np.eye(3)
            _solve_legs(trans[i], rot_root, feet["l"], feet["r"], body,
                        beta, names, rots[i])
            _arm_pose(rots[i], names, t, sway_p, 0.04, -1, 0.0)
            _arm_pose(rots[i], names, t, sway_p, 0.04, +1, np.pi)
            record_foot_markers(i, "l", feet["l"])
            record_foot_markers(i, "r", feet["r"])
    else:
        raise ValueError(f"unknown motion kind {kind!r}")

    labels = np.concatenate(
        [_planned_marker_labels(marker_tracks["l"]["heel"],
                                marker_tracks["l"]["toe"], fps),
         _planned_marker_labels(marker_tracks["r"]["heel"],
                                marker_tracks["r"]["toe"], fps)], axis=1)

    raw = mo.MotionClip.from_arrays(
        trans, rots, np.tile(beta, (t_raw, 1)),
        np.zeros((t_raw, bd.EXPRESSION_DIM)), fps, body.marker_kind)
    clip = mo.preprocess_clip(raw, body, target_frames=target_frames, fps=fps)
    return clip, labels[:target_frames]


# --- observations ---------------------------------------------------------------


@dataclass
class Observations:
    joints2d: np.ndarray      # (T, J, 2) pixels
    confidence: np.ndarray    # (T, J) in [0,1]
    clouds: list              # per frame (n_t, 3) world points
    marker_visible: np.ndarray  # (M, T) 0/1
    camera: bd.Camera


def _ray_blocked(origin, targets, boxes):
    """True per target when the origin->target segment crosses any box."""
    blocked = np.zeros(len(targets), dtype=bool)
    d = targets - origin
    parallel = np.abs(d) < 1e-12
    for box in boxes:
        lo = box.center - box.half
        hi = box.center + box.half
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - origin) / d
            t2 = (hi - origin) / d
        t_lo = np.minimum(t1, t2)
        t_hi = np.maximum(t1, t2)
        in_slab = (origin >= lo) & (origin <= hi)  # (3,)
        t_lo = np.where(parallel, np.where(in_slab, -np.inf, np.inf), t_lo)
        t_hi = np.where(parallel, np.where(in_slab, np.inf, -np.inf), t_hi)
        tmin = t_lo.max(axis=1)
        tmax = t_hi.min(axis=1)
        blocked |= (tmax >= tmin) & (tmin > 0.0) & (tmin < 1.0)
    return blocked


def synth_observations(clip, camera, body, sigma_2d=0.0, sigma_3d=0.0,
                       occluders=(), seed=0, cloud_points=150):
    """Per-frame 2D joints + confidences, surface point cloud, marker mask."""
    rng = np.random.default_rng(seed)
    occluders = [b if isinstance(b, sc.Box) else sc.Box(*b) for b in occluders]
    eye = -camera.rot.T @ camera.trans
    joints = clip.joints(body)
    pelvis_depth = (joints[:, 0] @ camera.rot.T + camera.trans)[:, 2]
    if np.any(pelvis_depth <= 0):
        raise ValueError("camera sits behind the body; observations undefined")

    pix, valid = bd.project_2d(joints, camera)
    joints2d = pix.data.copy()
    conf = valid.astype(np.float64)
    markers = clip.markers(body)
    t_frames = clip.T
    marker_vis = np.ones((markers.shape[1], t_frames))
    fk = bd.forward_kinematics(clip.translations(), clip.rotations(),
                               clip.scales(), body)
    verts, normals = fk.surface_vertices(clip.scales())
    verts, normals = verts.data, normals.data

    clouds = []
    for t in range(t_frames):
        if occluders:
            conf[t] *= ~_ray_blocked(eye, joints[t], occluders)
            marker_vis[:, t] = ~_ray_blocked(eye, markers[t], occluders)
        facing = np.einsum("vk,vk->v", normals[t], eye - verts[t]) > 0
        vis = facing.copy()
        if occluders:
            vis[facing] &= ~_ray_blocked(eye, verts[t][facing], occluders)
        pool = np.where(vis)[0]
        if len(pool) > cloud_points:
            pool = rng.choice(pool, size=cloud_points, replace=False)
        # zero-sigma draws keep the rng stream aligned across noise levels
        pts = verts[t][pool] + rng.normal(0.0, sigma_3d, size=(len(pool), 3))
        clouds.append(pts)
    joints2d += rng.normal(0.0, sigma_2d, size=joints2d.shape)
    return Observations(joints2d, conf, clouds, marker_vis, camera)


def mask_from_visibility(marker_vis, marker_set):
    """Infill row mask + body marker mask from a marker visibility table."""
    t_frames = marker_vis.shape[1]
    p_rows, nb = mo.infill_dims(marker_set)
    mask = np.ones((p_rows, t_frames))
    mb = np.asarray(marker_vis, dtype=np.float64)[marker_set.body_indices]
    for i in range(nb):
        mask[3 * i:3 * i + 3] = mb[i]
    feet = mo._foot_row_positions(marker_set)
    for side, rows in feet.items():
        hidden = (mb[rows[0]] == 0) | (mb[rows[1]] == 0)
        base = 3 * nb + (0 if side == "l" else 2)
        mask[base:base + 2, hidden] = 0.0
    return mask, mb


# --- dataset -------------------------------------------------------------------

DEFAULT_KIND_CYCLE = ("walk", "sit", "walk", "idle")


@dataclass
class DatasetEntry:
    split: str
    kind: str
    seed: int
    path: str
    clip: object
    labels: np.ndarray


def build_dataset(out_dir, body=None, counts=(64, 8, 8),
                  seed_starts=(1000, 2000, 3000), duration=4.0,
                  target_frames=120,
                  kind_cycles=(DEFAULT_KIND_CYCLE, ("walk",), ("walk",))):
    """Write train/val/test clips + a manifest; deterministic per seeds."""
    if body is None:
        body = bd.build_body()
    splits = ("train", "val", "test")
    ranges = [range(s, s + n) for s, n in zip(seed_starts, counts)]
    for i in range(len(ranges)):
        for j in range(i + 1, len(ranges)):
            if set(ranges[i]) & set(ranges[j]):
                raise ValueError("split seed ranges overlap")
    os.makedirs(out_dir, exist_ok=True)
    dataset = {}
    manifest_rows = []
    for split, rng_seeds, cycle in zip(splits, ranges, kind_cycles):
        split_dir = os.path.join(out_dir, split)
        os.makedirs(split_dir, exist_ok=True)
        entries = []
        for i, seed in enumerate(rng_seeds):
            kind = cycle[i % len(cycle)]
            clip, labels = generate_motion(kind, duration, seed, body,
                                           target_frames=target_frames)
            path = os.path.join(split_dir, f"clip_{seed}.txt")
            mo.save_clip(path, clip)
            entries.append(DatasetEntry(split, kind, seed, path, clip, labels))
            manifest_rows.append(
                f"{split} {kind} {seed} {duration!r} {target_frames} {path}")
        dataset[split] = entries
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w") as f:
        f.write("# split kind seed duration frames path\n")
        for row in manifest_rows:
            f.write(row + "\n")
    return dataset, manifest
