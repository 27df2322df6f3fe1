"""Motion clips, canonicalization, and the two network input encodings.

A clip is a list of per-frame body parameters at fixed fps.  From it we
derive the velocity map fed to the smoothness autoencoder (per-frame
marker differences, meters/frame) and the infill tensor fed to the
infilling network (pelvis-local marker rows + contact rows + repeated
root-velocity channels).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import body as bd

DEFAULT_FPS = 30
CONTACT_SPEED_LIMIT = 0.20   # m/s, label a marker planted below this
CONTACT_HEIGHT_LIMIT = 0.10  # m above the ground


def rot_z(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def wrap_angle(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def axis_angle_to_matrix(aa):
    return bd.rodrigues(np.asarray(aa, dtype=np.float64)[None]).data[0]


def matrix_to_axis_angle(rot):
    """Log map, stable near 0 and pi; returns magnitude < pi + eps."""
    rot = np.asarray(rot, dtype=np.float64)
    vec = 0.5 * np.array([rot[2, 1] - rot[1, 2],
                          rot[0, 2] - rot[2, 0],
                          rot[1, 0] - rot[0, 1]])
    cos = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    ang = np.arccos(cos)
    if ang < 1e-7:
        return vec  # vec = sin(ang)*axis ~ ang*axis
    if ang > np.pi - 1e-5:
        # sin(ang) ~ 0: (R + I)/2 ~ axis*axis^T, read off its largest column
        m = (rot + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(m)))
        axis = m[:, k] / np.linalg.norm(m[:, k])
        if axis @ vec < 0:
            axis = -axis
        return ang * axis
    return ang * vec / np.sin(ang)


@dataclass
class MotionClip:
    fps: int
    frames: list
    marker_kind: str = "full"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def T(self):
        return len(self.frames)

    def translations(self):
        return np.stack([f.translation for f in self.frames])

    def rotations(self):
        return np.stack([f.pose.rotations for f in self.frames])

    def scales(self):
        return np.stack([f.shape.scales for f in self.frames])

    def expressions(self):
        return np.stack([f.pose.expression for f in self.frames])

    @classmethod
    def from_arrays(cls, trans, rots, scales, exprs=None, fps=DEFAULT_FPS,
                    marker_kind="full"):
        t_frames = len(trans)
        if exprs is None:
            exprs = np.zeros((t_frames, bd.EXPRESSION_DIM))
        frames = [bd.BodyParams(trans[t], bd.BodyShape(scales[t]),
                                bd.BodyPose(rots[t], exprs[t]))
                  for t in range(t_frames)]
        return cls(fps, frames, marker_kind)

    def copy(self):
        return MotionClip.from_arrays(
            self.translations().copy(), self.rotations().copy(),
            self.scales().copy(), self.expressions().copy(),
            self.fps, self.marker_kind)

    def _fk(self, body):
        key = id(body)
        if self._cache.get("key") != key:
            fk = bd.forward_kinematics(self.translations(), self.rotations(),
                                       self.scales(), body)
            self._cache = {"key": key,
                           "joints": fk.joints.data,
                           "markers": fk.markers().data}
        return self._cache

    def joints(self, body):
        return self._fk(body)["joints"]

    def markers(self, body):
        return self._fk(body)["markers"]


# --- clip container file -------------------------------------------------------
# header lines, then one "frame" line per frame with columns:
#   gamma(3) theta(22*3, joint-major xyz) beta(22) phi(10)
# optional mask block: "mask P T" then P "maskrow" lines of 0/1.


def save_clip(path, clip: MotionClip, mask=None):
    cols = np.concatenate([
        clip.translations(),
        clip.rotations().reshape(clip.T, -1),
        clip.scales(),
        clip.expressions()], axis=1)
    with open(path, "w") as f:
        f.write(f"fps {clip.fps}\n")
        f.write(f"frames {clip.T}\n")
        f.write(f"joints {bd.N_JOINTS}\n")
        f.write(f"markerset {clip.marker_kind}\n")
        for row in cols:
            f.write("frame " + " ".join(repr(float(v)) for v in row) + "\n")
        if mask is not None:
            mask = np.asarray(mask)
            f.write(f"mask {mask.shape[0]} {mask.shape[1]}\n")
            for row in mask:
                f.write("maskrow " + " ".join(
                    str(int(v)) for v in row) + "\n")


def load_clip(path):
    header, rows, mask_rows, mask_shape = {}, [], [], None
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, rest = line.partition(" ")
            if key == "frame":
                rows.append([float(v) for v in rest.split()])
            elif key == "mask":
                mask_shape = tuple(int(v) for v in rest.split())
            elif key == "maskrow":
                mask_rows.append([int(v) for v in rest.split()])
            else:
                header[key] = rest
    t_frames = int(header["frames"])
    if int(header["joints"]) != bd.N_JOINTS:
        raise ValueError("clip was written for a different joint count")
    if len(rows) != t_frames:
        raise ValueError(f"clip header says {t_frames} frames, file has {len(rows)}")
    arr = np.array(rows, dtype=np.float64)
    j3 = bd.N_JOINTS * 3
    expect = 3 + j3 + bd.N_JOINTS + bd.EXPRESSION_DIM
    if arr.shape[1] != expect:
        raise ValueError(f"clip rows have {arr.shape[1]} columns, want {expect}")
    clip = MotionClip.from_arrays(
        arr[:, :3], arr[:, 3:3 + j3].reshape(t_frames, bd.N_JOINTS, 3),
        arr[:, 3 + j3:3 + j3 + bd.N_JOINTS], arr[:, 3 + j3 + bd.N_JOINTS:],
        int(header["fps"]), header["markerset"])
    mask = None
    if mask_shape is not None:
        mask = np.array(mask_rows, dtype=np.float64)
        if mask.shape != mask_shape:
            raise ValueError("mask block does not match its declared extents")
    return clip, mask


# --- canonicalization -------------------------------------------------------------


def transform_clip(clip: MotionClip, yaw=0.0, offset=(0.0, 0.0, 0.0)):
    """Global rigid motion: rotate about world z, then translate."""
    rot = rot_z(yaw)
    offset = np.asarray(offset, dtype=np.float64)
    trans = clip.translations() @ rot.T + offset
    rots = clip.rotations().copy()
    for t in range(clip.T):
        rots[t, 0] = matrix_to_axis_angle(rot @ axis_angle_to_matrix(rots[t, 0]))
    return MotionClip.from_arrays(trans, rots, clip.scales(),
                                  clip.expressions(), clip.fps,
                                  clip.marker_kind)


def root_yaw_series(clip: MotionClip, body):
    """Per-frame heading from the horizontal left->right hip direction."""
    joints = clip.joints(body)
    names = {n: i for i, n in enumerate(bd.JOINT_NAMES)}
    d = joints[:, names["r_hip"]] - joints[:, names["l_hip"]]
    return np.arctan2(d[:, 1], d[:, 0])


def preprocess_clip(raw: MotionClip, body, target_frames=120,
                    fps=DEFAULT_FPS):
    """Resample to 30 fps (nearest frame), trim, and reset the world frame.

    The new origin is the first frame's pelvis projected to the ground;
    the x-axis is the horizontal left-hip to right-hip direction of that
    frame (so y points forward, z stays up).
    """
    if raw.fps < fps:
        raise ValueError(f"raw clip fps {raw.fps} below target {fps}")
    step = raw.fps / fps
    n_out = int(np.floor((raw.T - 1) / step)) + 1
    idx = np.round(np.arange(n_out) * step).astype(int)
    if len(idx) < target_frames:
        raise ValueError(
            f"clip too short: {len(idx)} frames at {fps} fps, "
            f"need {target_frames}")
    idx = idx[:target_frames]
    resampled = MotionClip(fps, [raw.frames[i] for i in idx], raw.marker_kind)
    yaw0 = root_yaw_series(resampled, body)[0]
    pivot = resampled.frames[0].translation * [1.0, 1.0, 0.0]
    return transform_clip(resampled, -yaw0, -rot_z(-yaw0) @ pivot)


# --- network encodings ----------------------------------------------------------


def build_velocity_map(clip: MotionClip, body):
    """Marker differences as an S x (T-1) map, S = 3 * marker count."""
    if clip.T < 2:
        raise ValueError("velocity map needs at least 2 frames")
    markers = clip.markers(body)
    diff = np.diff(markers, axis=0)                  # (T-1, M, 3), m/frame
    return diff.reshape(clip.T - 1, -1).T            # marker-major rows


def contact_labels(clip: MotionClip, body, ground_level=0.0):
    """Binary (T,4) labels for [l_heel, l_toe, r_heel, r_toe].

    A marker is in contact when its speed is below 0.20 m/s and it sits
    within 0.10 m of the ground; the last frame reuses the last
    transition's velocity.
    """
    markers = clip.markers(body)[:, body.markers.heel_toe_indices]
    speed = np.linalg.norm(np.diff(markers, axis=0), axis=2) * clip.fps
    speed = np.concatenate([speed, speed[-1:]], axis=0)
    height = markers[:, :, 2] - ground_level
    return ((speed < CONTACT_SPEED_LIMIT)
            & (height < CONTACT_HEIGHT_LIMIT)).astype(np.int64)


def infill_dims(marker_set):
    """(rows P, body marker count) for the infill tensor layout."""
    nb = len(marker_set.body_indices)
    return 3 * nb + 4, nb


def _foot_row_positions(marker_set):
    """Positions of each foot's heel/toe inside the body-marker ordering."""
    body_idx = marker_set.body_indices
    pos = {int(m): i for i, m in enumerate(body_idx)}
    ht = marker_set.heel_toe
    return {"l": [pos[ht["l_heel"]], pos[ht["l_toe"]]],
            "r": [pos[ht["r_heel"]], pos[ht["r_toe"]]]}


def build_infill_tensor(clip: MotionClip, body, mask):
    """(Y, Y_masked): P x T x 4 tensors; P = 3*body markers + 4 contact rows.

    Channel 0 holds pelvis-local marker coordinates in the per-frame
    root-yaw frame plus the 4 contact rows; channels 1-3 repeat the root
    in-plane velocity (t1, t2) and yaw rate, meters/frame and rad/frame.
    Only channel 0 is masked.
    """
    ms = body.markers
    p_rows, nb = infill_dims(ms)
    t_frames = clip.T
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (p_rows, t_frames):
        raise ValueError(f"mask wants {(p_rows, t_frames)}, got {mask.shape}")
    markers = clip.markers(body)[:, ms.body_indices]       # (T, nb, 3)
    yaw = root_yaw_series(clip, body)
    gamma = clip.translations()
    pivot = gamma * [1.0, 1.0, 0.0]
    local = np.empty((t_frames, nb, 3))
    for t in range(t_frames):
        # row vectors: p @ R(yaw) == R(-yaw) p, the world-to-local rotation
        local[t] = (markers[t] - pivot[t]) @ rot_z(yaw[t])
    labels = contact_labels(clip, body).astype(np.float64)  # (T,4)

    yten = np.zeros((p_rows, t_frames, 4))
    yten[:3 * nb, :, 0] = local.reshape(t_frames, -1).T
    yten[3 * nb:, :, 0] = labels.T

    dxy = np.diff(pivot[:, :2], axis=0)
    vloc = np.empty((t_frames - 1, 2))
    for t in range(t_frames - 1):
        c, s = np.cos(-yaw[t]), np.sin(-yaw[t])
        vloc[t] = [c * dxy[t, 0] - s * dxy[t, 1],
                   s * dxy[t, 0] + c * dxy[t, 1]]
    vloc = np.concatenate([vloc, vloc[-1:]], axis=0)
    yaw_rate = wrap_angle(np.diff(yaw))
    yaw_rate = np.concatenate([yaw_rate, yaw_rate[-1:]])
    yten[:, :, 1] = vloc[:, 0]
    yten[:, :, 2] = vloc[:, 1]
    yten[:, :, 3] = yaw_rate

    masked = yten.copy()
    masked[:, :, 0] *= mask
    return yten, masked


def sample_occlusion_mask(kind, seed, marker_set, t_frames):
    """Row mask M (P x T) and per-marker body mask M_b (body markers x T).

    lower-body hides every lower-body marker for the whole clip;
    random-window hides a contiguous marker span over a contiguous frame
    window.  Contact rows are masked whenever their foot's heel or toe
    marker is hidden.
    """
    p_rows, nb = infill_dims(marker_set)
    mask = np.ones((p_rows, t_frames))
    mb = np.ones((nb, t_frames))
    body_idx = marker_set.body_indices
    pos = {int(m): i for i, m in enumerate(body_idx)}
    if kind == "lower-body":
        hidden = [pos[int(m)] for m in marker_set.lower_body_indices]
        cols = slice(0, t_frames)
    elif kind == "random-window":
        rng = np.random.default_rng(seed)
        span = int(rng.integers(max(1, nb // 5), nb // 2 + 1))
        start = int(rng.integers(0, nb - span + 1))
        hidden = list(range(start, start + span))
        win = int(rng.integers(max(2, t_frames // 4), t_frames // 2 + 1))
        t0 = int(rng.integers(0, t_frames - win + 1))
        cols = slice(t0, t0 + win)
    else:
        raise ValueError(f"unknown mask kind {kind!r}")
    for m in hidden:
        mask[3 * m:3 * m + 3, cols] = 0.0
        mb[m, cols] = 0.0
    feet = _foot_row_positions(marker_set)
    for side, rows in feet.items():
        foot_hidden = (mb[rows[0]] == 0) | (mb[rows[1]] == 0)
        base = 3 * nb + (0 if side == "l" else 2)
        mask[base:base + 2, foot_hidden] = 0.0
    return mask, mb
