"""Simplified articulated capsule body.

22-joint kinematic tree with axis-angle joint rotations, a per-bone length
scale vector standing in for body shape, surface markers attached to joint
frames, and capsule-sampled surface vertices (with dedicated foot / gluteus
contact subsets).  World frame: x left-to-right hip, y forward, z up.

Forward kinematics runs on autodiff Tensors batched over the frame axis, so
energies differentiate through it w.r.t. translation, pose, and bone scales.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# --- kinematic tree -----------------------------------------------------------

JOINT_NAMES = [
    "pelvis", "spine1", "spine2", "spine3", "neck", "head",
    "l_hip", "l_knee", "l_ankle", "l_toe",
    "r_hip", "r_knee", "r_ankle", "r_toe",
    "l_collar", "l_shoulder", "l_elbow", "l_wrist",
    "r_collar", "r_shoulder", "r_elbow", "r_wrist",
]
PARENTS = [-1, 0, 1, 2, 3, 4,
           0, 6, 7, 8,
           0, 10, 11, 12,
           3, 14, 15, 16,
           3, 18, 19, 20]
N_JOINTS = 22

# rest offsets, meters, parent frame; standing height ~1.65 m
_OFFSETS = [
    (0.0, 0.0, 0.0),        # pelvis (root)
    (0.0, 0.0, 0.10),       # spine1
    (0.0, 0.0, 0.12),       # spine2
    (0.0, 0.0, 0.13),       # spine3
    (0.0, 0.0, 0.12),       # neck
    (0.0, 0.0, 0.10),       # head
    (-0.09, 0.0, -0.06),    # l_hip
    (0.0, 0.0, -0.40),      # l_knee
    (0.0, 0.0, -0.43),      # l_ankle
    (0.0, 0.14, -0.025),    # l_toe (toe-cap bottom grazes ground when standing)
    (0.09, 0.0, -0.06),     # r_hip
    (0.0, 0.0, -0.40),      # r_knee
    (0.0, 0.0, -0.43),      # r_ankle
    (0.0, 0.14, -0.025),    # r_toe
    (-0.04, 0.0, 0.06),     # l_collar
    (-0.12, 0.0, 0.02),     # l_shoulder
    (0.0, 0.0, -0.26),      # l_elbow (arms hang down at rest)
    (0.0, 0.0, -0.25),      # l_wrist
    (0.04, 0.0, 0.06),      # r_collar
    (0.12, 0.0, 0.02),      # r_shoulder
    (0.0, 0.0, -0.26),      # r_elbow
    (0.0, 0.0, -0.25),      # r_wrist
]

# capsule radius per bone (bone j = segment parent(j) -> j; pelvis = sphere)
_RADII = [0.14, 0.11, 0.11, 0.11, 0.05, 0.09,
          0.08, 0.06, 0.05, 0.035,
          0.08, 0.06, 0.05, 0.035,
          0.04, 0.05, 0.045, 0.035,
          0.04, 0.05, 0.045, 0.035]

# per-joint axis-angle limit boxes (lo, hi) per axis
_WIDE = (-3.1, 3.1)
_LIMITS = {
    "pelvis": [_WIDE] * 3,
    "spine": [(-0.6, 0.6)] * 3,
    "neck": [(-0.7, 0.7)] * 3,
    "head": [(-0.7, 0.7)] * 3,
    "hip": [(-0.6, 2.0), (-0.8, 0.8), (-0.8, 0.8)],
    "knee": [(-2.6, 0.05), (-0.05, 0.05), (-0.05, 0.05)],
    "ankle": [(-0.8, 0.8), (-0.4, 0.4), (-0.4, 0.4)],
    "toe": [(-0.6, 0.6), (-0.1, 0.1), (-0.1, 0.1)],
    "collar": [(-0.3, 0.3)] * 3,
    "shoulder": [(-2.0, 2.0), (-1.5, 1.5), (-1.5, 1.5)],
    "elbow": [(-0.05, 2.6), (-0.3, 0.3), (-0.9, 0.9)],
    "wrist": [(-0.6, 0.6)] * 3,
}


def _limit_key(name):
    if name.startswith(("l_", "r_")):
        name = name[2:]
    return "spine" if name.startswith("spine") else name


LOWER_BODY_JOINTS = [6, 7, 8, 9, 10, 11, 12, 13]

# pelvis height with feet flat on the ground at zero pose, unit scales
STANDING_PELVIS_Z = 0.95

EXPRESSION_DIM = 10


@dataclass
class BodyShape:
    """Per-bone length multipliers; unit vector = the reference body."""
    scales: np.ndarray

    def __post_init__(self):
        self.scales = np.asarray(self.scales, dtype=np.float64)
        if self.scales.shape != (N_JOINTS,):
            raise ValueError(f"shape wants ({N_JOINTS},), got {self.scales.shape}")
        if np.any(self.scales <= 0):
            raise ValueError("bone scales must be positive")


@dataclass
class BodyPose:
    """Axis-angle per joint plus a kinematically inert expression vector."""
    rotations: np.ndarray
    expression: np.ndarray = None

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        if self.rotations.shape != (N_JOINTS, 3):
            raise ValueError(
                f"pose wants ({N_JOINTS},3), got {self.rotations.shape}")
        if self.expression is None:
            self.expression = np.zeros(EXPRESSION_DIM)
        self.expression = np.asarray(self.expression, dtype=np.float64)


@dataclass
class BodyParams:
    """One frame of body state: translation, shape, pose."""
    translation: np.ndarray
    shape: BodyShape
    pose: BodyPose

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.translation.shape != (3,):
            raise ValueError("translation wants (3,)")

    @classmethod
    def rest(cls, translation=(0.0, 0.0, STANDING_PELVIS_Z)):
        return cls(np.asarray(translation, dtype=np.float64),
                   BodyShape(np.ones(N_JOINTS)),
                   BodyPose(np.zeros((N_JOINTS, 3))))


@dataclass
class Camera:
    focal: float
    cx: float
    cy: float
    rot: np.ndarray    # world -> camera
    trans: np.ndarray

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError("camera focal length must be positive")
        self.rot = np.asarray(self.rot, dtype=np.float64)
        self.trans = np.asarray(self.trans, dtype=np.float64)


def camera_lookat(eye, target, focal=500.0, cx=320.0, cy=240.0):
    """Pinhole camera at eye facing target; +z forward, +y down in camera."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return Camera(focal, cx, cy, rot, -rot @ eye)


# --- marker and vertex tables ---------------------------------------------------


@dataclass
class MarkerSet:
    names: list
    joints: np.ndarray        # (M,) joint index carrying each marker
    offsets: np.ndarray       # (M,3) local offset in the joint frame
    face_indices: np.ndarray  # the face/finger markers (excluded for infilling)
    heel_toe: dict            # name -> marker index, 4 entries

    @property
    def count(self):
        return len(self.names)

    @property
    def body_indices(self):
        mask = np.ones(self.count, dtype=bool)
        mask[self.face_indices] = False
        return np.where(mask)[0]

    @property
    def heel_toe_indices(self):
        return np.array([self.heel_toe[k] for k in
                         ("l_heel", "l_toe", "r_heel", "r_toe")])

    @property
    def lower_body_indices(self):
        lower = set(LOWER_BODY_JOINTS)
        return np.array([i for i, j in enumerate(self.joints) if j in lower])


def _side_markers(side, sign):
    """Per-side marker entries (name, joint name, offset)."""
    s = side + "_"
    return [
        (s + "heel", s + "ankle", (-0.01 * sign, -0.05, -0.04)),
        (s + "toe", s + "toe", (0.0, 0.02, 0.015)),
        (s + "ankle_out", s + "ankle", (0.05 * sign, 0.0, 0.0)),
        (s + "foot_top", s + "ankle", (0.0, 0.06, 0.0)),
        (s + "shin_front", s + "knee", (0.0, 0.05, -0.22)),
        (s + "shin_out", s + "knee", (0.05 * sign, 0.0, -0.20)),
        (s + "knee", s + "knee", (0.0, 0.06, -0.02)),
        (s + "thigh_front", s + "hip", (0.0, 0.07, -0.20)),
        (s + "thigh_out", s + "hip", (0.07 * sign, 0.0, -0.22)),
        (s + "hip", s + "hip", (0.07 * sign, 0.0, 0.0)),
        (s + "shoulder", s + "shoulder", (0.0, 0.0, 0.05)),
        (s + "uparm_out", s + "elbow", (0.045 * sign, 0.0, -0.10)),
        (s + "uparm_front", s + "elbow", (0.0, 0.045, -0.16)),
        (s + "elbow", s + "elbow", (0.0, -0.045, 0.0)),
        (s + "forearm_out", s + "wrist", (0.035 * sign, 0.0, -0.10)),
        (s + "forearm_in", s + "wrist", (-0.035 * sign, 0.0, -0.16)),
        (s + "wrist_out", s + "wrist", (0.035 * sign, 0.0, 0.0)),
        (s + "wrist_in", s + "wrist", (-0.035 * sign, 0.0, 0.0)),
    ]


def _central_markers():
    return [
        ("pelvis_front", "pelvis", (0.0, 0.12, -0.02)),
        ("pelvis_back", "pelvis", (0.0, -0.12, -0.02)),
        ("pelvis_l", "pelvis", (-0.12, 0.0, 0.0)),
        ("pelvis_r", "pelvis", (0.12, 0.0, 0.0)),
        ("pelvis_top", "pelvis", (0.0, 0.0, 0.08)),
        ("belly_front", "spine1", (0.0, 0.11, 0.02)),
        ("belly_back", "spine1", (0.0, -0.11, 0.02)),
        ("belly_l", "spine1", (-0.11, 0.0, 0.04)),
        ("belly_r", "spine1", (0.11, 0.0, 0.04)),
        ("waist_front", "spine1", (0.0, 0.11, 0.08)),
        ("waist_back", "spine1", (0.0, -0.11, 0.08)),
        ("chest_front", "spine2", (0.0, 0.11, 0.04)),
        ("chest_back", "spine2", (0.0, -0.11, 0.04)),
        ("chest_l", "spine2", (-0.11, 0.0, 0.06)),
        ("chest_r", "spine2", (0.11, 0.0, 0.06)),
        ("sternum", "spine3", (0.0, 0.11, 0.04)),
        ("upperback", "spine3", (0.0, -0.11, 0.04)),
        ("rib_l", "spine3", (-0.11, 0.0, 0.02)),
        ("rib_r", "spine3", (0.11, 0.0, 0.02)),
        ("throat", "neck", (0.0, 0.05, 0.04)),
        ("nape", "neck", (0.0, -0.05, 0.04)),
        ("neck_top", "neck", (0.0, 0.0, 0.10)),
        ("head_front", "head", (0.0, 0.09, 0.02)),
        ("head_back", "head", (0.0, -0.09, 0.02)),
        ("head_l", "head", (-0.09, 0.0, 0.02)),
        ("head_r", "head", (0.09, 0.0, 0.02)),
        ("head_top", "head", (0.0, 0.0, 0.11)),
        ("crown_front", "head", (0.0, 0.06, 0.09)),
        ("crown_back", "head", (0.0, -0.06, 0.09)),
        ("clavicle_l", "l_collar", (-0.06, 0.04, 0.0)),
        ("clavicle_r", "r_collar", (0.06, 0.04, 0.0)),
    ]


def _face_finger_markers():
    out = [("face_%d" % i, "head",
            (0.07 * np.sin(a), 0.085, 0.02 + 0.05 * np.cos(a)))
           for i, a in enumerate(np.linspace(-1.2, 1.2, 10))]
    out += [("l_finger1", "l_wrist", (-0.02, 0.02, -0.30)),
            ("l_finger2", "l_wrist", (0.02, 0.02, -0.30)),
            ("r_finger1", "r_wrist", (0.02, 0.02, -0.30)),
            ("r_finger2", "r_wrist", (-0.02, 0.02, -0.30))]
    return out


def _desk_markers():
    """Reduced marker table for fast direction-preserving experiments."""
    body = [
        ("pelvis_front", "pelvis", (0.0, 0.12, -0.02)),
        ("pelvis_back", "pelvis", (0.0, -0.12, -0.02)),
        ("chest_front", "spine2", (0.0, 0.11, 0.04)),
        ("head_front", "head", (0.0, 0.09, 0.02)),
        ("head_back", "head", (0.0, -0.09, 0.02)),
    ]
    for side, sign in (("l", -1.0), ("r", 1.0)):
        s = side + "_"
        body += [
            (s + "hip", s + "hip", (0.07 * sign, 0.0, 0.0)),
            (s + "knee", s + "knee", (0.0, 0.06, -0.02)),
            (s + "heel", s + "ankle", (-0.01 * sign, -0.05, -0.04)),
            (s + "toe", s + "toe", (0.0, 0.02, 0.015)),
            (s + "shoulder", s + "shoulder", (0.0, 0.0, 0.05)),
            (s + "elbow", s + "elbow", (0.0, -0.045, 0.0)),
            (s + "wrist_out", s + "wrist", (0.035 * sign, 0.0, 0.0)),
        ]
    face = [("face_l", "head", (-0.06, 0.085, 0.04)),
            ("face_r", "head", (0.06, 0.085, 0.04)),
            ("l_finger1", "l_wrist", (-0.02, 0.02, -0.30)),
            ("r_finger1", "r_wrist", (0.02, 0.02, -0.30))]
    return body, face


def build_marker_set(kind="full"):
    if kind == "full":
        body = []
        for side, sign in (("l", -1.0), ("r", 1.0)):
            body += _side_markers(side, sign)
        body += _central_markers()
        face = _face_finger_markers()
    elif kind == "desk":
        body, face = _desk_markers()
    else:
        raise ValueError(f"unknown marker set kind {kind!r}")
    entries = body + face
    jidx = {n: i for i, n in enumerate(JOINT_NAMES)}
    names = [e[0] for e in entries]
    joints = np.array([jidx[e[1]] for e in entries])
    offsets = np.array([e[2] for e in entries], dtype=np.float64)
    face_idx = np.arange(len(body), len(entries))
    heel_toe = {k: names.index(k) for k in ("l_heel", "l_toe", "r_heel", "r_toe")}
    return MarkerSet(names, joints, offsets, face_idx, heel_toe)


# --- capsule surface vertices ------------------------------------------------------

_GOLDEN = np.pi * (3.0 - np.sqrt(5.0))


def _orthobasis(axis):
    a = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(a, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(a, e1)
    return e1, e2, a


def _sample_sphere(n, radius):
    i = np.arange(n)
    z = radius * (1.0 - (2.0 * i + 1.0) / n)
    rho = np.sqrt(np.maximum(radius * radius - z * z, 0.0))
    phi = i * _GOLDEN
    pts = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    return pts


def _sample_capsule(n, offset, radius):
    """Area-uniform deterministic spiral over a capsule around the bone axis.

    Returns (frac, u, normal): local point = frac*offset + u, frac in [0,1].
    """
    L = np.linalg.norm(offset)
    if L < 1e-9:
        pts = _sample_sphere(n, radius)
        return np.zeros(n), pts, pts / radius
    e1, e2, axis = _orthobasis(np.asarray(offset, dtype=np.float64))
    a_cap = 2.0 * np.pi * radius * radius
    a_cyl = 2.0 * np.pi * radius * L
    total = 2.0 * a_cap + a_cyl
    frac = np.zeros(n)
    u = np.zeros((n, 3))
    nrm = np.zeros((n, 3))
    for i in range(n):
        a = (i + 0.5) / n * total
        phi = i * _GOLDEN
        cphi, sphi = np.cos(phi), np.sin(phi)
        if a < a_cap:  # start cap
            z = -radius + radius * (a / a_cap)
            rho = np.sqrt(max(radius * radius - z * z, 0.0))
            vec = rho * cphi * e1 + rho * sphi * e2 + z * axis
            frac[i], u[i], nrm[i] = 0.0, vec, vec / radius
        elif a < a_cap + a_cyl:  # cylinder wall
            along = (a - a_cap) / a_cyl
            vec = radius * (cphi * e1 + sphi * e2)
            frac[i], u[i], nrm[i] = along, vec, vec / radius
        else:  # end cap
            z = radius * ((a - a_cap - a_cyl) / a_cap)
            rho = np.sqrt(max(radius * radius - z * z, 0.0))
            vec = rho * cphi * e1 + rho * sphi * e2 + z * axis
            frac[i], u[i], nrm[i] = 1.0, vec, vec / radius
    return frac, u, nrm


@dataclass
class VertexSet:
    joints: np.ndarray    # (V,) owning joint (bone child); world frame of its parent
    fracs: np.ndarray     # (V,) position along the bone axis
    radials: np.ndarray   # (V,3) offset from the axis point
    normals: np.ndarray   # (V,3) outward unit normal in the bone frame
    foot_indices: np.ndarray
    gluteus_indices: np.ndarray

    @property
    def count(self):
        return len(self.joints)

    @property
    def contact_indices(self):
        return np.concatenate([self.foot_indices, self.gluteus_indices])

    @property
    def frame_joints(self):
        """Joint whose world frame carries each vertex."""
        return np.array([PARENTS[j] if PARENTS[j] >= 0 else 0
                         for j in self.joints])


_BONE_VERTEX_COUNTS = {
    "spine1": 16, "spine2": 16, "spine3": 16, "neck": 8, "head": 24,
    "l_knee": 16, "l_ankle": 16, "r_knee": 16, "r_ankle": 16,
    "l_elbow": 12, "l_wrist": 12, "r_elbow": 12, "r_wrist": 12,
}


def build_vertex_set(foot_count=194, gluteus_count=113,
                     offsets=None, radii=None):
    """Deterministic capsule sampling; foot and gluteus subsets flagged."""
    offsets = np.array(_OFFSETS) if offsets is None else np.asarray(offsets)
    radii = np.array(_RADII) if radii is None else np.asarray(radii)
    jidx = {n: i for i, n in enumerate(JOINT_NAMES)}
    joints, fracs, radials, normals = [], [], [], []
    foot_idx, glut_idx = [], []

    def add(joint, frac, u, nrm):
        start = len(joints)
        joints.extend([joint] * len(frac))
        fracs.extend(frac)
        radials.extend(u)
        normals.extend(nrm)
        return np.arange(start, len(joints))

    # pelvis sphere: gluteus = lower-back region, plus an upper band
    pel_r = radii[0]
    sphere = _sample_sphere(6 * gluteus_count + 120, pel_r)
    dirs = sphere / pel_r
    glut_sel = np.where((dirs[:, 2] < -0.35) & (dirs[:, 1] < 0.25))[0]
    if len(glut_sel) < gluteus_count:
        raise ValueError("pelvis sampling too sparse for gluteus set")
    glut_sel = glut_sel[-gluteus_count:]  # spiral descends: keep the deepest points
    idx = add(0, np.zeros(len(glut_sel)), sphere[glut_sel], dirs[glut_sel])
    glut_idx.extend(idx)
    upper_sel = np.where(dirs[:, 2] >= 0.1)[0][:30]
    add(0, np.zeros(len(upper_sel)), sphere[upper_sel], dirs[upper_sel])

    per_foot = foot_count // 2
    for name, count in _BONE_VERTEX_COUNTS.items():
        j = jidx[name]
        f, u, nr = _sample_capsule(count, offsets[j], radii[j])
        add(j, f, u, nr)
    for name in ("l_toe", "r_toe"):
        j = jidx[name]
        f, u, nr = _sample_capsule(per_foot, offsets[j], radii[j])
        foot_idx.extend(add(j, f, u, nr))

    return VertexSet(np.array(joints), np.array(fracs),
                     np.array(radials, dtype=np.float64),
                     np.array(normals, dtype=np.float64),
                     np.array(foot_idx), np.array(glut_idx))


# --- body config --------------------------------------------------------------------


@dataclass
class BodyConfig:
    offsets: np.ndarray          # (22,3) rest bone offsets
    radii: np.ndarray            # (22,) capsule radii
    limits_lo: np.ndarray        # (22,3)
    limits_hi: np.ndarray        # (22,3)
    markers: MarkerSet = None
    vertices: VertexSet = None
    marker_kind: str = "full"

    @property
    def n_joints(self):
        return N_JOINTS


def build_body(marker_kind="full", foot_count=194, gluteus_count=113,
               offsets=None, radii=None):
    offsets = np.array(_OFFSETS, dtype=np.float64) if offsets is None \
        else np.asarray(offsets, dtype=np.float64)
    radii = np.array(_RADII, dtype=np.float64) if radii is None \
        else np.asarray(radii, dtype=np.float64)
    lo = np.zeros((N_JOINTS, 3))
    hi = np.zeros((N_JOINTS, 3))
    for j, name in enumerate(JOINT_NAMES):
        for ax, (a, b) in enumerate(_LIMITS[_limit_key(name)]):
            lo[j, ax], hi[j, ax] = a, b
    return BodyConfig(offsets, radii, lo, hi,
                      build_marker_set(marker_kind),
                      build_vertex_set(foot_count, gluteus_count,
                                       offsets, radii),
                      marker_kind)


def save_body_config(path, body: BodyConfig):
    """Text key-value dump; arrays as JSON so floats round-trip exactly."""
    ms, vs = body.markers, body.vertices
    rows = {
        "joint_names": JOINT_NAMES,
        "parents": PARENTS,
        "offsets": body.offsets.tolist(),
        "radii": body.radii.tolist(),
        "limits_lo": body.limits_lo.tolist(),
        "limits_hi": body.limits_hi.tolist(),
        "marker_kind": body.marker_kind,
        "marker_names": ms.names,
        "marker_joints": ms.joints.tolist(),
        "marker_offsets": ms.offsets.tolist(),
        "marker_face_indices": ms.face_indices.tolist(),
        "marker_heel_toe": ms.heel_toe,
        "vertex_counts": {"total": int(vs.count),
                          "foot": int(len(vs.foot_indices)),
                          "gluteus": int(len(vs.gluteus_indices))},
    }
    with open(path, "w") as f:
        for k, v in rows.items():
            f.write(f"{k} = {json.dumps(v)}\n")


def load_body_config(path):
    rows = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition(" = ")
            rows[k] = json.loads(v)
    if rows["joint_names"] != JOINT_NAMES or rows["parents"] != PARENTS:
        raise ValueError("body config tree does not match this build")
    body = build_body(rows.get("marker_kind", "full"),
                      foot_count=rows["vertex_counts"]["foot"],
                      gluteus_count=rows["vertex_counts"]["gluteus"],
                      offsets=np.array(rows["offsets"]),
                      radii=np.array(rows["radii"]))
    body.limits_lo = np.array(rows["limits_lo"])
    body.limits_hi = np.array(rows["limits_hi"])
    ms = body.markers
    ms.names = rows["marker_names"]
    ms.joints = np.array(rows["marker_joints"])
    ms.offsets = np.array(rows["marker_offsets"])
    ms.face_indices = np.array(rows["marker_face_indices"])
    ms.heel_toe = {k: int(v) for k, v in rows["marker_heel_toe"].items()}
    return body


# --- forward kinematics ----------------------------------------------------------


def rodrigues(aa):
    """Axis-angle (N,3) -> rotation matrices (N,3,3), stable at zero angle."""
    aa = ad.as_tensor(aa)
    t2 = (aa * aa).sum(axis=1)                       # squared angle
    # Taylor branch below theta ~ 1e-4 dodges both sqrt(0) and the
    # catastrophic cancellation in (1 - cos) / theta^2
    small = t2.data < 1e-8
    t2_safe = ad.where(small, ad.as_tensor(np.ones_like(t2.data)), t2)
    ang = t2_safe.sqrt()
    s1 = ad.where(small, 1.0 - t2 / 6.0, ang.sin() / ang)
    s2 = ad.where(small, 0.5 - t2 / 24.0, (1.0 - ang.cos()) / t2_safe)
    x, y, z = aa[:, 0], aa[:, 1], aa[:, 2]
    zero = x * 0.0
    k = ad.stack([ad.stack([zero, -z, y], axis=1),
                  ad.stack([z, zero, -x], axis=1),
                  ad.stack([-y, x, zero], axis=1)], axis=1)  # (N,3,3)
    kk = k @ k
    eye = np.broadcast_to(np.eye(3), k.data.shape)
    n = aa.data.shape[0]
    return eye + k * s1.reshape(n, 1, 1) + kk * s2.reshape(n, 1, 1)


class FKResult:
    """World-frame rotations/positions per joint plus derived point sets."""

    def __init__(self, rot_world, pos_world, body):
        self.rot_world = rot_world  # Tensor (T, J, 3, 3)
        self.pos_world = pos_world  # Tensor (T, J, 3) == joints
        self.body = body

    @property
    def joints(self):
        return self.pos_world

    def markers(self):
        ms = self.body.markers
        rm = self.rot_world[:, ms.joints]          # (T,M,3,3)
        pm = self.pos_world[:, ms.joints]          # (T,M,3)
        off = ms.offsets[:, :, None]               # (M,3,1)
        return pm + (rm @ off)[:, :, :, 0]

    def surface_vertices(self, beta):
        """Vertex positions and outward world normals, (T,V,3) each."""
        vs = self.body.vertices
        frames = vs.frame_joints
        rw = self.rot_world[:, frames]
        pw = self.pos_world[:, frames]
        scale = _beta_per_joint(beta, vs.joints)   # (V,) or (T,V)
        axis = self.body.offsets[vs.joints]        # (V,3)
        local = axis * vs.fracs[:, None]           # bone-axis point, unscaled
        pts = pw + (rw @ local[:, :, None])[:, :, :, 0] * _expand(scale) \
            + (rw @ vs.radials[:, :, None])[:, :, :, 0]
        nrm = (rw @ vs.normals[:, :, None])[:, :, :, 0]
        return pts, nrm


def _beta_per_joint(beta, jsel):
    if isinstance(beta, Tensor):
        return beta[..., jsel]
    return np.asarray(beta)[..., jsel]


def _expand(scale):
    if isinstance(scale, Tensor):
        return scale.reshape(scale.shape + (1,)) if scale.ndim == 2 \
            else scale.reshape(1, -1, 1)
    scale = np.asarray(scale)
    return scale[..., None] if scale.ndim == 2 else scale[None, :, None]


def forward_kinematics(gamma, theta, beta, body: BodyConfig):
    """Pose the tree for all frames at once.

    gamma (T,3) world pelvis translation, theta (T,22,3) axis-angle
    rotations, beta (22,) or (T,22) per-bone length scales.  Single-frame
    inputs (3,) / (22,3) are promoted to a length-1 batch.
    """
    gamma = ad.as_tensor(gamma)
    theta = ad.as_tensor(theta)
    beta = ad.as_tensor(beta)
    if theta.ndim == 2:
        theta = theta.reshape((1,) + theta.shape)
    if gamma.ndim == 1:
        gamma = gamma.reshape(1, 3)
    if theta.shape[1:] != (N_JOINTS, 3) or gamma.shape != (theta.shape[0], 3):
        raise ValueError(
            f"forward_kinematics: bad shapes gamma {gamma.shape} "
            f"theta {theta.shape}")
    t_frames = theta.shape[0]
    rots = rodrigues(theta.reshape(t_frames * N_JOINTS, 3)) \
        .reshape(t_frames, N_JOINTS, 3, 3)
    rw = [rots[:, 0]]
    pw = [gamma]
    for j in range(1, N_JOINTS):
        par = PARENTS[j]
        scale = beta[..., j]  # scalar per frame or global
        off = ad.as_tensor(body.offsets[j]).reshape(1, 3, 1)
        step = (rw[par] @ off)[:, :, 0]
        if scale.ndim == 0:
            step = step * scale
        else:
            step = step * scale.reshape(t_frames, 1)
        pw.append(pw[par] + step)
        rw.append(rw[par] @ rots[:, j])
    rot_world = ad.stack(rw, axis=1)
    pos_world = ad.stack(pw, axis=1)
    return FKResult(rot_world, pos_world, body)


def rest_joints(body: BodyConfig):
    """Joint table at zero pose/translation, unit scales (plain numpy)."""
    pts = np.zeros((N_JOINTS, 3))
    for j in range(1, N_JOINTS):
        pts[j] = pts[PARENTS[j]] + body.offsets[j]
    return pts


# --- projection ------------------------------------------------------------------


def project_2d(points, camera: Camera, min_depth=1e-6):
    """Perspective projection of (...,3) points; returns (pixels, valid).

    Points at or behind the camera plane get valid=False and are projected
    with a clamped depth so downstream math stays finite.
    """
    pts = ad.as_tensor(points)
    rot = ad.as_tensor(camera.rot.T)
    cam = pts @ rot + camera.trans
    z = cam[..., 2:3]
    valid = z.data[..., 0] > min_depth
    z_safe = ad.where(z.data > min_depth, z,
                      ad.as_tensor(np.ones_like(z.data)))
    xy = cam[..., 0:2] / z_safe
    pix = xy * camera.focal + np.array([camera.cx, camera.cy])
    return pix, valid


# --- pose prior --------------------------------------------------------------------


def e_prior(theta, beta, body: BodyConfig,
            pose_weight=0.1, limit_weight=100.0, shape_weight=10.0,
            per_frame=False):
    """Quadratic pull to rest pose + squared hinge outside joint-limit boxes
    + quadratic shape deviation from unit scales.  Root orientation is the
    global heading, so the quadratic pose term skips joint 0.

    per_frame=True returns the (T,) decomposition; it requires per-frame
    shape parameters so the pieces still sum to the scalar form.
    """
    theta = ad.as_tensor(theta)
    beta = ad.as_tensor(beta)
    if theta.ndim == 2:
        theta = theta.reshape((1,) + theta.shape)
    lo = body.limits_lo[None]
    hi = body.limits_hi[None]
    over = ad.relu(theta - hi) + ad.relu(lo - theta)
    over2 = over * over
    nonroot = theta[:, 1:, :]
    pose2 = nonroot * nonroot
    dbeta = beta - 1.0
    shape2 = dbeta * dbeta
    if per_frame:
        t_frames = theta.shape[0]
        if shape2.ndim != 2 or shape2.shape[0] != t_frames:
            raise ValueError("per-frame prior needs per-frame shapes")
        return pose2.reshape(t_frames, -1).sum(axis=1) * pose_weight \
            + over2.reshape(t_frames, -1).sum(axis=1) * limit_weight \
            + shape2.sum(axis=1) * shape_weight
    return pose2.sum() * pose_weight + over2.sum() * limit_weight \
        + shape2.sum() * shape_weight
