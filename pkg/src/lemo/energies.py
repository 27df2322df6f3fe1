"""Fitting energy terms: observation fits, scene contact and collision,
friction, infill consistency, and the baseline trajectory smoothers.

All terms consume autodiff tensors produced by forward kinematics and
return non-negative scalars; gating decisions (contact flags, visibility,
nearest neighbours, hinge regions) are made on detached values so the
gradients stay piecewise smooth.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import body as bd
from . import motion as mo
from . import scene as sc

GM_SCALE = 50.0            # px, Geman-McClure width for the 2D joint term
CONTACT_CLAMP = 0.5        # m, |sdf| saturation in the contact pull
FRICTION_SIGMA = 0.03      # m/s, tangential slip tolerance
FOOT_SPEED_LIMIT = 0.10    # m/s, hinge threshold for foot terms
FOOT_HEIGHT_LIMIT = 0.10   # m, height gate of the heuristic foot term
_SPEED_EPS = 1e-16         # keeps sqrt backward finite at zero velocity


@dataclass
class EnergyWeights:
    """Multipliers for the weighted terms; the 2D joint and pose prior
    terms enter with weight 1."""
    depth: float = 10.0
    contact: float = 0.5
    coll: float = 100.0
    smooth: float = 1000.0
    fric: float = 10.0
    infill: float = 1.0

    def __post_init__(self):
        for name, val in vars(self).items():
            if val < 0:
                raise ValueError(f"energy weight {name} must be >= 0, "
                                 f"got {val}")


def _robust_sq(sq, scale):
    # Geman-McClure on a squared residual: scale^2 * r^2 / (scale^2 + r^2)
    return (scale * scale) * sq / (sq + scale * scale)


def _reduce(elem, per_frame):
    if per_frame:
        return elem.reshape(elem.shape[0], -1).sum(axis=1)
    return elem.sum()


def e_joint2d(joints3d, obs2d, conf, camera, scale=GM_SCALE,
              per_frame=False):
    """Confidence-weighted robust squared pixel error of projected joints.

    joints3d: (..., J, 3) tensor; obs2d: (..., J, 2); conf: (..., J) in
    [0, 1].  Joints behind the camera drop out via the projection's
    validity flags.  per_frame=True returns a (T,) tensor instead of the
    scalar sum (same applies to the other per-frame-separable terms).
    """
    conf = np.asarray(conf, dtype=np.float64)
    if np.any((conf < 0) | (conf > 1)):
        raise ValueError("joint confidences must lie in [0, 1]")
    pix, valid = bd.project_2d(joints3d, camera)
    d = pix - np.asarray(obs2d, dtype=np.float64)
    sq = (d * d).sum(axis=-1)
    return _reduce(_robust_sq(sq, scale) * (conf * valid), per_frame)


def _nearest_visible(vertex_data, normal_data, cloud, eye):
    """Index of the closest camera-facing vertex for each cloud point."""
    facing = np.einsum("vk,vk->v", normal_data, eye - vertex_data) > 0
    pool = np.where(facing)[0]
    if len(pool) == 0:
        pool = np.arange(len(vertex_data))
    d2 = ((cloud[:, None] - vertex_data[pool][None]) ** 2).sum(axis=2)
    return pool[d2.argmin(axis=1)]


def e_depth(vertices, normals, cloud, camera):
    """Squared distance from each cloud point to the nearest body vertex
    visible from the camera.

    vertices: (V, 3) tensor for one frame; normals: (V, 3) outward world
    normals (values only); cloud: (N, 3) observed points.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.size == 0:
        raise ValueError("depth energy needs a nonempty point cloud")
    vertices = ad.as_tensor(vertices)
    eye = -camera.rot.T @ camera.trans
    # nearest-neighbour choice is detached; distances stay differentiable
    sel = _nearest_visible(vertices.data,
                           np.asarray(normals, dtype=np.float64), cloud, eye)
    diff = vertices[sel] - cloud
    return (diff * diff).sum()


def e_contact(contact_vertices, scene, clamp=CONTACT_CLAMP,
              per_frame=False):
    """Pull the body contact set onto the scene: sum of |sdf|, saturated."""
    sdf = sc.sdf_tensor(contact_vertices, scene)
    return _reduce(ad.minimum(sdf.abs(), clamp), per_frame)


def e_coll(vertices, scene, per_frame=False):
    """Squared penetration depth summed over body vertices."""
    inside = ad.relu(-sc.sdf_tensor(vertices, scene))
    return _reduce(inside * inside, per_frame)


def _speed(vec):
    sq = (vec * vec).sum(axis=-1)
    return (sq + _SPEED_EPS).sqrt()


def e_fric(contact_vertices, scene, fps, sigma=FRICTION_SIGMA):
    """Friction-cone penalty over frames where contact vertices touch.

    contact_vertices: (T, V, 3) tensor of the body contact set.  For each
    flagged (frame, vertex) the velocity to the next frame, in m/s, pays
    for moving into the scene (normal part) and for tangential slip
    beyond sigma.  Flags and surface normals are detached.
    """
    verts = ad.as_tensor(contact_vertices)
    if verts.ndim != 3 or verts.shape[0] < 2:
        raise ValueError("friction energy needs a (T, V, 3) track, T >= 2")
    here = verts.data[:-1]
    sdf, normals, _ = sc.sdf_query(here, scene)
    flags = (sdf < sc.CONTACT_SDF_THRESHOLD).astype(np.float64)
    if not flags.any():
        return ad.Tensor(0.0)
    vel = (verts[1:] - verts[:-1]) * float(fps)
    vn = (vel * normals).sum(axis=-1)
    tan = vel - vn.reshape(vn.shape + (1,)) * normals
    slip = _speed(tan)
    pen = ad.relu(-vn) + ad.relu(slip - sigma)
    return (pen * flags).sum()


def e_infill(markers, xhat, chat, marker_visibility, marker_set, fps,
             speed_limit=FOOT_SPEED_LIMIT):
    """Consistency with the infiller: occluded markers track the predicted
    trajectories, and feet predicted to be in contact must not slide.

    markers: (T, nb, 3) tensor of the body markers being optimized;
    xhat/chat: infer() outputs; marker_visibility: (nb, T) with 0 on
    hidden markers.
    """
    if chat is None:
        raise ValueError("infill energy needs predicted contact labels")
    markers = ad.as_tensor(markers)
    xhat = np.asarray(xhat, dtype=np.float64)
    chat = np.asarray(chat, dtype=np.float64)
    hidden = 1.0 - np.asarray(marker_visibility, dtype=np.float64)
    t_frames = markers.shape[0]
    if xhat.shape != markers.shape:
        raise ValueError(f"xhat extents {xhat.shape} != {markers.shape}")
    if chat.shape != (t_frames, 4):
        raise ValueError(f"chat extents {chat.shape} != {(t_frames, 4)}")
    track = ((markers - xhat).abs() * hidden.T[:, :, None]).sum()

    rows = mo._foot_row_positions(marker_set)
    feet = markers[:, rows["l"] + rows["r"]]
    speed = _speed((feet[1:] - feet[:-1]) * float(fps))
    hinge = ad.relu(speed - speed_limit)
    return track + (hinge * chat[:-1]).sum()


def e_foot_heuristic(markers, marker_set, fps, ground=0.0,
                     z_thres=FOOT_HEIGHT_LIMIT, speed_limit=FOOT_SPEED_LIMIT):
    """Height-gated anti-skating: any heel/toe marker within z_thres of
    the ground pays for speed beyond the hinge threshold."""
    markers = ad.as_tensor(markers)
    rows = mo._foot_row_positions(marker_set)
    feet = markers[:, rows["l"] + rows["r"]]
    low = (feet.data[:-1, :, 2] - ground) <= z_thres
    speed = _speed((feet[1:] - feet[:-1]) * float(fps))
    hinge = ad.relu(speed - speed_limit)
    return (hinge * low.astype(np.float64)).sum()


def baseline_smoother(markers, fps, mode, k=10):
    """Unlearned smoothness baselines over (T, M, 3) marker tracks.

    l2v / l2a are mean squared velocity / acceleration (m/s, m/s^2); dct
    is the energy outside the first k DCT-II coefficients per trajectory.
    """
    markers = ad.as_tensor(markers)
    t_frames = markers.shape[0]
    if mode == "l2v":
        v = (markers[1:] - markers[:-1]) * float(fps)
        return (v * v).mean()
    if mode == "l2a":
        acc = (markers[2:] - 2.0 * markers[1:-1] + markers[:-2]) \
            * float(fps) ** 2
        return (acc * acc).mean()
    if mode == "dct":
        if k >= t_frames:
            raise ValueError(
                f"dct smoother wants k < {t_frames} frames, got k={k}")
        basis = _dct_basis(t_frames)
        coef = ad.as_tensor(basis) @ markers.reshape(t_frames, -1)
        high = coef[k:]
        return (high * high).sum()
    raise ValueError(f"unknown smoother mode {mode!r}")


def _dct_basis(n):
    """Orthonormal DCT-II analysis matrix, rows are frequencies."""
    t = np.arange(n)
    basis = np.cos(np.pi * (2 * t[None] + 1) * t[:, None] / (2 * n))
    basis *= np.sqrt(2.0 / n)
    basis[0] *= np.sqrt(0.5)
    return basis
