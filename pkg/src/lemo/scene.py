"""Static scene geometry as signed distance fields.

A scene is a z-up ground plane plus axis-aligned boxes.  sdf_query is the
plain numpy path (distances, outward normals, winning primitive);
sdf_tensor is the autodiff path used inside contact/collision energies.
Ties across primitives resolve to the lowest primitive index.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

CONTACT_SDF_THRESHOLD = 0.01  # meters


@dataclass
class Plane:
    """Horizontal plane; signed distance is height above the surface."""
    level: float = 0.0

    def sdf(self, pts):
        return pts[..., 2] - self.level

    def normals(self, pts):
        n = np.zeros(pts.shape)
        n[..., 2] = 1.0
        return n


@dataclass
class Box:
    center: np.ndarray
    half: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.half = np.asarray(self.half, dtype=np.float64)
        if np.any(self.half <= 0):
            raise ValueError("box half extents must be positive")

    def sdf(self, pts):
        q = np.abs(pts - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def normals(self, pts):
        rel = pts - self.center
        q = np.abs(rel) - self.half
        out_vec = np.sign(rel) * np.maximum(q, 0.0)
        out_len = np.linalg.norm(out_vec, axis=-1, keepdims=True)
        # on or inside the box: normal of the nearest face
        face_axis = q.argmax(axis=-1)
        face_sign = np.where(np.take_along_axis(
            rel, face_axis[..., None], axis=-1) >= 0, 1.0, -1.0)
        face_n = np.zeros(pts.shape)
        np.put_along_axis(face_n, face_axis[..., None], face_sign, axis=-1)
        outside = out_len[..., 0] > 0
        return np.where(outside[..., None], out_vec / np.where(out_len, out_len, 1.0),
                        face_n)


@dataclass
class Scene:
    primitives: list = field(default_factory=lambda: [Plane(0.0)])

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")


def make_ground_scene(boxes=()):
    return Scene([Plane(0.0)] + [Box(c, h) for c, h in boxes])


def sdf_query(points, scene: Scene):
    """Min signed distance over primitives (numpy path).

    Returns (sdf, normals, prim_index) with leading shape of points; ties
    go to the earlier primitive.
    """
    pts = np.asarray(points, dtype=np.float64)
    per = np.stack([p.sdf(pts) for p in scene.primitives])       # (P, ...)
    prim = per.argmin(axis=0)                                    # first min wins
    sdf = np.take_along_axis(per, prim[None], axis=0)[0]
    normals = np.zeros(pts.shape)
    for i, p in enumerate(scene.primitives):
        sel = prim == i
        if np.any(sel):
            normals[sel] = p.normals(pts[sel])
    return sdf, normals, prim


def contact_query(points, scene: Scene, threshold=CONTACT_SDF_THRESHOLD):
    """Boolean proximity mask: signed distance under the contact threshold."""
    sdf, _, _ = sdf_query(points, scene)
    return sdf < threshold


def _box_sdf_tensor(pts, box: Box):
    q = (pts - box.center).abs() - box.half
    qpos = ad.relu(q)
    s = (qpos * qpos).sum(axis=-1)
    has_out = s.data > 0
    # guarded sqrt: the interior branch would otherwise NaN the backward pass
    s_safe = ad.where(has_out, s, ad.as_tensor(np.ones_like(s.data)))
    outside = ad.where(has_out, s_safe.sqrt(), ad.as_tensor(np.zeros_like(s.data)))
    qmax = ad.maximum(ad.maximum(q[..., 0], q[..., 1]), q[..., 2])
    inside = ad.minimum(qmax, 0.0)
    return outside + inside


def sdf_tensor(points, scene: Scene):
    """Differentiable min-over-primitives signed distance (autodiff path)."""
    pts = ad.as_tensor(points)
    per = []
    for p in scene.primitives:
        if isinstance(p, Plane):
            per.append(pts[..., 2] - p.level)
        elif isinstance(p, Box):
            per.append(_box_sdf_tensor(pts, p))
        else:
            raise TypeError(f"unsupported primitive {type(p).__name__}")
    if len(per) == 1:
        return per[0]
    stacked = ad.stack(per, axis=0)
    prim = stacked.data.argmin(axis=0)
    idx = (prim,) + tuple(np.indices(prim.shape))
    return stacked[idx]


# --- scene file -----------------------------------------------------------------


def save_scene(path, scene: Scene):
    with open(path, "w") as f:
        for p in scene.primitives:
            if isinstance(p, Plane):
                f.write(f"plane {p.level!r}\n")
            elif isinstance(p, Box):
                vals = list(p.center) + list(p.half)
                f.write("box " + " ".join(repr(float(v)) for v in vals) + "\n")
            else:
                raise TypeError(f"unsupported primitive {type(p).__name__}")


def load_scene(path):
    prims = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            kind, *rest = line.split()
            if kind == "plane":
                if len(rest) != 1:
                    raise ValueError(f"scene line {ln}: plane wants 1 value")
                prims.append(Plane(float(rest[0])))
            elif kind == "box":
                if len(rest) != 6:
                    raise ValueError(f"scene line {ln}: box wants 6 values")
                vals = [float(v) for v in rest]
                prims.append(Box(vals[:3], vals[3:]))
            else:
                raise ValueError(f"scene line {ln}: unknown primitive {kind!r}")
    return Scene(prims)
