"""Motion naturalness and accuracy metrics.

Spectrum-based scores (power spectra, PSKL) run on marker accelerations;
positional errors compare joint/marker/vertex tracks; skating and
collision scores check plausibility against the scene.  Everything here
is pure numpy and deterministic.
"""
import csv

import numpy as np

from . import body as bd
from . import scene as sc

SPECTRUM_EPS = 1e-10
SKATE_SPEED_LIMIT = 0.10   # m/s
SKATE_HEIGHT_LIMIT = 0.10  # m above ground
POSITION_KINDS = ("mpjpe", "mpmpe", "pve")
# ambiguous joint definitions across 2D pose conventions
EXCLUDED_2D_JOINTS = ("neck", "l_hip", "r_hip")


def power_spectrum(sequence):
    """One-sided magnitude-squared spectrum along axis 0, normalized to
    sum to 1 per trailing feature; floored at SPECTRUM_EPS first."""
    x = np.asarray(sequence, dtype=np.float64)
    if x.shape[0] < 4:
        raise ValueError("power spectrum needs at least 4 frames")
    ps = np.abs(np.fft.rfft(x, axis=0)) ** 2
    ps = np.maximum(ps, SPECTRUM_EPS)
    return ps / ps.sum(axis=0, keepdims=True)


def accelerations(markers, fps):
    """Second differences scaled to world units, (T-2, ...)."""
    x = np.asarray(markers, dtype=np.float64)
    if x.shape[0] < 3:
        raise ValueError("accelerations need at least 3 frames")
    return (x[2:] - 2.0 * x[1:-1] + x[:-2]) * float(fps) ** 2


def _avg_feature_spectra(clips, fps):
    total = None
    for markers in clips:
        acc = accelerations(markers, fps)
        spec = power_spectrum(acc.reshape(acc.shape[0], -1))
        total = spec if total is None else total + spec
    return total / len(clips)


def pskl(clips_c, clips_d, fps):
    """KL divergence between average acceleration spectra, per feature,
    both directions: (KL(C||D), KL(D||C))."""
    clips_c, clips_d = list(clips_c), list(clips_d)
    if not clips_c or not clips_d:
        raise ValueError("pskl needs two nonempty clip sets")
    t_frames = np.shape(clips_c[0])[0]
    for markers in clips_c + clips_d:
        if np.shape(markers)[0] != t_frames:
            raise ValueError("pskl clips must share one frame count")
    p = _avg_feature_spectra(clips_c, fps)
    q = _avg_feature_spectra(clips_d, fps)
    kl_cd = float(np.mean((p * np.log(p / q)).sum(axis=0)))
    kl_dc = float(np.mean((q * np.log(q / p)).sum(axis=0)))
    return kl_cd, kl_dc


def foot_skating_ratio(markers, marker_set, fps, ground=0.0):
    """Fraction of velocity frames where both heels move faster than
    10 cm/s while sitting within 10 cm of the ground."""
    x = np.asarray(markers, dtype=np.float64)
    heels = x[:, [marker_set.heel_toe["l_heel"], marker_set.heel_toe["r_heel"]]]
    speed = np.linalg.norm(np.diff(heels, axis=0), axis=-1) * float(fps)
    low = (heels[:-1, :, 2] - ground) < SKATE_HEIGHT_LIMIT
    skating = (speed > SKATE_SPEED_LIMIT) & low
    return float(skating.all(axis=1).mean())


def non_collision_score(vertices, scene):
    """Per-frame fraction of vertices with non-negative scene SDF,
    averaged over frames."""
    v = np.asarray(vertices, dtype=np.float64)
    sdf = sc.sdf_query(v.reshape(-1, 3), scene)[0].reshape(v.shape[:-1])
    return float((sdf >= 0.0).mean(axis=-1).mean())


def _lower_indices(kind, body):
    if body is None:
        raise ValueError("region='lower' needs the body definition")
    if kind == "mpjpe":
        return np.asarray(bd.LOWER_BODY_JOINTS)
    if kind == "mpmpe":
        return body.markers.lower_body_indices
    return np.where(np.isin(body.vertices.joints, bd.LOWER_BODY_JOINTS))[0]


def position_errors(estimate, reference, kind, region="full", body=None):
    """Mean Euclidean error in meters over joints (mpjpe), markers
    (mpmpe) or surface vertices (pve), full body or lower body only."""
    est = np.asarray(estimate, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"entity mismatch: {est.shape} vs {ref.shape}")
    kind = kind.lower()
    if kind not in POSITION_KINDS:
        raise ValueError(f"unknown position error kind {kind!r}")
    if region == "lower":
        idx = _lower_indices(kind, body)
        est, ref = est[:, idx], ref[:, idx]
    elif region != "full":
        raise ValueError(f"unknown region {region!r}")
    return float(np.linalg.norm(est - ref, axis=-1).mean())


def joint2d_error(joints3d, reference2d, camera):
    """Mean pixel distance between projected and reference 2D joints,
    skipping the ambiguity-prone neck and hip joints."""
    pix, _ = bd.project_2d(np.asarray(joints3d, dtype=np.float64), camera)
    keep = [i for i, n in enumerate(bd.JOINT_NAMES)
            if n not in EXCLUDED_2D_JOINTS]
    err = pix.data[:, keep] - np.asarray(reference2d, dtype=np.float64)[:, keep]
    return float(np.linalg.norm(err, axis=-1).mean())


def write_csv(path, rows):
    """One row per (clip, stage, metric); values serialized via repr so
    identical runs produce identical bytes."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["clip", "stage", "metric", "value"])
        for clip, stage, metric, value in rows:
            writer.writerow([clip, stage, metric, repr(float(value))])


def read_csv(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != ["clip", "stage", "metric", "value"]:
            raise ValueError(f"unexpected metrics header {header}")
        return [(c, s, m, float(v)) for c, s, m, v in reader]
