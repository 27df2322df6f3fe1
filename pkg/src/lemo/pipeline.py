"""Multi-stage body fitting and the end-to-end experiment driver.

stage1_fit solves every frame independently against its observations;
stage2_fit optimizes the whole clip with the latent smoothness and
friction terms; stage3_fit adapts the motion infiller to the sequence
and adds its consistency term.  fit_to_markers is the marker-only
objective used to evaluate infilled motion.  run_full chains synthesis,
prior training, fitting and metrics into one artifacts directory.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import body as bd
from . import config as cf
from . import energies as en
from . import infill as inf
from . import metrics as mt
from . import motion as mo
from . import report as rp
from . import scene as sc
from . import smooth as sm
from . import synth as sy

# observation-fit terms that must never appear in the temporal stages
BANNED_TEMPORAL_TERMS = ("contact", "depth")
PHASES = ("synth", "train-smoothness", "train-infiller", "fit", "metrics")
STAGE_NAMES = ("stage1", "stage2", "stage3")
DESK_EYE = (0.0, -2.8, 1.4)
DESK_TARGET = (0.0, 0.0, 0.8)


@dataclass
class FitResult:
    clip: mo.MotionClip
    flagged: np.ndarray        # per-frame divergence flags
    trace: dict                # term name -> checkpoint values
    steps: list                # checkpoint step numbers
    aux: dict = field(default_factory=dict)


def _check_temporal_terms(terms):
    bad = sorted(set(terms) & set(BANNED_TEMPORAL_TERMS))
    if bad:
        raise AssertionError(
            f"temporal stages must not evaluate {', '.join(bad)}")


def _sanitize_grads(params, flags=None):
    """Zero non-finite gradient entries so one bad frame cannot poison
    the shared Adam step; the offending frames get flagged."""
    for p in params:
        g = p.grad
        if g is None:
            continue
        bad = ~np.isfinite(g)
        if bad.any():
            if flags is not None:
                flags[np.unique(np.nonzero(bad)[0])] = True
            g[bad] = 0.0


def clip_vertices(clip, body):
    """Surface vertex tracks (T, V, 3) of a clip, plain numpy."""
    fk = bd.forward_kinematics(clip.translations(), clip.rotations(),
                               clip.scales(), body)
    return fk.surface_vertices(clip.scales())[0].data


def _init_translation(obs):
    """Per-frame cloud centroid; frames without depth borrow the mean."""
    cents = np.full((len(obs.clouds), 3), np.nan)
    for t, cloud in enumerate(obs.clouds):
        if cloud is not None and len(cloud):
            cents[t] = np.asarray(cloud, dtype=np.float64).mean(axis=0)
    have = np.isfinite(cents[:, 0])
    if not have.any():
        return np.tile([0.0, 0.0, 0.9], (len(cents), 1))
    cents[~have] = cents[have].mean(axis=0)
    return cents


def _depth_batched(verts, normal_data, clouds, eye):
    """Depth term over all frames in one gather: (total, per-frame)."""
    vd = verts.data
    fids, vids, targets = [], [], []
    for t, cloud in enumerate(clouds):
        if cloud is None or len(cloud) == 0:
            continue
        cloud = np.asarray(cloud, dtype=np.float64)
        sel = en._nearest_visible(vd[t], normal_data[t], cloud, eye)
        fids.append(np.full(len(sel), t))
        vids.append(sel)
        targets.append(cloud)
    per_frame = np.zeros(len(clouds))
    if not fids:
        return None, per_frame
    fids = np.concatenate(fids)
    diff = verts[fids, np.concatenate(vids)] - np.concatenate(targets)
    per_point = (diff * diff).sum(axis=-1)
    np.add.at(per_frame, fids, per_point.data)
    return per_point.sum(), per_frame


def stage1_fit(obs, scene, body, fps=mo.DEFAULT_FPS, steps=300, lr=0.05,
               weights=None, check_every=25):
    """Fit body parameters to every frame independently.

    The per-frame objectives are optimized in lockstep through one Adam
    on their sum; the sum is separable per frame and Adam is elementwise,
    so this is exactly independent per-frame minimization.  Each frame
    keeps its best checkpointed iterate; a frame whose final objective is
    worse than its best comes back flagged.  Afterwards the per-frame
    shape vectors collapse to their per-dimension median, fixing the
    shape for the later stages.
    """
    w = weights or en.EnergyWeights()
    t_frames = len(obs.joints2d)
    cam = obs.camera
    eye = -cam.rot.T @ cam.trans
    ci = body.vertices.contact_indices

    gamma = ad.Tensor(_init_translation(obs), requires_grad=True)
    theta = ad.Tensor(np.zeros((t_frames, bd.N_JOINTS, 3)),
                      requires_grad=True)
    beta = ad.Tensor(np.ones((t_frames, bd.N_JOINTS)), requires_grad=True)
    params = [gamma, theta, beta]
    opt = ad.Adam(params, lr=lr)

    # two lr drops near the end polish off Adam's step-size wiggle
    drops = {int(steps * 0.76): lr * 0.2, int(steps * 0.9): lr * 0.04}

    flags = np.zeros(t_frames, dtype=bool)
    best_pf = np.full(t_frames, np.inf)
    best = [p.data.copy() for p in params]
    trace = {"total": []}
    logged = []

    def objective():
        fk = bd.forward_kinematics(gamma, theta, beta, body)
        verts, normals = fk.surface_vertices(beta)
        pf = en.e_joint2d(fk.joints, obs.joints2d, obs.confidence, cam,
                          per_frame=True)
        pf = pf + bd.e_prior(theta, beta, body, per_frame=True)
        pf = pf + en.e_contact(verts[:, ci], scene,
                               per_frame=True) * w.contact
        pf = pf + en.e_coll(verts, scene, per_frame=True) * w.coll
        total = pf.sum()
        pf_vals = pf.data.copy()
        depth_total, depth_pf = _depth_batched(verts, normals.data,
                                               obs.clouds, eye)
        if depth_total is not None:
            total = total + depth_total * w.depth
            pf_vals += w.depth * depth_pf
        return total, pf_vals

    def snapshot(pf_vals):
        finite = np.isfinite(pf_vals)
        better = finite & (pf_vals < best_pf)
        for p, b in zip(params, best):
            b[better] = p.data[better]
        best_pf[better] = pf_vals[better]
        flags[~finite] = True

    for step in range(steps):
        if step in drops:
            opt.state.lr = drops[step]
        opt.zero_grad()
        total, pf_vals = objective()
        snapshot(pf_vals)
        if step % check_every == 0:
            trace["total"].append(float(total.data))
            logged.append(step)
        total.backward()
        _sanitize_grads(params, flags)
        opt.step()
    total, pf_vals = objective()
    snapshot(pf_vals)
    trace["total"].append(float(total.data))
    logged.append(steps)

    # a frame that ended far above its best iterate diverged; everyone
    # returns the best iterate either way
    with np.errstate(invalid="ignore"):
        flags |= ~np.isfinite(pf_vals) | (pf_vals > best_pf * 1.5 + 1e-6)
    gsol, tsol, bsol = (b.copy() for b in best)
    bsol[:] = np.median(bsol, axis=0)
    clip = mo.MotionClip.from_arrays(gsol, tsol, bsol, fps=fps,
                                     marker_kind=body.marker_kind)
    return FitResult(clip, flags, trace, logged)


def _temporal_fit(clip, obs, scene, body, beta, steps, lr, check_every,
                  smooth_model, weights, infill_pred=None):
    """Shared stage-2/3 loop: joint Adam over translation and pose."""
    w = weights
    cam = obs.camera
    ci = body.vertices.contact_indices
    ms = body.markers
    bidx = ms.body_indices
    fps = clip.fps
    term_names = ["joint2d", "prior", "coll", "smooth", "fric"]
    if infill_pred is not None:
        term_names.append("infill")
    _check_temporal_terms(term_names)
    smooth_model.set_trainable(False)

    gamma = ad.Tensor(clip.translations().copy(), requires_grad=True)
    theta = ad.Tensor(clip.rotations().copy(), requires_grad=True)
    params = [gamma, theta]
    opt = ad.Adam(params, lr=lr)

    def objective():
        fk = bd.forward_kinematics(gamma, theta, beta, body)
        verts, _ = fk.surface_vertices(beta)
        markers = fk.markers()
        vals = {
            "joint2d": en.e_joint2d(fk.joints, obs.joints2d,
                                    obs.confidence, cam),
            "prior": bd.e_prior(theta, beta, body),
            "coll": en.e_coll(verts, scene) * w.coll,
            "smooth": sm.e_smooth(markers, smooth_model,
                                  compute_dtype=np.float32) * w.smooth,
            "fric": en.e_fric(verts[:, ci], scene, fps) * w.fric,
        }
        if infill_pred is not None:
            xhat, chat, mb = infill_pred
            vals["infill"] = en.e_infill(markers[:, bidx], xhat, chat, mb,
                                         ms, fps) * w.infill
        total = None
        for v in vals.values():
            total = v if total is None else total + v
        return total, vals

    flags = np.zeros(clip.T, dtype=bool)
    best_total = np.inf
    best = [p.data.copy() for p in params]
    trace = {k: [] for k in term_names + ["total"]}
    logged = []

    def snapshot(total):
        nonlocal best_total
        tv = float(total.data)
        if np.isfinite(tv) and tv < best_total:
            best_total = tv
            for p, b in zip(params, best):
                b[:] = p.data

    def record(step, total, vals):
        trace["total"].append(float(total.data))
        for k, v in vals.items():
            trace[k].append(float(v.data))
        logged.append(step)

    for step in range(steps):
        opt.zero_grad()
        total, vals = objective()
        snapshot(total)
        if step % check_every == 0:
            record(step, total, vals)
        total.backward()
        _sanitize_grads(params, flags)
        opt.step()
    total, vals = objective()
    snapshot(total)
    record(steps, total, vals)

    final = float(total.data)
    if not np.isfinite(final) or final > best_total * 1.5 + 1e-6:
        flags[:] = True
    scales = np.tile(beta, (clip.T, 1))
    out = mo.MotionClip.from_arrays(best[0].copy(), best[1].copy(), scales,
                                    clip.expressions(), fps,
                                    clip.marker_kind)
    return FitResult(out, flags, trace, logged)


def stage2_fit(clip, obs, scene, smooth_model, body, steps=900, lr=5e-3,
               weights=None, check_every=30):
    """Temporal smoothing of a stage-1 estimate.

    Joint Adam over all frames' translation and pose; the shape stays
    fixed at its stage-1 consensus.  The objective keeps the observation
    and prior terms and adds collision, latent smoothness and friction.
    """
    w = weights or en.EnergyWeights()
    beta = clip.scales()[0].copy()
    return _temporal_fit(clip, obs, scene, body, beta, steps, lr,
                         check_every, smooth_model, w)


def stage3_fit(clip, obs, scene, smooth_model, infiller, mask, body,
               steps=900, lr=5e-3, weights=None, check_every=30,
               finetune_steps=100, finetune_lr=1e-4):
    """Occlusion-aware refinement of a stage-2 estimate.

    First adapts a copy of the infiller to this sequence on its visible
    entries, then predicts hidden markers and contact labels once, and
    finally optimizes with the infill consistency term added.
    """
    w = weights or en.EnergyWeights()
    mask = np.asarray(mask, dtype=np.float64)
    p_rows, nb = mo.infill_dims(body.markers)
    if mask.shape != (p_rows, clip.T):
        raise ValueError(f"mask wants {(p_rows, clip.T)}, got {mask.shape}")
    _, masked = mo.build_infill_tensor(clip, body, mask)
    adapted, _ = inf.finetune_per_instance(infiller, masked, mask,
                                           steps=finetune_steps,
                                           lr=finetune_lr)
    pivot0 = clip.translations()[0, :2]
    yaw0 = mo.root_yaw_series(clip, body)[0]
    xhat, chat = inf.infer(adapted, masked, pivot0=pivot0, yaw0=yaw0)
    mb = mask[:3 * nb:3]  # marker-level rows of the visibility mask
    beta = clip.scales()[0].copy()
    result = _temporal_fit(clip, obs, scene, body, beta, steps, lr,
                           check_every, smooth_model, w,
                           infill_pred=(xhat, chat, mb))
    result.aux = {"xhat": xhat, "chat": chat}
    return result


def fit_to_markers(xhat, chat, body, smooth_model, fps=mo.DEFAULT_FPS,
                   mode="ours", weights=None, beta=None,
                   pf_steps=250, pf_lr=0.05, tf_steps=150, tf_lr=5e-3,
                   check_every=25):
    """Two-phase fit of body parameters to infilled marker tracks.

    The per-frame phase pulls each frame's body markers onto xhat under
    the pose prior alone; the temporal phase continues with the latent
    smoothness term plus a foot term: the predicted-contact velocity
    hinge ('ours') or the height-heuristic variant ('heuristic').
    """
    if mode not in ("ours", "heuristic"):
        raise ValueError(f"unknown foot term mode {mode!r}")
    w = weights or en.EnergyWeights()
    xhat = np.asarray(xhat, dtype=np.float64)
    t_frames = xhat.shape[0]
    ms = body.markers
    bidx = ms.body_indices
    if xhat.shape[1] != len(bidx):
        raise ValueError(
            f"xhat wants {len(bidx)} body markers, got {xhat.shape[1]}")
    if beta is None:
        beta = np.ones(bd.N_JOINTS)
    smooth_model.set_trainable(False)

    gamma = ad.Tensor(xhat.mean(axis=1), requires_grad=True)
    theta = ad.Tensor(np.zeros((t_frames, bd.N_JOINTS, 3)),
                      requires_grad=True)
    params = [gamma, theta]
    trace = {}
    logged = []

    def objective(phase):
        fk = bd.forward_kinematics(gamma, theta, beta, body)
        markers = fk.markers()
        vals = {"marker3d": (markers[:, bidx] - xhat).abs().sum(),
                "prior": bd.e_prior(theta, beta, body)}
        if phase == "tf":
            vals["smooth"] = sm.e_smooth(markers, smooth_model,
                                         compute_dtype=np.float32) * w.smooth
            if mode == "ours":
                vis = np.ones((len(bidx), t_frames))
                vals["foot"] = en.e_infill(markers[:, bidx], xhat, chat,
                                           vis, ms, fps) * w.infill
            else:
                vals["foot"] = en.e_foot_heuristic(markers[:, bidx], ms,
                                                   fps) * w.infill
        total = None
        for v in vals.values():
            total = v if total is None else total + v
        return total, vals

    def run_phase(phase, steps, lr):
        opt = ad.Adam(params, lr=lr)
        for key in ("total",) + (("marker3d", "prior") if phase == "pf"
                                 else ("marker3d", "prior", "smooth",
                                       "foot")):
            trace[f"{phase}_{key}"] = []

        def record(step, total, vals):
            trace[f"{phase}_total"].append(float(total.data))
            for k, v in vals.items():
                trace[f"{phase}_{k}"].append(float(v.data))
            logged.append(step)

        for step in range(steps):
            opt.zero_grad()
            total, vals = objective(phase)
            if step % check_every == 0:
                record(step, total, vals)
            total.backward()
            _sanitize_grads(params)
            opt.step()
        total, vals = objective(phase)
        record(steps, total, vals)

    run_phase("pf", pf_steps, pf_lr)
    run_phase("tf", tf_steps, tf_lr)
    scales = np.tile(beta, (t_frames, 1))
    clip = mo.MotionClip.from_arrays(gamma.data.copy(), theta.data.copy(),
                                     scales, fps=fps,
                                     marker_kind=body.marker_kind)
    return FitResult(clip, np.zeros(t_frames, dtype=bool), trace, logged)


# --- end-to-end driver -----------------------------------------------------------


def _lower_occluder(eye, clip, body, along=0.6, margin=0.05):
    """Box between the camera and the clip's lower-body markers."""
    eye = np.asarray(eye, dtype=np.float64)
    lower = clip.markers(body)[:, body.markers.lower_body_indices]
    proj = eye + along * (lower.reshape(-1, 3) - eye)
    center = (proj.max(axis=0) + proj.min(axis=0)) / 2.0
    half = (proj.max(axis=0) - proj.min(axis=0)) / 2.0 + margin
    return sc.Box(center, half)


def _write_manifest(out_dir, manifest, notes):
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        for phase in PHASES:
            line = f"{phase} {manifest[phase]}"
            if phase in notes:
                line += f" {notes[phase]}"
            f.write(line + "\n")


def read_manifest(out_dir):
    manifest = {}
    with open(os.path.join(out_dir, "manifest.txt")) as f:
        for line in f:
            parts = line.strip().split(" ", 2)
            if len(parts) >= 2:
                manifest[parts[0]] = parts[1]
    return manifest


def _weights_dir(out_dir):
    path = os.path.join(out_dir, "weights")
    os.makedirs(path, exist_ok=True)
    return path


def smoothness_weights_path(out_dir):
    return os.path.join(_weights_dir(out_dir), "smoothness.lemow")


def infiller_weights_path(out_dir):
    return os.path.join(_weights_dir(out_dir), "infiller.lemow")


def _load_dataset(out_dir, body):
    """Rebuild the split -> entries table from a dataset directory."""
    dataset = {}
    for split, kind, seed, path in _read_dataset_manifest(out_dir):
        clip, _ = mo.load_clip(path)
        entry = sy.DatasetEntry(split, kind, seed, path, clip, None)
        dataset.setdefault(split, []).append(entry)
    return dataset


def _dataset(cfg, out, body, state):
    if "dataset" not in state:
        state["dataset"] = _load_dataset(out, body)
    return state["dataset"]


def _phase_synth(cfg, out, body, state, jobs):
    base = 10000 * (cfg.seed + 1)
    dataset, _ = sy.build_dataset(
        os.path.join(out, "dataset"), body,
        counts=(cfg.train_clips, cfg.val_clips, cfg.test_clips),
        seed_starts=(base + 1000, base + 2000, base + 3000),
        duration=cfg.clip_duration, target_frames=cfg.clip_frames)
    state["dataset"] = dataset


def _phase_smooth(cfg, out, body, state, jobs):
    maps = [mo.build_velocity_map(e.clip, body)
            for e in _dataset(cfg, out, body, state)["train"]]
    model, _ = sm.train_smoothness(
        maps, alpha=cfg.smooth_alpha, epochs=cfg.smooth_epochs,
        batch=cfg.smooth_batch, lr=cfg.smooth_lr, seed=cfg.seed,
        log_path=os.path.join(out, "smoothness_loss.csv"))
    model.save(smoothness_weights_path(out))
    state["smooth"] = model


def _phase_infiller(cfg, out, body, state, jobs):
    clips = [e.clip for e in _dataset(cfg, out, body, state)["train"]]
    model, _ = inf.train_infiller(
        clips, body, epochs=cfg.infill_epochs, batch=cfg.infill_batch,
        lr=cfg.infill_lr, seed=cfg.seed,
        log_path=os.path.join(out, "infiller_loss.csv"))
    model.save(infiller_weights_path(out))
    state["infiller"] = model


def clip_inputs(cfg, body, entry, index):
    """Deterministic observations + occlusion mask for one test clip."""
    scene = sy.scene_for_kind(entry.kind)
    camera = bd.camera_lookat(DESK_EYE, DESK_TARGET)
    if cfg.mask_kind == "lower-body":
        occluders = [_lower_occluder(DESK_EYE, entry.clip, body)]
    else:
        occluders = []
    obs = sy.synth_observations(
        entry.clip, camera, body, sigma_2d=cfg.sigma_2d,
        sigma_3d=cfg.sigma_3d, occluders=occluders,
        seed=1000 * (cfg.seed + 1) + index,
        cloud_points=cfg.cloud_points)
    if cfg.mask_kind == "lower-body":
        mask, _ = sy.mask_from_visibility(obs.marker_visible, body.markers)
    else:
        mask, _ = mo.sample_occlusion_mask(
            "random-window", 77 * (cfg.seed + 1) + index, body.markers,
            entry.clip.T)
    return scene, obs, mask


def _smooth_model(cfg, out, state):
    if "smooth" not in state:
        path = smoothness_weights_path(out)
        if not os.path.exists(path):
            raise FileNotFoundError(
                f"no trained smoothness weights at {path}; run the "
                "train-smoothness step first")
        state["smooth"] = sm.SmoothnessAutoencoder.load(path)
    return state["smooth"]


def _infill_model(cfg, out, state):
    if "infiller" not in state:
        path = infiller_weights_path(out)
        if not os.path.exists(path):
            raise FileNotFoundError(
                f"no trained infiller weights at {path}; run the "
                "train-infiller step first")
        state["infiller"] = inf.InfillNetwork.load(path)
    return state["infiller"]


def _stage_clip_path(out, seed, stage):
    return os.path.join(out, "fits", f"clip{seed}_{stage}.txt")


def _save_stage(out, seed, stage, result, mask=None):
    os.makedirs(os.path.join(out, "fits"), exist_ok=True)
    mo.save_clip(_stage_clip_path(out, seed, stage), result.clip, mask)


def _fit_one(cfg, out, body, state, index, entry, stage="all"):
    scene, obs, mask = clip_inputs(cfg, body, entry, index)
    w = cfg.energy_weights()

    def load_stage(name):
        path = _stage_clip_path(out, entry.seed, name)
        if not os.path.exists(path):
            raise FileNotFoundError(
                f"no {name} fit at {path}; run fit --stage {name[-1]} first")
        return mo.load_clip(path)[0]

    def run1():
        s1 = stage1_fit(obs, scene, body, fps=cfg.fps,
                        steps=cfg.stage1_steps, lr=cfg.stage1_lr, weights=w)
        _save_stage(out, entry.seed, "stage1", s1)
        return s1

    def run2(prev):
        s2 = stage2_fit(prev, obs, scene, _smooth_model(cfg, out, state),
                        body, steps=cfg.stage2_steps, lr=cfg.stage2_lr,
                        weights=w)
        _save_stage(out, entry.seed, "stage2", s2)
        return s2

    def run3(prev):
        s3 = stage3_fit(prev, obs, scene, _smooth_model(cfg, out, state),
                        _infill_model(cfg, out, state), mask, body,
                        steps=cfg.stage3_steps, lr=cfg.stage3_lr, weights=w,
                        finetune_steps=cfg.finetune_steps,
                        finetune_lr=cfg.finetune_lr)
        _save_stage(out, entry.seed, "stage3", s3)
        return s3

    if stage == "1":
        return index, entry, {"stage1": run1()}
    if stage == "2":
        return index, entry, {"stage2": run2(load_stage("stage1"))}
    if stage == "3":
        prev = load_stage("stage1" if cfg.swap_stages else "stage2")
        return index, entry, {"stage3": run3(prev)}
    s1 = run1()
    if cfg.swap_stages:
        s3 = run3(s1.clip)
        s2 = run2(s3.clip)
    else:
        s2 = run2(s1.clip)
        s3 = run3(s2.clip)
    return index, entry, {"stage1": s1, "stage2": s2, "stage3": s3}


def _phase_fit(cfg, out, body, state, jobs, stage="all"):
    entries = _dataset(cfg, out, body, state)["test"][:cfg.fit_clips]
    if stage in ("2", "3", "all"):
        _smooth_model(cfg, out, state)  # fail fast before fitting
    if stage in ("3", "all"):
        _infill_model(cfg, out, state)
    work = list(enumerate(entries))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(
                lambda item: _fit_one(cfg, out, body, state, *item,
                                      stage=stage), work))
    else:
        results = [_fit_one(cfg, out, body, state, *item, stage=stage)
                   for item in work]
    state["fits"] = results


def _phase_metrics(cfg, out, body, state, jobs):
    rows = evaluate_run(out, cfg)
    state["metrics"] = rows


def run_full(cfg, out_dir=None, dry_run=False, jobs=1):
    """synth -> train-smoothness -> train-infiller -> fit -> metrics.

    Writes clips, trained weights, metric CSVs and per-stage marker
    trace CSVs under the artifacts directory.  A failing phase keeps the
    artifacts produced so far; the manifest records every phase's state.
    """
    cfg.validate()
    out = out_dir or cfg.out_dir or "lemo_out"
    os.makedirs(out, exist_ok=True)
    manifest = {phase: "pending" for phase in PHASES}
    notes = {}
    _write_manifest(out, manifest, notes)
    cf.save_config(os.path.join(out, "config.txt"), cfg)
    if dry_run:
        return out, manifest

    body = bd.build_body(marker_kind=cfg.marker_kind)
    state = {}
    runners = (("synth", _phase_synth), ("train-smoothness", _phase_smooth),
               ("train-infiller", _phase_infiller), ("fit", _phase_fit),
               ("metrics", _phase_metrics))
    for name, runner in runners:
        try:
            runner(cfg, out, body, state, jobs)
        except Exception as err:  # keep partial artifacts + state note
            manifest[name] = "failed"
            notes[name] = f"{type(err).__name__}: {err}"
            _write_manifest(out, manifest, notes)
            return out, manifest
        manifest[name] = "done"
        _write_manifest(out, manifest, notes)
    return out, manifest


# --- artifacts-driven evaluation ---------------------------------------------------


def _read_dataset_manifest(out_dir):
    manifest = os.path.join(out_dir, "dataset", "manifest.txt")
    if not os.path.exists(manifest):
        raise FileNotFoundError(
            f"no dataset manifest at {manifest}; run the synth step first")
    rows = []
    with open(manifest) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            split, kind, seed, _, _, path = line.split(" ", 5)
            if not os.path.exists(path):
                path = os.path.join(out_dir, "dataset", split,
                                    f"clip_{seed}.txt")
            rows.append((split, kind, int(seed), path))
    return rows


def load_fits(out_dir, cfg=None):
    """Reload the fitted stage clips and their inputs from an artifacts
    directory: list of (seed, kind, truth clip, {stage: clip}, mask)."""
    if cfg is None:
        cfg = cf.load_config(os.path.join(out_dir, "config.txt"))
    rows = _read_dataset_manifest(out_dir)
    test = [r for r in rows if r[0] == "test"][:cfg.fit_clips]
    fits = []
    for _, kind, seed, path in test:
        truth, _ = mo.load_clip(path)
        stages = {}
        mask = None
        for stage in STAGE_NAMES:
            clip_path = os.path.join(out_dir, "fits",
                                     f"clip{seed}_{stage}.txt")
            if not os.path.exists(clip_path):
                continue
            clip, clip_mask = mo.load_clip(clip_path)
            stages[stage] = clip
            if clip_mask is not None:
                mask = clip_mask
        if stages:
            fits.append((seed, kind, truth, stages, mask))
    if not fits:
        raise FileNotFoundError(f"no fitted clips under {out_dir}/fits")
    return fits


def evaluate_run(out_dir, cfg=None):
    """Metric table for a run directory; writes metrics.csv and the
    per-stage trajectory/acceleration traces of the first clip."""
    if cfg is None:
        cfg = cf.load_config(os.path.join(out_dir, "config.txt"))
    body = bd.build_body(marker_kind=cfg.marker_kind)
    ms = body.markers
    camera = bd.camera_lookat(DESK_EYE, DESK_TARGET)
    rows = _read_dataset_manifest(out_dir)
    val_markers = [mo.load_clip(path)[0].markers(body)
                   for split, _, _, path in rows if split == "val"]
    fits = load_fits(out_dir, cfg)

    table = []
    stage_sets = {}
    first_traces = {}
    for seed, kind, truth, stages, _ in fits:
        scene = sy.scene_for_kind(kind)
        name = f"clip{seed}"
        gt_joints = truth.joints(body)
        gt_markers = truth.markers(body)
        gt_verts = clip_vertices(truth, body)
        gt_2d = bd.project_2d(gt_joints, camera)[0].data
        for stage in STAGE_NAMES:
            if stage not in stages:
                continue
            est = stages[stage]
            est_markers = est.markers(body)
            est_verts = clip_vertices(est, body)
            stage_sets.setdefault(stage, []).append(est_markers)
            if not first_traces or seed == fits[0][0]:
                first_traces[stage] = est_markers
            table.append((name, stage, "mpjpe", mt.position_errors(
                est.joints(body), gt_joints, "mpjpe")))
            for region in ("full", "lower"):
                suffix = "" if region == "full" else "_lower"
                table.append((name, stage, "mpmpe" + suffix,
                              mt.position_errors(est_markers, gt_markers,
                                                 "mpmpe", region, body)))
            table.append((name, stage, "pve", mt.position_errors(
                est_verts, gt_verts, "pve")))
            table.append((name, stage, "foot_skate",
                          mt.foot_skating_ratio(est_markers, ms, cfg.fps)))
            table.append((name, stage, "non_collision",
                          mt.non_collision_score(est_verts, scene)))
            table.append((name, stage, "joint2d_px", mt.joint2d_error(
                est.joints(body), gt_2d, camera)))
    for stage in STAGE_NAMES:
        if stage not in stage_sets:
            continue
        kl = mt.pskl(stage_sets[stage], val_markers, cfg.fps)
        table.append(("all", stage, "pskl_to_clean", kl[0]))
        table.append(("all", stage, "pskl_from_clean", kl[1]))
    mt.write_csv(os.path.join(out_dir, "metrics.csv"), table)
    if first_traces:
        first_traces["truth"] = fits[0][2].markers(body)
        rp.write_stage_traces(os.path.join(out_dir, "traces"), first_traces,
                              cfg.fps, ms.heel_toe["l_heel"])
    return table
