"""Command-line interface: synthesis, training, fitting, evaluation.

Exit codes: 0 success, 1 validation error (bad arguments, missing
prerequisite artifacts), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np


class _Parser(argparse.ArgumentParser):
    # the contract wants usage + status 1 on bad flags (argparse uses 2)
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser():
    parser = _Parser(prog="lemo",
                     description="Scene-aware body fitting with learned "
                                 "motion priors on synthetic desk data.")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)
    specs = (
        ("synth", "generate the train/val/test clip dataset"),
        ("train-smoothness", "train the latent smoothness prior"),
        ("train-infiller", "train the contact-aware motion infiller"),
        ("fit", "fit test clips (stages 1-3)"),
        ("eval", "compute the metric table from fitted clips"),
        ("plot", "write per-stage marker trace CSVs and figures"),
        ("self-test", "run the gradient and metric invariant suite"),
    )
    for name, help_text in specs:
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="config file with 'key value' lines")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="artifacts directory "
                                      "(default $LEMO_OUT or lemo_out)")
        sp.add_argument("--jobs", type=int, default=1,
                        help="worker threads for independent clips")
        if name == "fit":
            sp.add_argument("--stage", choices=["1", "2", "3", "all"],
                            default="all", help="which stage to run")
    return parser


def _fd_scalar(build, x, h=1e-3):
    """Max relative gradient error of a scalar-valued builder at x."""
    from . import autodiff as ad
    xt = ad.Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    build(xt).backward()
    grad = xt.grad.reshape(-1)
    flat = np.array(x, dtype=np.float64).reshape(-1)
    worst = 0.0
    for k in range(flat.size):
        keep = flat[k]
        flat[k] = keep + h
        up = float(build(flat.reshape(np.shape(x))).data)
        flat[k] = keep - h
        dn = float(build(flat.reshape(np.shape(x))).data)
        flat[k] = keep
        fd = (up - dn) / (2 * h)
        scale = max(abs(fd), abs(grad[k]), 1e-8)
        worst = max(worst, abs(grad[k] - fd) / scale)
    return worst


def _self_test():
    """Seeded gradient spot-checks plus the metric identities."""
    from . import autodiff as ad
    from . import body as bd
    from . import energies as en
    from . import metrics as mt
    from . import nn
    from . import scene as sc

    rng = np.random.default_rng(7)

    x = rng.normal(size=(1, 2, 6, 5))
    kernel = rng.normal(size=(3, 2, 3, 3)) * 0.5

    def conv_loss(v):
        out = ad.conv2d(ad.as_tensor(v), ad.as_tensor(kernel), stride=1,
                        padding=1)
        return (out * out).sum()

    err = _fd_scalar(conv_loss, x)
    assert err < 1e-3, f"conv2d gradient error {err:.2e}"
    print(f"ok conv2d gradient ({err:.1e})")

    scene = sc.make_ground_scene([((0.5, 0.0, 0.25), (0.25, 0.25, 0.25))])
    pts = rng.uniform(-1.0, 1.0, size=(4, 5, 3))
    pts[..., 2] = rng.uniform(0.05, 0.8, size=(4, 5))
    # sliding tracks inside the contact band, clear of the hinge points
    slide = pts.copy()
    slide[..., 2] = 0.004 + rng.uniform(-1.0, 1.0, size=(4, 5)) * 5e-4
    slide[..., 0] += np.arange(4)[:, None] * 0.01

    for name, build, toy in (
        ("contact", lambda v: en.e_contact(ad.as_tensor(v), scene), pts),
        ("collision", lambda v: en.e_coll(ad.as_tensor(v), scene), pts),
        ("friction", lambda v: en.e_fric(ad.as_tensor(v), scene, fps=30.0),
         slide),
    ):
        err = _fd_scalar(build, toy, h=1e-6 if name == "friction" else 1e-3)
        assert err < 1e-3, f"{name} gradient error {err:.2e}"
        print(f"ok {name} gradient ({err:.1e})")

    clips = [rng.normal(size=(16, 9)) for _ in range(3)]
    kl = mt.pskl(clips, clips, fps=30.0)
    assert abs(kl[0]) < 1e-9 and abs(kl[1]) < 1e-9, f"pskl identity {kl}"
    print("ok pskl self-divergence is zero")

    spectra = mt.power_spectrum(clips[0])
    total = spectra.sum(axis=0)
    assert np.allclose(total, 1.0, atol=1e-9), "spectrum normalization"
    print("ok power spectra sum to one")

    body = bd.build_body(marker_kind="desk")
    markers = rng.normal(size=(12, len(body.markers.joints), 3))
    ratio = mt.foot_skating_ratio(markers, body.markers, fps=30.0)
    assert 0.0 <= ratio <= 1.0, f"skating ratio {ratio}"
    print("ok skating ratio in [0, 1]")

    above = rng.uniform(0.2, 1.0, size=(3, 40, 3))
    score = mt.non_collision_score(above, sc.make_ground_scene())
    assert score == 1.0, f"non-collision above ground {score}"
    print("ok non-collision above ground is 1.0")
    return 0


def _resolve(args):
    from . import config as cf
    if args.config:
        cfg = cf.load_config(args.config)
    else:
        cfg = cf.RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    out = args.out or cfg.out_dir or os.environ.get("LEMO_OUT") or "lemo_out"
    return cfg, out


def _dispatch(args, cfg, out):
    from . import body as bd
    from . import pipeline as pl
    from . import report as rp

    os.makedirs(out, exist_ok=True)
    body = bd.build_body(marker_kind=cfg.marker_kind)
    state = {}
    command = args.command
    if command == "synth":
        pl._phase_synth(cfg, out, body, state, args.jobs)
        print(f"dataset written under {os.path.join(out, 'dataset')}")
        return 0
    if command == "train-smoothness":
        pl._phase_smooth(cfg, out, body, state, args.jobs)
        print(f"smoothness weights: {pl.smoothness_weights_path(out)}")
        return 0
    if command == "train-infiller":
        pl._phase_infiller(cfg, out, body, state, args.jobs)
        print(f"infiller weights: {pl.infiller_weights_path(out)}")
        return 0
    if command == "fit":
        pl._phase_fit(cfg, out, body, state, args.jobs, stage=args.stage)
        done = sorted(os.listdir(os.path.join(out, "fits")))
        print(f"fitted clips under {os.path.join(out, 'fits')}: "
              f"{', '.join(done)}")
        return 0
    if command == "eval":
        rows = pl.evaluate_run(out, cfg)
        print("clip,stage,metric,value")
        for clip, stage, metric, value in rows:
            print(f"{clip},{stage},{metric},{float(value)!r}")
        print(f"metric table: {os.path.join(out, 'metrics.csv')}")
        return 0
    if command == "plot":
        fits = pl.load_fits(out, cfg)
        seed, _, truth, stages, _ = fits[0]
        ms = body.markers
        tracks = {name: clip.markers(body) for name, clip in stages.items()}
        tracks["truth"] = truth.markers(body)
        traces_dir = os.path.join(out, "traces")
        marker = ms.heel_toe["l_heel"]
        rp.write_stage_traces(traces_dir, tracks, cfg.fps, marker)
        rp.render_stage_figures(traces_dir, tracks, cfg.fps, marker)
        for stem in ("smoothness_loss", "infiller_loss"):
            log = os.path.join(out, f"{stem}.csv")
            if os.path.exists(log):
                with open(log) as f:
                    next(f)
                    losses = [float(line.split(",")[1]) for line in f]
                rp.render_loss_curve(os.path.join(traces_dir, f"{stem}.png"),
                                     losses, stem.replace("_", " "))
        print(f"traces and figures under {traces_dir} (clip{seed})")
        return 0
    if command == "self-test":
        return _self_test()
    raise ValueError(f"unknown command {command!r}")


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return int(exit_.code or 0)
    try:
        cfg, out = _resolve(args)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    try:
        return _dispatch(args, cfg, out)
    except (FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except AssertionError as err:
        print(f"self-test failed: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - map anything else to status 2
        print(f"runtime failure: {type(err).__name__}: {err}",
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
