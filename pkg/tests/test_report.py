"""Trace CSV contents and figure rendering."""
import csv

import numpy as np

import lemo.report as rp


def _tracks(t_frames=12, n_markers=5):
    rng = np.random.default_rng(0)
    return rng.normal(size=(t_frames, n_markers, 3))


def test_trajectory_csv_matches_input(tmp_path):
    markers = _tracks()
    path = tmp_path / "traj.csv"
    rp.write_trace_csv(path, markers, fps=30.0, marker_index=2,
                       kind="trajectory")
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["frame", "x", "y", "z"]
    assert len(rows) == 1 + len(markers)
    got = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    assert np.allclose(got, markers[:, 2], atol=0.0)
    assert [r[0] for r in rows[1:]] == [str(i) for i in range(len(markers))]


def test_acceleration_csv_matches_oracle(tmp_path):
    markers = _tracks()
    fps = 30.0
    path = tmp_path / "acc.csv"
    rp.write_trace_csv(path, markers, fps=fps, marker_index=0,
                       kind="acceleration")
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["frame", "ax", "ay", "az"]
    got = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    x = markers[:, 0]
    want = (x[2:] - 2 * x[1:-1] + x[:-2]) * fps * fps
    assert got.shape == want.shape
    assert np.allclose(got, want, atol=0.0)


def test_stage_traces_and_figures(tmp_path):
    stages = {"stage2": _tracks(), "stage1": _tracks() + 1.0,
              "truth": _tracks() - 1.0}
    out = tmp_path / "traces"
    rp.write_stage_traces(out, stages, fps=30.0, marker_index=1)
    names = sorted(p.name for p in out.iterdir())
    assert names == sorted(
        f"marker_{s}_{k}.csv" for s in stages
        for k in ("trajectory", "acceleration"))
    rp.render_stage_figures(out, stages, fps=30.0, marker_index=1)
    for kind in ("trajectory", "acceleration"):
        png = out / f"marker_{kind}.png"
        assert png.exists() and png.stat().st_size > 1000


def test_loss_curve(tmp_path):
    path = tmp_path / "loss.png"
    rp.render_loss_curve(path, [5.0, 3.0, 2.2, 2.0], "training loss")
    assert path.exists() and path.stat().st_size > 1000
