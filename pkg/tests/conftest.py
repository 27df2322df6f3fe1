"""Shared fixtures: desk body, synthetic dataset, trained priors.

The dataset and both trained models are session-scoped because several
test modules (and the acceptance suite) share them; their build time is
recorded so time-budgeted tests can account for it.
"""
import time

import pytest

import lemo.body as bd
import lemo.infill as inf
import lemo.motion as mo
import lemo.smooth as sm
import lemo.synth as sy

SMOOTH_EPOCHS = 10
INFILL_EPOCHS = 60


@pytest.fixture(scope="session")
def desk_body():
    return bd.build_body(marker_kind="desk")


@pytest.fixture(scope="session")
def build_times():
    return {}


@pytest.fixture(scope="session")
def dataset(desk_body, build_times, tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    t0 = time.time()
    data, _ = sy.build_dataset(str(root), desk_body, counts=(64, 8, 8))
    build_times["dataset"] = time.time() - t0
    return data


@pytest.fixture(scope="session")
def smooth_model(dataset, desk_body, build_times):
    maps = [mo.build_velocity_map(e.clip, desk_body)
            for e in dataset["train"]]
    t0 = time.time()
    model, losses = sm.train_smoothness(maps, epochs=SMOOTH_EPOCHS, seed=0)
    build_times["smooth"] = time.time() - t0
    assert losses[-1] <= losses[0]
    return model


@pytest.fixture(scope="session")
def infill_model(dataset, desk_body, build_times):
    clips = [e.clip for e in dataset["train"]]
    t0 = time.time()
    model, losses = inf.train_infiller(clips, desk_body,
                                       epochs=INFILL_EPOCHS, seed=0)
    build_times["infill"] = time.time() - t0
    assert losses[-1] <= losses[0]
    return model
