import math
import time

import numpy as np
import pytest

from hta_oracle import oracle_depths, violations
from stormlatent import autodiff as ad
from stormlatent.hta import (
    HtaSchedule,
    ScheduleEntry,
    build_hta_schedule,
    chain_schedule,
    rollout,
    training_rollout,
)
from stormlatent.model import LatentState


class LaterInput:
    def lpm_predict(self, delta, a, b):
        return LatentState(b.tensor, b.time_index + delta)


class Recorder:
    """Deterministic non-trivial predictor that logs its calls."""

    def __init__(self):
        self.calls = []

    def lpm_predict(self, delta, a, b):
        self.calls.append(delta)
        return LatentState(a.tensor * 0.5 + b.tensor * float(delta) + 1.0, b.time_index + delta)


def observed(rng, shape=(2, 3)):
    return {k: LatentState(ad.Tensor(rng.standard_normal(shape)), np.array([k + 10])) for k in range(-4, 1)}


def test_short_schedules():
    assert build_hta_schedule(1).entries == (ScheduleEntry(1, 1, (-1, 0)),)
    assert build_hta_schedule(4).entries == (
        ScheduleEntry(1, 1, (-1, 0)),
        ScheduleEntry(2, 2, (-2, 0)),
        ScheduleEntry(3, 1, (1, 2)),
        ScheduleEntry(4, 4, (-4, 0)),
    )
    with pytest.raises(ValueError):
        build_hta_schedule(0)


@pytest.mark.parametrize("horizon", range(1, 49))
def test_schedule_invariants(horizon):
    sched = build_hta_schedule(horizon)
    assert violations(sched, horizon) == []
    assert violations(chain_schedule(horizon), horizon) == []


def test_depths_match_graph_oracle_and_bound():
    start = time.perf_counter()
    sched = build_hta_schedule(48)
    depth = oracle_depths(sched)
    assert depth == sched.depths()
    for k in range(1, 49):
        assert depth[k] <= math.ceil(k / 4) + 2
    chain = oracle_depths(chain_schedule(48))
    assert all(chain[k] == k for k in range(1, 49))
    assert oracle_depths(build_hta_schedule(24))[24] == 6
    assert time.perf_counter() - start < 1.0


def test_schedule_csv():
    lines = build_hta_schedule(4).to_csv().splitlines()
    assert lines[0] == "output_step,delta,input_a,input_b,depth"
    assert lines[3] == "3,1,1,2,2"


def test_stub_fixed_point():
    rng = np.random.default_rng(0)
    obs = observed(rng)
    out = rollout(LaterInput(), obs, build_hta_schedule(24))
    assert len(out) == 24
    for s in out:
        assert np.array_equal(s.tensor.data, obs[0].tensor.data)


def test_three_step_hand_unroll():
    rng = np.random.default_rng(1)
    obs = observed(rng)
    m = Recorder()
    out = rollout(m, obs, build_hta_schedule(3))
    f = lambda d, a, b: a * 0.5 + b * float(d) + 1.0
    h = {k: v.tensor.data for k, v in obs.items()}
    h1 = f(1, h[-1], h[0])
    h2 = f(2, h[-2], h[0])
    h3 = f(1, h1, h2)
    assert m.calls == [1, 2, 1]
    for got, want in zip(out, (h1, h2, h3)):
        assert np.array_equal(got.tensor.data, want)
    assert [int(s.time_index[0]) for s in out] == [11, 12, 13]


def test_rollout_is_deterministic():
    rng = np.random.default_rng(2)
    obs = observed(rng)
    a = rollout(Recorder(), obs, build_hta_schedule(12))
    b = rollout(Recorder(), obs, build_hta_schedule(12))
    assert all(np.array_equal(x.tensor.data, y.tensor.data) for x, y in zip(a, b))


def test_rollout_errors():
    rng = np.random.default_rng(3)
    obs = observed(rng)
    del obs[-3]
    with pytest.raises(ValueError):
        rollout(Recorder(), obs, build_hta_schedule(4))
    bad = HtaSchedule((ScheduleEntry(1, 1, (0, 5)),))
    with pytest.raises(ValueError):
        rollout(Recorder(), observed(rng), bad)


@pytest.mark.parametrize("delta", [1, 2, 4])
def test_training_rollout_consumes_spacing(delta):
    rng = np.random.default_rng(delta)
    lat = {k: LatentState(ad.Tensor(rng.standard_normal(3), requires_grad=True), np.array([k])) for k in (-delta, 0)}
    m = Recorder()
    first, second = training_rollout(m, lat, delta)
    assert m.calls == [delta, delta]
    assert int(first.time_index[0]) == delta and int(second.time_index[0]) == 2 * delta
    # h_{-delta} reaches the second prediction only through the first
    ad.backward(ad.tsum(second.tensor))
    assert np.allclose(lat[-delta].tensor.grad, 0.5 * delta)
    with pytest.raises(ValueError):
        training_rollout(m, {0: lat[0]}, delta)
