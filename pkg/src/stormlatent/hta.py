"""Hierarchical multi-interval rollout schedule and its execution.

Observed steps are -4..0.  Step 1 comes from the interval-1 predictor on
(-1, 0), step 2 from interval-2 on (-2, 0), step 3 from interval-1 on the
two fresh predictions (1, 2), and every step k >= 4 from interval-4 on
(k-8, k-4).
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import LatentState

OBSERVED_WINDOW = tuple(range(-4, 1))


@dataclass(frozen=True)
class ScheduleEntry:
    step: int
    delta: int
    inputs: tuple[int, int]


@dataclass(frozen=True)
class HtaSchedule:
    entries: tuple[ScheduleEntry, ...]
    observed_window: tuple[int, ...] = OBSERVED_WINDOW

    @property
    def horizon(self) -> int:
        return len(self.entries)

    def depths(self) -> dict[int, int]:
        """Longest chain of predictor calls from the observations to each step."""
        depth = {k: 0 for k in self.observed_window}
        for e in self.entries:
            depth[e.step] = 1 + max(depth[e.inputs[0]], depth[e.inputs[1]])
        return depth

    def to_csv(self) -> str:
        depth = self.depths()
        lines = ["output_step,delta,input_a,input_b,depth"]
        for e in self.entries:
            lines.append(f"{e.step},{e.delta},{e.inputs[0]},{e.inputs[1]},{depth[e.step]}")
        return "\n".join(lines) + "\n"


def _entry(k: int) -> ScheduleEntry:
    if k == 1:
        return ScheduleEntry(1, 1, (-1, 0))
    if k == 2:
        return ScheduleEntry(2, 2, (-2, 0))
    if k == 3:
        return ScheduleEntry(3, 1, (1, 2))
    return ScheduleEntry(k, 4, (k - 8, k - 4))


def build_hta_schedule(horizon: int) -> HtaSchedule:
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    return HtaSchedule(tuple(_entry(k) for k in range(1, horizon + 1)))


def chain_schedule(horizon: int) -> HtaSchedule:
    """Pure interval-1 chaining, for comparison."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    return HtaSchedule(tuple(ScheduleEntry(k, 1, (k - 2, k - 1)) for k in range(1, horizon + 1)))


def rollout(model, observed: dict[int, LatentState], schedule: HtaSchedule) -> list[LatentState]:
    """Execute the schedule; ``model`` only needs ``lpm_predict(delta, a, b)``."""
    missing = [k for k in schedule.observed_window if k not in observed]
    if missing:
        raise ValueError(f"observed latents missing for steps {missing}")
    known = dict(observed)
    out = []
    for e in schedule.entries:
        a, b = e.inputs
        if a not in known or b not in known:
            raise ValueError(f"step {e.step}: input step {a if a not in known else b} is unresolved")
        pred = model.lpm_predict(e.delta, known[a], known[b])
        known[e.step] = pred
        out.append(pred)
    return out


def training_rollout(model, latents: dict[int, LatentState], delta: int) -> tuple[LatentState, LatentState]:
    """Two chained predictions at spacing ``delta`` from encoded steps -delta and 0."""
    for k in (-delta, 0):
        if k not in latents:
            raise ValueError(f"training rollout needs the encoded latent at step {k}")
    first = model.lpm_predict(delta, latents[-delta], latents[0])
    second = model.lpm_predict(delta, latents[0], first)
    return first, second
