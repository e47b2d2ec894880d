"""Comparison harnesses: loss ladder, latent vs physical iteration, importance sampling."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .losses import LOSS_VARIANTS
from .metrics import ScoreTable
from .model import LatentForecaster, LatentState
from .train import FitResult, TrainConfig, evaluate, fit

SUITES = ("loss", "space", "sampling")
COMBINED_HEADER = "suite,variant,lead_step,threshold,POD,CSI,HSS,FBI"


@dataclass
class RunOutcome:
    suite: str
    variant: str
    table: ScoreTable
    fit: FitResult
    macs_per_step: int = 0
    extra: dict = field(default_factory=dict)


def step_macs(model) -> int:
    """Multiply-adds of one iterated forecast step for a single sample.

    For the latent model this is one predictor call plus the projection to
    intensity; for the physical model the predictor output is the field itself.
    """
    cfg = model.cfg
    state_shape = (
        (cfg.latent_channels,) + cfg.latent_hw
        if isinstance(model, LatentForecaster)
        else (model.state_channels, cfg.height, cfg.width)
    )
    rng = np.random.default_rng(0)
    a = LatentState(ad.Tensor(rng.standard_normal((1,) + state_shape)), np.array([0]))
    b = LatentState(ad.Tensor(rng.standard_normal((1,) + state_shape)), np.array([1]))
    model.eval()
    with ad.no_grad(), ad.count_macs() as counter:
        out = model.lpm_predict(1, a, b)
        model.project(out.tensor)
    return int(counter[0])


def run_variant(suite, variant, splits, cfg: TrainConfig, thresholds, out_dir=None, log=None) -> RunOutcome:
    sub = None if out_dir is None else Path(out_dir) / suite / variant
    result = fit(splits, cfg, sub, log)
    table = evaluate(result.model, splits["test"], result.stats, cfg.horizon, thresholds, cfg.val_batch)
    outcome = RunOutcome(suite, variant, table, result, step_macs(result.model))
    outcome.extra["train_sequences"] = result.train_sequences
    outcome.extra["steps"] = result.steps
    if sub is not None:
        (sub / "metrics.csv").write_text(table.to_csv())
    return outcome


def loss_ladder(splits, cfg: TrainConfig, variants=LOSS_VARIANTS, thresholds=(0.2, 1.0), out_dir=None, log=None):
    """Identical seeds and data; only the pixel loss differs."""
    return [
        run_variant("loss", v, splits, dataclasses.replace(cfg, loss_variant=v), thresholds, out_dir, log)
        for v in variants
    ]


def space_comparison(splits, cfg: TrainConfig, thresholds=(0.2, 1.0), out_dir=None, log=None):
    """Latent-space vs physical-space iteration with the same epochs, batches and seeds."""
    return [
        run_variant("space", s, splits, dataclasses.replace(cfg, iteration_space=s), thresholds, out_dir, log)
        for s in ("latent", "physical")
    ]


def sampling_comparison(splits, cfg: TrainConfig, thresholds=(0.2, 1.0), out_dir=None, log=None):
    """Full training set vs the importance-filtered one."""
    return [
        run_variant(
            "sampling",
            "importance" if flag else "full",
            splits,
            dataclasses.replace(cfg, importance_sampling=flag),
            thresholds,
            out_dir,
            log,
        )
        for flag in (False, True)
    ]


def combined_csv(outcomes: list[RunOutcome]) -> str:
    lines = [COMBINED_HEADER]
    for o in outcomes:
        body = o.table.to_csv(include_mean=True).splitlines()[1:]
        lines += [f"{o.suite},{o.variant},{row}" for row in body]
    return "\n".join(lines) + "\n"


def summary_csv(outcomes: list[RunOutcome], threshold: float = 0.2) -> str:
    """Headline numbers per run: early/late POD, CSI at the last lead, compute per step."""
    lines = ["suite,variant,pod_1_6,csi_1_6,pod_13_24,csi_last,macs_per_step,train_sequences,steps"]
    for o in outcomes:
        t = o.table
        last = t.leads[-1]
        early = [k for k in t.leads if k <= 6]
        late = [k for k in t.leads if 13 <= k <= 24]
        csi_last = t.score(last, threshold)["CSI"]
        vals = [
            t.mean("POD", threshold, early),
            t.mean("CSI", threshold, early),
            t.mean("POD", threshold, late) if late else float("nan"),
            float("nan") if csi_last == "NA" else csi_last,
        ]
        lines.append(
            f"{o.suite},{o.variant}," + ",".join(repr(float(v)) for v in vals)
            + f",{o.macs_per_step},{o.extra.get('train_sequences', 0)},{o.extra.get('steps', 0)}"
        )
    return "\n".join(lines) + "\n"
