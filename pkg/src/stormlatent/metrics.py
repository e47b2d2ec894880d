"""Thresholded verification: contingency tables and POD/CSI/HSS/FBI."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NA = "NA"
DEFAULT_THRESHOLDS = (0.2, 1.0, 2.0, 4.0, 8.0)
DBZ_THRESHOLDS = (20.0, 25.0, 30.0)
CSV_HEADER = "lead_step,threshold,POD,CSI,HSS,FBI"


@dataclass(frozen=True)
class ContingencyTable:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            v = getattr(self, name)
            if v < 0:
                raise ValueError(f"{name} must be nonnegative, got {v}")

    def __add__(self, other: ContingencyTable) -> ContingencyTable:
        return ContingencyTable(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def contingency(pred, truth, threshold: float) -> ContingencyTable:
    """Per-pixel classification with the inclusive event rule value >= threshold."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs truth {truth.shape}")
    p = pred >= threshold
    t = truth >= threshold
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ContingencyTable(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: float, den: float):
    return NA if den == 0 else num / den


def scores(table: ContingencyTable, hss_standard: bool = False) -> dict:
    """POD, CSI, HSS and FBI; undefined ratios come back as the string "NA".

    HSS follows the form without the factor 2 unless ``hss_standard`` is set,
    so a perfect forecast scores 0.5 by default and 1.0 with the flag.
    """
    tp, fp, fn, tn = (float(v) for v in (table.tp, table.fp, table.fn, table.tn))
    den = (tp + fn) * (fn + tn) + (tp + fp) * (fp + tn)
    if tp + fn + fp == 0:
        hss = 0.0  # nothing observed or forecast: no skill either way
    else:
        hss = _ratio(tp * tn - fn * fp, den)
        if hss_standard and hss != NA:
            hss *= 2.0
    return {
        "POD": _ratio(tp, tp + fn),
        "CSI": _ratio(tp, tp + fn + fp),
        "HSS": hss,
        "FBI": _ratio(tp + fp, tp + fn),
    }


def fmt(value) -> str:
    return NA if value == NA else repr(float(value))


@dataclass
class ScoreTable:
    """Pooled tables and scores indexed by (lead_step, threshold)."""

    thresholds: tuple[float, ...]
    tables: dict[tuple[int, float], ContingencyTable]
    hss_standard: bool = False

    @property
    def leads(self) -> list[int]:
        return sorted({k for k, _ in self.tables})

    def score(self, lead: int, threshold: float) -> dict:
        return scores(self.tables[(lead, threshold)], self.hss_standard)

    def series(self, name: str, threshold: float) -> list:
        return [self.score(k, threshold)[name] for k in self.leads]

    def mean(self, name: str, threshold: float, leads=None) -> float:
        """Mean of a score over lead steps, skipping undefined values (nan if none)."""
        leads = self.leads if leads is None else list(leads)
        vals = [self.score(k, threshold)[name] for k in leads]
        vals = [v for v in vals if v != NA]
        return float(np.mean(vals)) if vals else float("nan")

    def rows(self) -> list[dict]:
        out = []
        for k in self.leads:
            for th in self.thresholds:
                out.append({"lead_step": k, "threshold": th, **self.score(k, th)})
        return out

    def to_csv(self, include_mean: bool = True) -> str:
        lines = [CSV_HEADER]
        for r in self.rows():
            lines.append(
                f"{r['lead_step']},{r['threshold']!r}," + ",".join(fmt(r[s]) for s in ("POD", "CSI", "HSS", "FBI"))
            )
        if include_mean:
            for th in self.thresholds:
                vals = [self.mean(s, th) for s in ("POD", "CSI", "HSS", "FBI")]
                lines.append(f"mean,{th!r}," + ",".join(NA if np.isnan(v) else repr(v) for v in vals))
        return "\n".join(lines) + "\n"


def evaluate_run(predictions, truths, thresholds=DEFAULT_THRESHOLDS, hss_standard: bool = False) -> ScoreTable:
    """Pool contingency counts over sequences for every (lead, threshold).

    predictions, truths: arrays or lists shaped (sequences, L, ...) in physical units.
    """
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} forecast sequences vs {len(truths)} truth sequences")
    if len(predictions) == 0:
        raise ValueError("no sequences to evaluate")
    horizon = len(predictions[0])
    thresholds = tuple(float(t) for t in thresholds)
    tables: dict[tuple[int, float], ContingencyTable] = {}
    for s, (pred, truth) in enumerate(zip(predictions, truths)):
        if len(pred) != horizon or len(truth) != horizon:
            raise ValueError(
                f"sequence {s}: horizon mismatch (forecast {len(pred)}, truth {len(truth)}, expected {horizon})"
            )
        for k in range(horizon):
            for th in thresholds:
                key = (k + 1, th)
                tables[key] = tables.get(key, ContingencyTable()) + contingency(pred[k], truth[k], th)
    return ScoreTable(thresholds, tables, hss_standard)
