"""Integrated Gradients over input channels and per-variable aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .hta import build_hta_schedule, rollout
from .model import LatentState

CSV_HEADER = "channel_name,lead_group,mean_abs_attr,rank"


@dataclass
class AttributionMap:
    """Attributions shaped like the inputs, plus what they were computed for."""

    values: dict[str, np.ndarray]
    lead_group: str = ""
    baseline: str = "zeros"
    steps: int = 0
    output: float = 0.0  # F(x)
    baseline_output: float = 0.0  # F(baseline)
    meta: dict = field(default_factory=dict)

    def total(self) -> float:
        return float(sum(v.sum() for v in self.values.values()))

    def completeness_error(self) -> float:
        """|sum(attr) - (F(x) - F(baseline))| relative to the output change."""
        delta = self.output - self.baseline_output
        if delta == 0:
            return abs(self.total())
        return abs(self.total() - delta) / abs(delta)


def _as_dict(x) -> tuple[dict[str, np.ndarray], bool]:
    if isinstance(x, dict):
        return {k: np.asarray(v, dtype=np.float64) for k, v in x.items() if v is not None}, True
    return {"x": np.asarray(x, dtype=np.float64)}, False


def integrated_gradients(
    forward: Callable,
    x,
    baseline=None,
    m: int = 128,
    batch_size: int = 32,
) -> AttributionMap:
    """Right-endpoint Riemann approximation of the path integral from baseline to x.

    ``forward`` receives the inputs with an extra leading path axis (k, ...)
    as Tensors (a dict when ``x`` is a dict) and returns a (k,) Tensor of
    independent scalar outputs, one per path point.
    """
    if m < 1:
        raise ValueError("the number of path steps must be at least 1")
    xs, is_dict = _as_dict(x)
    if baseline is None:
        bs = {k: np.zeros_like(v) for k, v in xs.items()}
        desc = "zeros"
    else:
        bs, _ = _as_dict(baseline)
        desc = "custom"
    if set(bs) != set(xs):
        raise ValueError(f"baseline inputs {sorted(bs)} do not match {sorted(xs)}")
    for k in xs:
        if bs[k].shape != xs[k].shape:
            raise ValueError(f"{k}: baseline shape {bs[k].shape} != input shape {xs[k].shape}")

    def call(points: dict[str, np.ndarray], need_grad: bool):
        leaves = {k: ad.Tensor(v, requires_grad=need_grad) for k, v in points.items()}
        out = forward(leaves if is_dict else leaves["x"])
        out = ad.as_tensor(out)
        if out.ndim != 1 or out.shape[0] != next(iter(points.values())).shape[0]:
            raise ValueError(f"forward must return one scalar per path point, got shape {out.shape}")
        return leaves, out

    with ad.no_grad():
        _, ends = call({k: np.stack([bs[k], xs[k]]) for k in xs}, False)
    f_base, f_x = float(ends.data[0]), float(ends.data[1])

    grad_sum = {k: np.zeros_like(v) for k, v in xs.items()}
    alphas = np.arange(1, m + 1) / m
    for start in range(0, m, batch_size):
        a = alphas[start : start + batch_size]
        shape = lambda v: (len(a),) + (1,) * v.ndim
        points = {k: bs[k][None] + a.reshape(shape(xs[k])) * (xs[k] - bs[k])[None] for k in xs}
        leaves, out = call(points, True)
        ad.backward(ad.tsum(out))
        for k, leaf in leaves.items():
            if leaf.grad is not None:
                grad_sum[k] += leaf.grad.sum(axis=0)
    values = {k: (xs[k] - bs[k]) * grad_sum[k] / m for k in xs}
    for k, v in values.items():
        if not np.all(np.isfinite(v)):
            raise ValueError(f"non-finite attribution for input {k}")
    return AttributionMap(values, baseline=desc, steps=m, output=f_x, baseline_output=f_base)


# ---------------------------------------------------------------------------
# forecast targets


def lead_group_label(group: tuple[int, int]) -> str:
    return f"{group[0]}-{group[1]}"


def rollout_intensity(model, inputs: dict, time_index: np.ndarray, horizon: int):
    """Projected normalized intensity for leads 1..horizon from a batch of 5-step windows.

    inputs[name]: Tensor (k, 5, C, H, W); returns a list of (k, 1, H, W) Tensors.
    """
    any_x = next(iter(inputs.values()))
    k, steps = any_x.shape[:2]
    latents = {}
    for t in range(steps):
        x_t = {n: ad.take(ad.transpose(v, (1, 0, 2, 3, 4)), t) for n, v in inputs.items()}
        h = model.encode(**x_t)
        latents[t - steps + 1] = LatentState(h, np.full(k, time_index[t], dtype=np.int64))
    preds = rollout(model, latents, build_hta_schedule(horizon))
    return [model.project(p.tensor) for p in preds]


def make_target(model, time_index, group: tuple[int, int], mask: np.ndarray | None):
    """Scalar per path point: mean predicted intensity over ``mask`` in the lead group.

    The mask (leads, H, W) is fixed in advance so the target stays a smooth function
    of the inputs along the path.
    """
    lo, hi = group

    def forward(inputs):
        ys = rollout_intensity(model, inputs, time_index, hi)[lo - 1 : hi]
        y = ad.concat(ys, axis=1)  # (k, leads, H, W)
        w = np.ones(y.shape[1:]) if mask is None else mask.astype(float)
        w = w / max(w.sum(), 1.0)
        return _row_sum(y * w)

    return forward


def _row_sum(t):
    n = t.shape[0]
    flat = ad.reshape(t, (n, -1))
    return ad.reshape(ad.matmul(flat, np.ones((flat.shape[1], 1))), (n,))


def precip_mask(model, x: dict, time_index, group, tau_norm: float) -> np.ndarray:
    """Pixels forecast as precipitating at x over the lead group; all pixels if none are."""
    lo, hi = group
    with ad.no_grad():
        model.eval()
        ys = rollout_intensity(model, {k: ad.Tensor(v[None]) for k, v in x.items()}, time_index, hi)
    y = np.concatenate([t.data[0] for t in ys[lo - 1 : hi]])
    mask = y >= tau_norm
    return mask if mask.any() else np.ones_like(mask)


def attribute_window(model, x: dict, time_index, group, tau_norm: float, m: int = 128, batch_size: int = 4):
    """IG for one observed 5-step window; x[name] has shape (5, C, H, W) (normalized)."""
    model.eval()
    x = {k: v for k, v in x.items() if v is not None}
    mask = precip_mask(model, x, time_index, group, tau_norm)
    amap = integrated_gradients(make_target(model, time_index, group, mask), x, None, m, batch_size)
    amap.lead_group = lead_group_label(group)
    amap.meta["mask_pixels"] = int(mask.sum())
    return amap


# ---------------------------------------------------------------------------
# aggregation


def channel_magnitudes(amap: AttributionMap, names: dict[str, tuple[str, ...]]) -> dict[str, float]:
    """Sum of |attr| over every axis except the channel axis (-3)."""
    out = {}
    for modality, v in amap.values.items():
        per = np.abs(v).reshape(-1, v.shape[-3], v.shape[-2] * v.shape[-1])
        per = per.sum(axis=(0, 2))
        labels = names.get(modality) or tuple(f"{modality}_{i}" for i in range(v.shape[-3]))
        for label, val in zip(labels, per):
            out[label] = float(val)
    return out


def aggregate_attribution(maps: list[AttributionMap], names: dict[str, tuple[str, ...]]) -> list[dict]:
    """Mean over samples of per-channel |attr| sums, ranked within each lead group."""
    if not maps:
        raise ValueError("no attribution maps to aggregate")
    groups: dict[str, list[dict[str, float]]] = {}
    for amap in maps:
        groups.setdefault(amap.lead_group, []).append(channel_magnitudes(amap, names))
    rows = []
    for group, per_sample in groups.items():
        channels = list(per_sample[0])
        means = {c: float(np.mean([s[c] for s in per_sample])) for c in channels}
        ranked = sorted(channels, key=lambda c: (-means[c], channels.index(c)))
        for rank, c in enumerate(ranked, start=1):
            rows.append({"channel_name": c, "lead_group": group, "mean_abs_attr": means[c], "rank": rank})
    return rows


def attribution_csv(rows: list[dict]) -> str:
    lines = [CSV_HEADER]
    for r in rows:
        lines.append(f"{r['channel_name']},{r['lead_group']},{r['mean_abs_attr']!r},{r['rank']}")
    return "\n".join(lines) + "\n"
