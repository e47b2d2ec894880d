"""Training loop: AdamW, warmup + cosine schedule, two-step rollout supervision."""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import NormStats, Sequence, compute_stats, importance_filter, normalize_sequence
from .hta import build_hta_schedule, rollout, training_rollout
from .losses import LOSS_VARIANTS, RECON_WEIGHTS, LossBreakdown, latent_loss, pixel_loss, recon_loss
from .metrics import ScoreTable, evaluate_run
from .model import DELTAS, LatentForecaster, LatentState, ModelConfig, PhysicalIterator
from .tensorio import load_archive, save_archive

ITERATION_SPACES = ("latent", "physical")
EPOCH_CSV_HEADER = "epoch,lr,total_loss,val_csi_0.2,val_pod_0.2"
OBSERVED_STEPS = 5


class NumericError(RuntimeError):
    """Raised when a loss term or gradient stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    base_lr: float = 1e-5
    warmup_epochs: int = 20
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1.0
    dropout: float = 0.15
    batch_size: int = 8
    seed: int = 0
    loss_variant: str = "wmce"
    iteration_space: str = "latent"
    importance_sampling: bool = False
    keep_fraction: float = 0.5
    noise_sigma: float = 0.02
    grad_clip: float = 1.0
    samples_per_sequence: int = 1
    horizon: int = 24
    features: int = 4
    val_batch: int = 8

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs]")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"loss_variant must be one of {LOSS_VARIANTS}")
        if self.iteration_space not in ITERATION_SPACES:
            raise ValueError(f"iteration_space must be one of {ITERATION_SPACES}")
        if self.batch_size < 1 or self.samples_per_sequence < 1:
            raise ValueError("batch_size and samples_per_sequence must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")


def lr_at(progress: float, cfg: TrainConfig) -> float:
    """Learning rate after ``progress`` epochs: linear warmup, then cosine decay to zero."""
    e = min(max(progress, 0.0), float(cfg.epochs))
    w = cfg.warmup_epochs
    if w > 0 and e < w:
        return cfg.base_lr * e / w
    if cfg.epochs == w:
        return cfg.base_lr
    return 0.5 * cfg.base_lr * (1.0 + math.cos(math.pi * (e - w) / (cfg.epochs - w)))


class AdamW:
    """Adam with decoupled weight decay applied straight to the parameters."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.beta1, self.beta2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.wd:
                p.data *= 1.0 - lr * self.wd
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if not math.isfinite(norm):
        raise NumericError("gradient norm is not finite")
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


def build_model(cfg: TrainConfig, grids: dict) -> LatentForecaster | PhysicalIterator:
    mcfg = ModelConfig(
        height=grids["height"],
        width=grids["width"],
        coarse_height=grids["coarse_height"],
        coarse_width=grids["coarse_width"],
        qpe_radar_channels=grids["qpe_radar_channels"],
        reanalysis_channels=grids["reanalysis_channels"],
        satellite_channels=grids["satellite_channels"],
        features=cfg.features,
        dropout=cfg.dropout,
        seed=cfg.seed,
    )
    return LatentForecaster(mcfg) if cfg.iteration_space == "latent" else PhysicalIterator(mcfg)


def dataset_grids(seq: Sequence) -> dict:
    return {
        "height": seq.qpe_radar.shape[-2],
        "width": seq.qpe_radar.shape[-1],
        "coarse_height": seq.reanalysis.shape[-2],
        "coarse_width": seq.reanalysis.shape[-1],
        "qpe_radar_channels": seq.qpe_radar.shape[1],
        "reanalysis_channels": seq.reanalysis.shape[1],
        "satellite_channels": 0 if seq.satellite is None else seq.satellite.shape[1],
    }


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    """Normalized stacks at steps (t0 - delta, t0, t0 + delta, t0 + 2 delta)."""

    delta: int
    inputs: list[dict]  # one modality dict per step, each array (N, C, H, W)
    times: list[np.ndarray]
    target_norm: list[np.ndarray]  # at t0 + delta, t0 + 2 delta; (N, 1, H, W)
    target_raw: list[np.ndarray]


def _stack(seqs: list[Sequence], idx: list[int], name: str):
    arrs = [getattr(s, name) for s in seqs]
    if arrs[0] is None:
        return None
    return np.stack([a[i] for a, i in zip(arrs, idx)])


def make_batch(norm_seqs, raw_seqs, picks, origins, delta: int, stats: NormStats) -> Batch:
    ns = [norm_seqs[i] for i in picks]
    rs = [raw_seqs[i] for i in picks]
    inputs, times, tn, tr = [], [], [], []
    for k in (-1, 0, 1, 2):
        idx = [int(o + k * delta) for o in origins]
        inputs.append({name: _stack(ns, idx, name) for name in ("qpe_radar", "reanalysis", "satellite")})
        times.append(np.array([s.time_index[i] for s, i in zip(ns, idx)], dtype=np.int64))
        if k > 0:
            raw = np.stack([s.target[i] for s, i in zip(rs, idx)])
            tr.append(raw)
            tn.append(inputs[-1]["qpe_radar"][:, :1].copy())
    return Batch(delta, inputs, times, tn, tr)


def _noisy(x: dict, sigma: float, rng) -> dict:
    if sigma == 0:
        return dict(x)
    return {k: (None if v is None else v + rng.normal(0.0, sigma, v.shape)) for k, v in x.items()}


def _cat(dicts: list[dict]) -> dict:
    return {k: (None if dicts[0][k] is None else np.concatenate([d[k] for d in dicts])) for k in dicts[0]}


def _split(t, parts: int) -> list:
    n = t.shape[0] // parts
    return [ad.take(ad.reshape(t, (parts, n) + t.shape[1:]), i) for i in range(parts)]


def batch_loss(model, batch: Batch, cfg: TrainConfig, stats: NormStats, rng) -> tuple[ad.Tensor, LossBreakdown]:
    """Forward pass for one batch and the combined objective."""
    noisy = [_noisy(x, cfg.noise_sigma, rng) for x in batch.inputs[:2]]
    enc = model.encode(**_cat(noisy))
    h_prev, h_cur = _split(enc, 2)
    with ad.no_grad():
        h_true = _split(model.encode(**_cat(batch.inputs[2:])), 2)
    a = LatentState(h_prev, batch.times[0])
    b = LatentState(h_cur, batch.times[1])
    p1, p2 = training_rollout(model, {-batch.delta: a, 0: b}, batch.delta)
    preds = [p1.tensor, p2.tensor]
    if isinstance(model, LatentForecaster):
        yhat = model.project_many(preds)
    else:
        yhat = [model.project(p) for p in preds]

    terms = {"mae": ad.Tensor(0.0), "ce_precip": ad.Tensor(0.0), "ce_dry": ad.Tensor(0.0)}
    for y_norm, y_raw, yh in zip(batch.target_norm, batch.target_raw, yhat):
        _, t = pixel_loss(cfg.loss_variant, y_norm, yh, y_raw, stats.tau_norm)
        terms = {k: terms[k] + t[k] for k in terms}
    lat = latent_loss([h.data for h in h_true], preds)

    recon = {}
    if isinstance(model, LatentForecaster):
        states = [h_prev, h_cur] + preds
        truths = [batch.inputs[0], batch.inputs[1], batch.inputs[2], batch.inputs[3]]
        rec = model.reconstruct(ad.concat(states, axis=0))
        for name, r in rec.items():
            truth = np.concatenate([t[name] for t in truths])
            recon[name] = recon_loss({name: truth}, {name: r})[name]

    named = [("wmce_mae", terms["mae"]), ("wmce_ce_precip", terms["ce_precip"]), ("wmce_ce_dry", terms["ce_dry"])]
    named.append(("latent", lat))
    key = {"qpe_radar": "recon_fine", "reanalysis": "recon_reanalysis", "satellite": "recon_satellite"}
    named += [(key[k], v) for k, v in recon.items()]
    for name, t in named:
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"non-finite loss term: {name}")
    total = terms["mae"] + terms["ce_precip"] + terms["ce_dry"] + lat
    for name, r in recon.items():
        total = total + r * RECON_WEIGHTS[name]
    bd = LossBreakdown(**{n: float(t.data) for n, t in named})
    bd.total = float(total.data)
    return total, bd


def train_step(model, batch: Batch, cfg: TrainConfig, stats: NormStats, opt: AdamW, lr: float, rng) -> LossBreakdown:
    model.train()
    model.dropout_rng = rng
    opt.zero_grad()
    total, bd = batch_loss(model, batch, cfg, stats, rng)
    ad.backward(total)
    for name, p in model.named_parameters():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in {name}")
    clip_grad_norm(opt.params, cfg.grad_clip)
    opt.step(lr)
    return bd


def epoch_plan(n_seqs: int, seq_len: int, cfg: TrainConfig, epoch: int) -> list[tuple[int, list[int], list[int]]]:
    """(delta, sequence picks, origins) per batch, seeded by (seed, epoch, batch index)."""
    order_rng = np.random.default_rng([cfg.seed, epoch])
    items = np.tile(np.arange(n_seqs), cfg.samples_per_sequence)
    items = items[order_rng.permutation(items.size)]
    plan = []
    for bi, start in enumerate(range(0, items.size, cfg.batch_size)):
        picks = items[start : start + cfg.batch_size].tolist()
        rng = np.random.default_rng([cfg.seed, epoch, bi])
        delta = int(rng.choice(DELTAS))
        lo, hi = delta, seq_len - 1 - 2 * delta
        if hi < lo:
            raise ValueError(f"sequences of length {seq_len} are too short for interval {delta}")
        origins = rng.integers(lo, hi + 1, size=len(picks)).tolist()
        plan.append((delta, picks, origins))
    return plan


# ---------------------------------------------------------------------------
# inference


def forecast(model, norm_seqs: list[Sequence], stats: NormStats, horizon: int, batch_size: int = 8) -> np.ndarray:
    """HTA rollout from the first five steps; returns (S, horizon, H, W) intensities in mm/h."""
    model.eval()
    schedule = build_hta_schedule(horizon)
    outs = []
    with ad.no_grad():
        for start in range(0, len(norm_seqs), batch_size):
            chunk = norm_seqs[start : start + batch_size]
            for s in chunk:
                if len(s) < OBSERVED_STEPS:
                    raise ValueError(f"sequence has {len(s)} steps; at least {OBSERVED_STEPS} are needed")
            steps = {}
            xs = [{n: _stack(chunk, [t] * len(chunk), n) for n in ("qpe_radar", "reanalysis", "satellite")}
                  for t in range(OBSERVED_STEPS)]
            enc = _split(model.encode(**_cat(xs)), OBSERVED_STEPS)
            for t in range(OBSERVED_STEPS):
                times = np.array([s.time_index[t] for s in chunk], dtype=np.int64)
                steps[t - OBSERVED_STEPS + 1] = LatentState(enc[t], times)
            preds = rollout(model, steps, schedule)
            y = [model.project(p.tensor).data[:, 0] for p in preds]
            outs.append(np.stack(y, axis=1))
    y = np.concatenate(outs) * stats.intensity_cap
    return np.clip(y, 0.0, None)


def truth_window(raw_seqs: list[Sequence], horizon: int) -> np.ndarray:
    out = []
    for s in raw_seqs:
        if len(s) < OBSERVED_STEPS + horizon:
            raise ValueError(f"sequence has {len(s)} steps; {OBSERVED_STEPS + horizon} needed for horizon {horizon}")
        out.append(s.target[OBSERVED_STEPS : OBSERVED_STEPS + horizon, 0])
    return np.stack(out)


def evaluate(model, raw_seqs, stats, horizon, thresholds=(0.2, 1.0, 2.0, 4.0, 8.0), batch_size=8, hss_standard=False) -> ScoreTable:
    norm = [normalize_sequence(s, stats) for s in raw_seqs]
    pred = forecast(model, norm, stats, horizon, batch_size)
    return evaluate_run(pred, truth_window(raw_seqs, horizon), thresholds, hss_standard)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model, stats: NormStats, cfg: TrainConfig) -> Path:
    path = Path(path)
    tensors = dict(model.state_dict())
    tensors.update({f"norm.{k}": v for k, v in stats.to_arrays().items()})
    save_archive(path, tensors)
    meta = {
        "model": dataclasses.asdict(model.cfg),
        "train": dataclasses.asdict(cfg),
        "kind": type(model).__name__,
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path):
    """Returns (model, stats, train config)."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    mcfg = ModelConfig(**meta["model"])
    cfg = TrainConfig(**meta["train"])
    model = LatentForecaster(mcfg) if meta["kind"] == "LatentForecaster" else PhysicalIterator(mcfg)
    tensors = load_archive(path)
    stats = NormStats.from_arrays({k[5:]: v for k, v in tensors.items() if k.startswith("norm.")})
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("norm.")})
    return model, stats, cfg


# ---------------------------------------------------------------------------
# fit


@dataclass
class FitResult:
    model: object
    best_state: dict
    stats: NormStats
    best_epoch: int
    epoch_rows: list[str] = field(default_factory=list)
    step_rows: list[str] = field(default_factory=list)
    train_sequences: int = 0
    steps: int = 0

    def best_model(self):
        self.model.load_state_dict(self.best_state)
        return self.model


def _nan_to(v: float, fill: float) -> float:
    return fill if v != v else v


def fit(splits: dict[str, list[Sequence]], cfg: TrainConfig, out_dir=None, log=None) -> FitResult:
    """Train on ``splits['train']`` and keep the epoch with the best validation CSI@0.2."""
    cfg.validate()
    train_raw = list(splits.get("train", []))
    val_raw = list(splits.get("val", []))
    if not train_raw:
        raise ValueError("training split is empty")
    if not val_raw:
        raise ValueError("validation split is empty")
    stats = compute_stats(train_raw)
    if cfg.importance_sampling:
        train_raw = importance_filter(train_raw, cfg.keep_fraction, stats.tau_raw, cfg.seed)
        if not train_raw:
            raise ValueError("importance sampling removed every training sequence")
    train_norm = [normalize_sequence(s, stats) for s in train_raw]
    seq_len = min(len(s) for s in train_raw)
    model = build_model(cfg, dataset_grids(train_raw[0]))
    opt = AdamW(model.parameters(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)

    result = FitResult(model, model.state_dict(), stats, -1, train_sequences=len(train_raw))
    result.step_rows.append(LossBreakdown.CSV_HEADER)
    result.epoch_rows.append(EPOCH_CSV_HEADER)
    best = -math.inf
    step = 0
    steps_per_epoch = len(epoch_plan(len(train_raw), seq_len, cfg, 0))
    for epoch in range(cfg.epochs):
        plan = epoch_plan(len(train_raw), seq_len, cfg, epoch)
        totals = []
        lr = 0.0
        for bi, (delta, picks, origins) in enumerate(plan):
            lr = lr_at((step + 0.5) / steps_per_epoch, cfg)
            batch = make_batch(train_norm, train_raw, picks, origins, delta, stats)
            rng = np.random.default_rng([cfg.seed, epoch, bi, 1])
            bd = train_step(model, batch, cfg, stats, opt, lr, rng)
            result.step_rows.append(bd.csv_row(step))
            totals.append(bd.total)
            step += 1
        table = evaluate(model, val_raw, stats, cfg.horizon, (stats.tau_raw,), cfg.val_batch)
        csi = table.mean("CSI", stats.tau_raw)
        pod = table.mean("POD", stats.tau_raw)
        row = f"{epoch},{lr!r},{float(np.mean(totals))!r},{csi!r},{pod!r}"
        result.epoch_rows.append(row)
        if log:
            log(row)
        score = _nan_to(csi, -1.0)
        if score >= best:  # ties go to the later epoch
            best = score
            result.best_epoch = epoch
            result.best_state = model.state_dict()
    result.steps = step
    model.load_state_dict(result.best_state)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.lptf", model, stats, cfg)
        (out / "epochs.csv").write_text("\n".join(result.epoch_rows) + "\n")
        (out / "steps.csv").write_text("\n".join(result.step_rows) + "\n")
    return result


def worker_count(default: int | None = None) -> int:
    """Worker cap from STORMLATENT_THREADS (falls back to the CPU count)."""
    n = default or os.cpu_count() or 1
    env = os.environ.get("STORMLATENT_THREADS")
    if env:
        try:
            n = min(n, max(1, int(env)))
        except ValueError as exc:
            raise ValueError(f"STORMLATENT_THREADS must be an integer, got {env!r}") from exc
    return n
