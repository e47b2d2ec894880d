"""Synthetic multi-source weather sequences, normalization and dataset I/O.

Precipitation cells are Gaussian blobs carried by the reanalysis wind,
spawned where the humidity analog is high and decaying exponentially.
Radar levels are noisy monotone transforms of the rain field and the
satellite stack shows smoothed cloud masks one to two steps ahead of the
rain, so every modality carries some forecast signal.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence as Seq

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .tensorio import load_archive, save_archive

REANALYSIS_NAMES = (
    "u_wind",
    "v_wind",
    "humidity",
    "temperature",
    "geopotential",
    "vertical_velocity",
    "humidity_upper",
    "instability",
)
SATELLITE_NAMES = ("cloud_mask", "brightness", "water_vapour")
RAIN_BUCKET_EDGES = (0.2, 1.0, 2.0, 4.0, 8.0)
# hourly rain-rate distribution of the reference continental archive, percent
REFERENCE_RAIN_PERCENT = (93.31, 3.45, 1.42, 0.97, 0.52, 0.33)


class DataError(ValueError):
    pass


def channel_names(radar_channels: int, satellite: bool = True) -> dict[str, tuple[str, ...]]:
    """Human-readable names for every input channel, keyed by modality."""
    radar = ("rain_rate",) + tuple(f"reflectivity_{i}" for i in range(1, radar_channels))
    out = {"qpe_radar": radar, "reanalysis": REANALYSIS_NAMES}
    if satellite:
        out["satellite"] = SATELLITE_NAMES
    return out


@dataclass(frozen=True)
class GeneratorConfig:
    height: int = 64
    width: int = 64
    coarse_height: int = 16
    coarse_width: int = 16
    steps: int = 29
    radar_levels: int = 3
    satellite: bool = True
    spinup: int = 12
    birth_rate: float = 0.015
    humidity_threshold: float = 0.6
    dry_fraction: float = 0.3
    amplitude_median: float = 1.2
    amplitude_spread: float = 1.6
    sigma_min: float = 2.0
    sigma_max: float = 4.5
    decay: float = 0.9
    wind_speed: float = 1.0
    diurnal_amplitude: float = 0.5
    noise: float = 0.02
    fixed_wind: tuple[float, float] | None = None
    initial_blobs: tuple[tuple[float, float, float, float], ...] = ()

    def validate(self) -> None:
        for name in ("height", "width"):
            v = getattr(self, name)
            if v <= 0 or v % 4:
                raise DataError(f"{name}={v} must be a positive multiple of 4")
        if self.coarse_height <= 0 or self.coarse_width <= 0:
            raise DataError("coarse grid must be non-empty")
        if self.steps < 1:
            raise DataError("steps must be positive")

    @property
    def channel_counts(self) -> tuple[int, int, int]:
        return 1 + self.radar_levels, len(REANALYSIS_NAMES), 3 if self.satellite else 0


@dataclass
class MultiSourceSample:
    """One time step of gridded inputs plus its target intensity grid."""

    time_index: int
    qpe_radar: np.ndarray
    reanalysis: np.ndarray
    satellite: np.ndarray | None
    target: np.ndarray


@dataclass
class Sequence:
    """Time-ordered stacks; arrays carry a leading time axis."""

    qpe_radar: np.ndarray  # (T, 1 + levels, H, W); channel 0 = rain rate mm/h
    reanalysis: np.ndarray  # (T, 8, Hc, Wc)
    satellite: np.ndarray | None  # (T, 3, H, W)
    time_index: np.ndarray  # (T,)
    metadata: dict = field(default_factory=dict)

    @property
    def target(self) -> np.ndarray:
        return self.qpe_radar[:, :1]

    def __len__(self) -> int:
        return self.qpe_radar.shape[0]

    def sample(self, t: int) -> MultiSourceSample:
        return MultiSourceSample(
            int(self.time_index[t]),
            self.qpe_radar[t],
            self.reanalysis[t],
            None if self.satellite is None else self.satellite[t],
            self.qpe_radar[t, :1],
        )

    @property
    def samples(self) -> list[MultiSourceSample]:
        return [self.sample(t) for t in range(len(self))]


# ---------------------------------------------------------------------------
# generator


def _render(blobs: np.ndarray, h: int, w: int) -> np.ndarray:
    field_ = np.zeros((h, w))
    if len(blobs) == 0:
        return field_
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    for x, y, amp, sig in blobs:
        field_ += amp * np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2.0 * sig * sig))
    return field_


def _bump_field(bumps: np.ndarray, hc: int, wc: int) -> np.ndarray:
    ys = np.arange(hc)[:, None]
    xs = np.arange(wc)[None, :]
    out = np.zeros((hc, wc))
    for x, y, amp, sig in bumps:
        out += amp * np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2.0 * sig * sig))
    return out


def _new_bump(rng, hc, wc, u, v, entering: bool) -> list[float]:
    sig = rng.uniform(1.5, 3.0) * hc / 16
    amp = rng.uniform(0.4, 0.9)
    if not entering:
        return [rng.uniform(0, wc), rng.uniform(0, hc), amp, sig]
    # enter from the upstream edge
    if abs(u) >= abs(v):
        x = -2 * sig if u > 0 else wc + 2 * sig
        y = rng.uniform(0, hc)
    else:
        y = -2 * sig if v > 0 else hc + 2 * sig
        x = rng.uniform(0, wc)
    return [x, y, amp, sig]


def generate_sequence(seed: int, cfg: GeneratorConfig = GeneratorConfig()) -> Sequence:
    """Generate one reproducible multi-source sequence."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    h, w, hc, wc = cfg.height, cfg.width, cfg.coarse_height, cfg.coarse_width
    sy, sx = h / hc, w / wc  # fine pixels per coarse cell

    # large-scale wind in fine pixels per step, weak meridional shear
    if cfg.fixed_wind is not None:
        u_field = np.full((hc, wc), float(cfg.fixed_wind[0]))
        v_field = np.full((hc, wc), float(cfg.fixed_wind[1]))
    else:
        angle = rng.uniform(-0.6, 0.6)
        speed = cfg.wind_speed * rng.uniform(0.6, 1.4)
        yy = np.arange(hc)[:, None] / hc
        shear = 0.25 * speed * np.sin(2 * np.pi * yy + rng.uniform(0, 2 * np.pi))
        u_field = np.broadcast_to(speed * math.cos(angle) + shear, (hc, wc)).copy()
        v_field = np.full((hc, wc), speed * math.sin(angle))
    u_mean, v_mean = float(u_field.mean()), float(v_field.mean())

    dry = rng.random() < cfg.dry_fraction
    offset = rng.uniform(-0.45, -0.3) if dry else rng.uniform(0.0, 0.2)
    bumps = np.array([_new_bump(rng, hc, wc, u_mean, v_mean, False) for _ in range(4)])
    start_time = int(rng.integers(0, 24 * 30))

    if cfg.initial_blobs:
        blobs = np.array(cfg.initial_blobs, dtype=float).reshape(-1, 4)
    else:
        blobs = np.zeros((0, 4))
    spin = 0 if cfg.initial_blobs else cfg.spinup
    lead = 2 if cfg.satellite else 0
    total = spin + cfg.steps + lead

    rain, humid, wind_u, wind_v, births_map = [], [], [], [], []
    for step in range(total):
        t_abs = start_time + step - spin
        q = np.clip(offset + _bump_field(bumps, hc, wc), 0.0, 1.2)
        # birth probability per coarse cell
        diurnal = 1.0 + cfg.diurnal_amplitude * math.sin(2 * math.pi * t_abs / 24.0)
        p_birth = cfg.birth_rate * diurnal / (1.0 + np.exp(-(q - cfg.humidity_threshold) / 0.05))
        if not cfg.initial_blobs:
            hits = np.argwhere(rng.random((hc, wc)) < p_birth)
            if len(hits):
                k = len(hits)
                amp = cfg.amplitude_median * np.exp(cfg.amplitude_spread * rng.standard_normal(k))
                sig = rng.uniform(cfg.sigma_min, cfg.sigma_max, k)
                xs = (hits[:, 1] + rng.random(k)) * sx
                ys = (hits[:, 0] + rng.random(k)) * sy
                blobs = np.vstack([blobs, np.stack([xs, ys, amp, sig], axis=1)])
        rain.append(_render(blobs, h, w))
        humid.append(q)
        wind_u.append(u_field)
        wind_v.append(v_field)
        births_map.append(p_birth)

        # advance cells with the wind sampled at their position
        if len(blobs):
            coords = np.stack([blobs[:, 1] / sy - 0.5, blobs[:, 0] / sx - 0.5])
            bu = map_coordinates(u_field, coords, order=1, mode="nearest")
            bv = map_coordinates(v_field, coords, order=1, mode="nearest")
            blobs[:, 0] += bu
            blobs[:, 1] += bv
            blobs[:, 2] *= cfg.decay
            alive = (
                (blobs[:, 0] >= 0) & (blobs[:, 0] < w) & (blobs[:, 1] >= 0) & (blobs[:, 1] < h) & (blobs[:, 2] > 0.05)
            )
            blobs = blobs[alive]
        # humidity bumps drift with the mean wind (coarse units) and wander in strength
        bumps[:, 0] += u_mean / sx
        bumps[:, 1] += v_mean / sy
        bumps[:, 2] = np.clip(bumps[:, 2] + 0.02 * rng.standard_normal(len(bumps)), 0.2, 1.0)
        for i, (bx, by, _, bs) in enumerate(bumps):
            if bx < -3 * bs or bx > wc + 3 * bs or by < -3 * bs or by > hc + 3 * bs:
                bumps[i] = _new_bump(rng, hc, wc, u_mean, v_mean, True)

    rain_a = np.array(rain)
    humid_a = np.array(humid)
    births_a = np.array(births_map)
    keep = slice(spin, spin + cfg.steps)

    # radar levels: reflectivity-like transform with height attenuation
    radar = []
    for lvl in range(cfg.radar_levels):
        r = rain_a[keep] * (0.85**lvl)
        if lvl:
            r = gaussian_filter(r, sigma=(0, lvl, lvl))
        dbz = 10.0 * np.log10(200.0 * r**1.6 + 1.0)
        radar.append(dbz + rng.normal(0.0, 1.0, dbz.shape))
    qpe_radar = np.concatenate([rain_a[keep][:, None]] + [d[:, None] for d in radar], axis=1)

    n = cfg.steps
    temperature = 290.0 - 6.0 * humid_a[keep] + rng.normal(0, 0.3, (n, hc, wc))
    geo = 5500.0 + 40.0 * (np.arange(hc)[None, :, None] / hc) - 30.0 * humid_a[keep] + rng.normal(0, 1.0, (n, hc, wc))
    vert = births_a[keep] / max(cfg.birth_rate, 1e-9) + rng.normal(0, 0.05, (n, hc, wc))
    q_future = humid_a[spin + 2 : spin + 2 + n] if lead else humid_a[keep]
    if q_future.shape[0] < n:
        q_future = np.concatenate([q_future, np.repeat(q_future[-1:], n - q_future.shape[0], 0)])
    instab = humid_a[keep] * (temperature - 280.0) / 10.0
    reanalysis = np.stack(
        [
            np.array(wind_u[keep]) + rng.normal(0, 0.02, (n, hc, wc)),
            np.array(wind_v[keep]) + rng.normal(0, 0.02, (n, hc, wc)),
            humid_a[keep] + rng.normal(0, 0.02, (n, hc, wc)),
            temperature,
            geo,
            vert,
            q_future + rng.normal(0, 0.02, (n, hc, wc)),
            instab,
        ],
        axis=1,
    )

    satellite = None
    if cfg.satellite:
        ahead2 = rain_a[spin + 2 : spin + 2 + n]
        ahead1 = rain_a[spin + 1 : spin + 1 + n]
        cloud = gaussian_filter((ahead2 > 0.1).astype(float), sigma=(0, 2.5, 2.5))
        bright = gaussian_filter(np.log1p(ahead1), sigma=(0, 1.5, 1.5))
        vapour = np.repeat(np.repeat(humid_a[keep], int(sy), axis=1), int(sx), axis=2)
        satellite = np.stack([cloud, bright, vapour], axis=1)
        satellite = satellite + rng.normal(0.0, cfg.noise, satellite.shape)

    meta = {
        "seed": int(seed),
        "step_count": n,
        "height": h,
        "width": w,
        "coarse_height": hc,
        "coarse_width": wc,
        "start_time": start_time,
        "satellite": int(cfg.satellite),
    }
    return Sequence(
        qpe_radar=qpe_radar,
        reanalysis=reanalysis,
        satellite=satellite,
        time_index=np.arange(start_time, start_time + n),
        metadata=meta,
    )


def sequence_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def split_counts(n: int) -> tuple[int, int, int]:
    """Sequential 80/10/10 split of one month, never leaving val/test empty for n >= 3."""
    if n < 3:
        return n, 0, 0
    n_val = max(1, int(math.floor(0.1 * n + 0.5)))
    n_test = max(1, int(math.floor(0.1 * n + 0.5)))
    return n - n_val - n_test, n_val, n_test


def generate_dataset(
    seed: int,
    n_sequences: int,
    cfg: GeneratorConfig = GeneratorConfig(),
    sequences_per_month: int = 10,
    workers: int = 1,
) -> dict[str, list[Sequence]]:
    """Generate a dataset and split it month by month into train/val/test."""
    seeds = [sequence_seed(seed, i) for i in range(n_sequences)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            seqs = list(pool.map(lambda s: generate_sequence(s, cfg), seeds))
    else:
        seqs = [generate_sequence(s, cfg) for s in seeds]
    splits: dict[str, list[Sequence]] = {"train": [], "val": [], "test": []}
    for m0 in range(0, n_sequences, sequences_per_month):
        month = seqs[m0 : m0 + sequences_per_month]
        for i, s in enumerate(month):
            s.metadata["month"] = m0 // sequences_per_month
            s.metadata["index"] = m0 + i
        n_tr, n_va, _ = split_counts(len(month))
        splits["train"] += month[:n_tr]
        splits["val"] += month[n_tr : n_tr + n_va]
        splits["test"] += month[n_tr + n_va :]
    return splits


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class NormStats:
    radar_mean: np.ndarray
    radar_std: np.ndarray
    reanalysis_mean: np.ndarray
    reanalysis_std: np.ndarray
    satellite_mean: np.ndarray | None
    satellite_std: np.ndarray | None
    intensity_cap: float = 64.0
    tau_raw: float = 0.2

    def __post_init__(self):
        if not self.intensity_cap > self.tau_raw > 0:
            raise DataError("need intensity_cap > tau_raw > 0")
        for name in ("radar_std", "reanalysis_std", "satellite_std"):
            arr = getattr(self, name)
            if arr is not None and np.any(arr <= 0):
                raise DataError(f"{name} must be positive")

    @property
    def tau_norm(self) -> float:
        return self.tau_raw / self.intensity_cap

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {
            "radar_mean": self.radar_mean,
            "radar_std": self.radar_std,
            "reanalysis_mean": self.reanalysis_mean,
            "reanalysis_std": self.reanalysis_std,
            "scalars": np.array([self.intensity_cap, self.tau_raw]),
        }
        if self.satellite_mean is not None:
            out["satellite_mean"] = self.satellite_mean
            out["satellite_std"] = self.satellite_std
        return out

    @classmethod
    def from_arrays(cls, d: dict[str, np.ndarray]) -> NormStats:
        return cls(
            d["radar_mean"],
            d["radar_std"],
            d["reanalysis_mean"],
            d["reanalysis_std"],
            d.get("satellite_mean"),
            d.get("satellite_std"),
            float(d["scalars"][0]),
            float(d["scalars"][1]),
        )


def _channel_stats(stack: np.ndarray, label: str) -> tuple[np.ndarray, np.ndarray]:
    # stack: (..., C, H, W) pooled over everything except channel
    c = stack.shape[-3]
    moved = np.moveaxis(stack, -3, 0).reshape(c, -1)
    mean = moved.mean(axis=1)
    std = moved.std(axis=1)
    for i in range(c):
        if not std[i] > 0:
            raise DataError(f"zero variance in channel {label}[{i}]")
    return mean, std


def compute_stats(train: Seq[Sequence], intensity_cap: float = 64.0, tau_raw: float = 0.2) -> NormStats:
    """Per-channel statistics over all training pixels; the rain channel uses a fixed cap."""
    if not train:
        raise DataError("cannot compute statistics on an empty training split")
    radar = np.concatenate([s.qpe_radar[:, 1:] for s in train])
    rea = np.concatenate([s.reanalysis for s in train])
    r_mean, r_std = _channel_stats(radar, "radar") if radar.shape[1] else (np.zeros(0), np.ones(0))
    a_mean, a_std = _channel_stats(rea, "reanalysis")
    s_mean = s_std = None
    if train[0].satellite is not None:
        s_mean, s_std = _channel_stats(np.concatenate([s.satellite for s in train]), "satellite")
    return NormStats(r_mean, r_std, a_mean, a_std, s_mean, s_std, intensity_cap, tau_raw)


def _bc(v: np.ndarray) -> np.ndarray:
    return v[:, None, None]


def normalize_intensity(y, stats: NormStats) -> np.ndarray:
    return np.clip(np.asarray(y) / stats.intensity_cap, 0.0, 1.0)


def normalize_arrays(qpe_radar, reanalysis, satellite, stats: NormStats):
    """Normalize stacks with channel axis -3 (any leading axes)."""
    q = np.empty_like(qpe_radar, dtype=np.float64)
    q[..., :1, :, :] = normalize_intensity(qpe_radar[..., :1, :, :], stats)
    q[..., 1:, :, :] = (qpe_radar[..., 1:, :, :] - _bc(stats.radar_mean)) / _bc(stats.radar_std)
    r = (reanalysis - _bc(stats.reanalysis_mean)) / _bc(stats.reanalysis_std)
    s = None
    if satellite is not None:
        s = (satellite - _bc(stats.satellite_mean)) / _bc(stats.satellite_std)
    return q, r, s


def denormalize_arrays(qpe_radar, reanalysis, satellite, stats: NormStats):
    q = np.empty_like(qpe_radar, dtype=np.float64)
    q[..., :1, :, :] = qpe_radar[..., :1, :, :] * stats.intensity_cap
    q[..., 1:, :, :] = qpe_radar[..., 1:, :, :] * _bc(stats.radar_std) + _bc(stats.radar_mean)
    r = reanalysis * _bc(stats.reanalysis_std) + _bc(stats.reanalysis_mean)
    s = None
    if satellite is not None:
        s = satellite * _bc(stats.satellite_std) + _bc(stats.satellite_mean)
    return q, r, s


def normalize(sample: MultiSourceSample, stats: NormStats) -> MultiSourceSample:
    q, r, s = normalize_arrays(sample.qpe_radar, sample.reanalysis, sample.satellite, stats)
    return MultiSourceSample(sample.time_index, q, r, s, normalize_intensity(sample.target, stats))


def denormalize(sample: MultiSourceSample, stats: NormStats) -> MultiSourceSample:
    q, r, s = denormalize_arrays(sample.qpe_radar, sample.reanalysis, sample.satellite, stats)
    return MultiSourceSample(sample.time_index, q, r, s, np.asarray(sample.target) * stats.intensity_cap)


def normalize_sequence(seq: Sequence, stats: NormStats) -> Sequence:
    q, r, s = normalize_arrays(seq.qpe_radar, seq.reanalysis, seq.satellite, stats)
    return Sequence(q, r, s, seq.time_index.copy(), dict(seq.metadata))


def add_noise(sample: MultiSourceSample, sigma: float, seed) -> MultiSourceSample:
    """Gaussian perturbation of every normalized input channel; the target is untouched."""
    if sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    if sigma == 0:
        return dataclasses.replace(sample)
    rng = np.random.default_rng(seed)
    q = sample.qpe_radar + rng.normal(0.0, sigma, np.shape(sample.qpe_radar))
    r = sample.reanalysis + rng.normal(0.0, sigma, np.shape(sample.reanalysis))
    s = None
    if sample.satellite is not None:
        s = sample.satellite + rng.normal(0.0, sigma, np.shape(sample.satellite))
    return MultiSourceSample(sample.time_index, q, r, s, sample.target)


# ---------------------------------------------------------------------------
# filtering and distribution summaries


def is_wet(seq: Sequence, event_threshold: float) -> bool:
    return bool(np.any(seq.target >= event_threshold))


def importance_filter(
    sequences: Seq[Sequence], keep_fraction: float, event_threshold: float = 0.2, seed: int = 0
) -> list[Sequence]:
    """Keep every wet sequence and a seeded ``keep_fraction`` of the dry ones."""
    if not 0.0 <= keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in [0, 1]")
    dry = [i for i, s in enumerate(sequences) if not is_wet(s, event_threshold)]
    n_keep = int(math.floor(keep_fraction * len(dry) + 0.5))
    rng = np.random.default_rng(seed)
    kept_dry = set(rng.permutation(dry)[:n_keep].tolist()) if dry else set()
    dry_set = set(dry)
    return [s for i, s in enumerate(sequences) if i not in dry_set or i in kept_dry]


def bucket_distribution(data, edges: Seq[float] = RAIN_BUCKET_EDGES) -> np.ndarray:
    """Fraction of target pixels per bucket (<=e0], (e0,e1], ..., (>e_last)."""
    edges = np.asarray(edges, dtype=float)
    if np.any(np.diff(edges) <= 0):
        raise ValueError("bucket edges must be ascending")
    if isinstance(data, np.ndarray):
        values = data.reshape(-1)
    else:
        values = np.concatenate([s.target.reshape(-1) for s in data])
    idx = np.digitize(values, edges, right=True)
    counts = np.bincount(idx, minlength=len(edges) + 1)
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# on-disk layout


def _write_meta(path: Path, meta: dict) -> None:
    path.write_text("".join(f"{k}={meta[k]}\n" for k in sorted(meta)))


def read_meta(path: Path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        out[k.strip()] = int(v) if v.strip().lstrip("-").isdigit() else v.strip()
    return out


def save_sequence(seq: Sequence, stem: Path) -> list[Path]:
    tensors = {"qpe_radar": seq.qpe_radar, "reanalysis": seq.reanalysis}
    if seq.satellite is not None:
        tensors["satellite"] = seq.satellite
    tensors["target"] = seq.target
    tensors["time_index"] = seq.time_index.astype(np.float64)
    arc, meta = stem.with_suffix(".lptf"), stem.with_suffix(".meta")
    save_archive(arc, tensors)
    _write_meta(meta, seq.metadata)
    return [arc, meta]


def load_sequence(path: Path) -> Sequence:
    path = Path(path)
    t = load_archive(path.with_suffix(".lptf"))
    meta = read_meta(path.with_suffix(".meta")) if path.with_suffix(".meta").exists() else {}
    try:
        return Sequence(
            t["qpe_radar"],
            t["reanalysis"],
            t.get("satellite"),
            t["time_index"].astype(np.int64),
            meta,
        )
    except KeyError as exc:
        raise DataError(f"{path}: missing tensor {exc}") from None


def write_dataset(root, splits: dict[str, list[Sequence]]) -> list[Path]:
    root = Path(root)
    written = []
    for split, seqs in splits.items():
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        for s in seqs:
            written += save_sequence(s, d / f"seq_{int(s.metadata.get('index', 0)):05d}")
    return written


def read_split(root, split: str) -> list[Sequence]:
    d = Path(root) / split
    if not d.is_dir():
        raise DataError(f"missing split directory {d}")
    return [load_sequence(p) for p in sorted(d.glob("*.lptf"))]
