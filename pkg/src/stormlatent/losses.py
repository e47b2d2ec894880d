"""Pixel, classification, latent and reconstruction losses."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOSS_VARIANTS = ("mae", "weighted_mae", "weighted_mae_plain_ce", "wmce")
# reanalysis reconstruction is down-weighted; every other term has weight 1
RECON_WEIGHTS = {"qpe_radar": 1.0, "reanalysis": 0.1, "satellite": 1.0}


@dataclass
class LossBreakdown:
    wmce_mae: float = 0.0
    wmce_ce_precip: float = 0.0
    wmce_ce_dry: float = 0.0
    latent: float = 0.0
    recon_fine: float = 0.0
    recon_reanalysis: float = 0.0
    recon_satellite: float = 0.0
    total: float = 0.0

    CSV_HEADER = "step,wmce_mae,wmce_ce_precip,wmce_ce_dry,latent,recon_fine,recon_reanalysis,recon_satellite,total"

    def csv_row(self, step: int) -> str:
        vals = [getattr(self, f.name) for f in fields(self)]
        return f"{step}," + ",".join(repr(float(v)) for v in vals)

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def weighted_total(self) -> float:
        return (
            self.wmce_mae
            + self.wmce_ce_precip
            + self.wmce_ce_dry
            + self.latent
            + RECON_WEIGHTS["qpe_radar"] * self.recon_fine
            + RECON_WEIGHTS["reanalysis"] * self.recon_reanalysis
            + RECON_WEIGHTS["satellite"] * self.recon_satellite
        )


def _check(y, yhat):
    if tuple(np.shape(y)) != tuple(yhat.shape):
        raise ValueError(f"shape mismatch: truth {np.shape(y)} vs prediction {yhat.shape}")


def event_mask(y, tau: float) -> np.ndarray:
    """True where the truth reaches the threshold (ties count as events)."""
    return np.asarray(y) >= tau


def mae_loss(y, yhat) -> Tensor:
    yhat = ad.as_tensor(yhat)
    _check(y, yhat)
    return ad.mean(ad.tabs(yhat - np.asarray(y, dtype=float)))


def mse_loss(y, yhat) -> Tensor:
    yhat = ad.as_tensor(yhat)
    _check(y, yhat)
    d = yhat - np.asarray(y, dtype=float)
    return ad.mean(d * d)


def _ce_terms(y, yhat: Tensor, tau: float, weight=None):
    """(precip term, dry term), each already divided by n."""
    n = yhat.size
    mask = event_mask(y, tau)
    logit = yhat - tau
    pos = ad.log_sigmoid(logit)
    neg = ad.log_sigmoid(-logit)  # log(1 - sigmoid)
    wpos = mask.astype(float) if weight is None else mask * weight
    precip = ad.tsum(pos * wpos) * (-1.0 / n)
    dry = ad.tsum(neg * (~mask).astype(float)) * (-1.0 / n)
    return precip, dry


def ce_loss(y, yhat, tau: float) -> Tensor:
    """Binary cross-entropy of the event label against sigmoid(yhat - tau)."""
    yhat = ad.as_tensor(yhat)
    _check(y, yhat)
    precip, dry = _ce_terms(y, yhat, tau)
    return precip + dry


def intensity_weight(y_raw) -> np.ndarray:
    """ln(e + y) on unnormalized intensities; equals 1 at zero."""
    y_raw = np.asarray(y_raw, dtype=float)
    if np.any(y_raw < 0):
        raise ValueError("raw intensities must be non-negative")
    return np.log(math.e + y_raw)


def pixel_loss(variant: str, y_norm, yhat, y_raw, tau_norm: float) -> tuple[Tensor, dict[str, Tensor]]:
    """One member of the loss ladder; returns (total, named terms)."""
    yhat = ad.as_tensor(yhat)
    _check(y_norm, yhat)
    y_norm = np.asarray(y_norm, dtype=float)
    n = yhat.size
    zero = Tensor(0.0)
    if variant == "mae":
        terms = {"mae": mae_loss(y_norm, yhat), "ce_precip": zero, "ce_dry": zero}
    elif variant == "weighted_mae":
        w = intensity_weight(y_raw)
        terms = {"mae": ad.tsum(ad.tabs(yhat - y_norm) * w) * (1.0 / n), "ce_precip": zero, "ce_dry": zero}
    elif variant in ("weighted_mae_plain_ce", "wmce"):
        w = intensity_weight(y_raw)
        mask = event_mask(y_norm, tau_norm)
        mae_term = ad.tsum(ad.tabs(yhat - y_norm) * (w * mask)) * (1.0 / n)
        precip, dry = _ce_terms(y_norm, yhat, tau_norm, w if variant == "wmce" else None)
        terms = {"mae": mae_term, "ce_precip": precip, "ce_dry": dry}
    else:
        raise ValueError(f"unknown loss variant {variant!r}; expected one of {LOSS_VARIANTS}")
    return terms["mae"] + terms["ce_precip"] + terms["ce_dry"], terms


def wmce_loss(y_norm, yhat, y_raw, tau_norm: float) -> tuple[Tensor, LossBreakdown]:
    """Weighted MAE on events + weighted event CE + unweighted dry CE."""
    total, terms = pixel_loss("wmce", y_norm, yhat, y_raw, tau_norm)
    bd = LossBreakdown(
        wmce_mae=terms["mae"].item(),
        wmce_ce_precip=terms["ce_precip"].item(),
        wmce_ce_dry=terms["ce_dry"].item(),
    )
    bd.total = bd.weighted_total()
    return total, bd


def latent_loss(h_true: list, h_pred: list) -> Tensor:
    """Mean absolute latent error over all predicted steps."""
    if len(h_true) != len(h_pred):
        raise ValueError(f"{len(h_true)} true latents vs {len(h_pred)} predictions")
    if not h_true:
        raise ValueError("no latents to compare")
    per = [ad.mean(ad.tabs(ad.as_tensor(p) - t)) for t, p in zip(h_true, h_pred)]
    out = per[0]
    for term in per[1:]:
        out = out + term
    return out * (1.0 / len(per))


def recon_loss(x_true: dict, x_recon: dict) -> dict[str, Tensor]:
    """Per-modality mean absolute reconstruction error."""
    out = {}
    for name, rec in x_recon.items():
        if name not in x_true or x_true[name] is None:
            continue
        truth = x_true[name]
        if tuple(truth.shape) != tuple(rec.shape):
            raise ValueError(f"{name}: shape mismatch {truth.shape} vs {rec.shape}")
        out[name] = ad.mean(ad.tabs(ad.as_tensor(rec) - truth))
    return out


def overall_loss(pixel: dict[str, Tensor], latent: Tensor, recon: dict[str, Tensor]) -> tuple[Tensor, LossBreakdown]:
    """Sum of pixel terms, latent term and weighted reconstruction terms."""
    total = pixel["mae"] + pixel["ce_precip"] + pixel["ce_dry"] + latent
    for name, term in recon.items():
        total = total + term * RECON_WEIGHTS[name]
    bd = LossBreakdown(
        wmce_mae=pixel["mae"].item(),
        wmce_ce_precip=pixel["ce_precip"].item(),
        wmce_ce_dry=pixel["ce_dry"].item(),
        latent=ad.as_tensor(latent).item(),
        recon_fine=recon["qpe_radar"].item() if "qpe_radar" in recon else 0.0,
        recon_reanalysis=recon["reanalysis"].item() if "reanalysis" in recon else 0.0,
        recon_satellite=recon["satellite"].item() if "satellite" in recon else 0.0,
        total=total.item(),
    )
    return total, bd
