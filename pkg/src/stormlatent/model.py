"""Encoder, latent predictors, projector and reconstructor.

Shapes follow (N, C, H, W).  The fine grid is H x W, the latent grid is
H/4 x W/4, and the reanalysis stack lives on its own coarse grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (
    MLP,
    Conv2d,
    Conv3dCollapse,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    MultiScaleBlock,
    from_patches,
    to_patches,
)

DELTAS = (1, 2, 4)
MODALITIES = ("qpe_radar", "reanalysis", "satellite")


@dataclass(frozen=True)
class ModelConfig:
    height: int = 64
    width: int = 64
    coarse_height: int = 16
    coarse_width: int = 16
    qpe_radar_channels: int = 4
    reanalysis_channels: int = 8
    satellite_channels: int = 3
    features: int = 4
    latent_channels: int = 16
    time_channels: int = 4
    const_channels: int = 4
    patch: int = 4
    vit_dim: int = 64
    vit_depth: int = 2
    vit_heads: int = 2
    mlp_ratio: int = 2
    projector_heads: int = 2
    recon_hidden: int = 16
    dropout: float = 0.15
    seed: int = 0

    @property
    def latent_hw(self) -> tuple[int, int]:
        return self.height // 4, self.width // 4

    def modality_channels(self) -> dict[str, int]:
        out = {"qpe_radar": self.qpe_radar_channels, "reanalysis": self.reanalysis_channels}
        if self.satellite_channels:
            out["satellite"] = self.satellite_channels
        return out

    def modality_grid(self, name: str) -> tuple[int, int]:
        if name == "reanalysis":
            return self.coarse_height, self.coarse_width
        return self.height, self.width


@dataclass
class LatentState:
    """Batch of latent grids (N, C, h, w) with one time index per batch row."""

    tensor: Tensor
    time_index: np.ndarray

    def __post_init__(self):
        self.time_index = np.atleast_1d(np.asarray(self.time_index, dtype=np.int64))


def time_embedding(time_index, channels: int, h: int, w: int) -> np.ndarray:
    """Sinusoids of the absolute step index (daily, weekly, ... periods), broadcast spatially."""
    t = np.atleast_1d(np.asarray(time_index, dtype=np.float64))
    feats = []
    for k in range(channels):
        period = 24.0 * 7.0 ** (k // 2)
        phase = 2.0 * math.pi * t / period
        feats.append(np.sin(phase) if k % 2 == 0 else np.cos(phase))
    emb = np.stack(feats, axis=1)[:, :, None, None]
    return np.broadcast_to(emb, (t.size, channels, h, w)).copy()


# ---------------------------------------------------------------------------
# encoder


class ModalityBranch(Module):
    """Four multi-scale blocks; fine grids are downsampled twice by stride-2 convs."""

    def __init__(self, cin: int, features: int, rng, downsample: bool):
        super().__init__()
        self.downsample = downsample
        self.stem = Conv2d(cin, features, 3, rng)
        self.blocks = [MultiScaleBlock(features, rng) for _ in range(4)]
        self.down = [Conv2d(features, features, 3, rng, stride=2) for _ in range(2)] if downsample else []

    def forward(self, x, out_hw: tuple[int, int]):
        x = self.stem(x)
        for i, block in enumerate(self.blocks):
            x = block(x)
            if self.downsample and i in (1, 3):
                x = self.down[i // 2](x)
        return ad.resize_bilinear(x, out_hw)


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        chans = cfg.modality_channels()
        self.branches = {
            name: ModalityBranch(c, cfg.features, rng, downsample=name != "reanalysis") for name, c in chans.items()
        }
        self.fuse = Conv2d(cfg.features * len(chans), cfg.latent_channels, 3, rng)

    def forward(self, qpe_radar, reanalysis, satellite=None) -> Tensor:
        if qpe_radar is None:
            raise ValueError("the qpe_radar stack is mandatory")
        inputs = {"qpe_radar": qpe_radar, "reanalysis": reanalysis, "satellite": satellite}
        hw = self.cfg.latent_hw
        feats = []
        for name, branch in self.branches.items():
            x = inputs[name]
            if x is None:
                n = ad.as_tensor(qpe_radar).shape[0]
                feats.append(Tensor(np.zeros((n, self.cfg.features) + hw)))
                continue
            x = ad.as_tensor(x)
            if x.shape[-2:] != self.cfg.modality_grid(name):
                raise ValueError(f"{name} grid {x.shape[-2:]} != configured {self.cfg.modality_grid(name)}")
            feats.append(branch(x, hw))
        return self.fuse(ad.concat(feats, axis=1))


# ---------------------------------------------------------------------------
# vision transformer


class TransformerBlock(Module):
    """Z' = MHA(LN(Z)) + Z;  Z'' = LN(Z');  out = MLP(Z'') + Z''."""

    def __init__(self, dim: int, heads: int, hidden: int, rng, dropout: float):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng, dropout)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, hidden, dim, rng, dropout)

    def forward(self, z, rng=None):
        z1 = self.attn(self.norm1(z), rng) + z
        z2 = self.norm2(z1)
        return self.mlp(z2, rng) + z2


class ViT(Module):
    def __init__(self, cin: int, cout: int, h: int, w: int, cfg: ModelConfig, rng, depth: int | None = None):
        super().__init__()
        p = cfg.patch
        if h % p or w % p:
            raise ValueError(f"latent grid {h}x{w} not divisible by patch {p}")
        self.p, self.cin, self.cout, self.h, self.w = p, cin, cout, h, w
        d = cfg.vit_dim
        tokens = (h // p) * (w // p)
        self.embed = Linear(p * p * cin, d, rng)
        self.pos = ad.parameter(0.02 * rng.standard_normal((1, tokens, d)))
        self.blocks = [
            TransformerBlock(d, cfg.vit_heads, cfg.mlp_ratio * d, rng, cfg.dropout)
            for _ in range(cfg.vit_depth if depth is None else depth)
        ]
        self.norm = LayerNorm(d)
        self.head = MLP(d, cfg.mlp_ratio * d, p * p * cout, rng)

    def forward(self, x, rng=None):
        x = ad.as_tensor(x)
        if x.shape[-2] % self.p or x.shape[-1] % self.p:
            raise ValueError(f"spatial extent {x.shape[-2:]} not divisible by patch {self.p}")
        z = self.embed(to_patches(x, self.p)) + self.pos
        for block in self.blocks:
            z = block(z, rng)
        z = self.head(self.norm(z))
        return from_patches(z, self.p, self.cout, self.h, self.w)


# ---------------------------------------------------------------------------
# latent predictor


class LatentPredictor(Module):
    """Two-step latent predictor for one interval.

    Per step: concat(latent, time embedding, constant embedding) -> 4 shared
    multi-scale blocks; a step-spanning 3-D conv merges the pair; ViT; then
    4 more multi-scale blocks.
    """

    def __init__(self, cfg: ModelConfig, rng, state_channels: int | None = None, hw=None):
        super().__init__()
        self.cfg = cfg
        c = cfg.latent_channels if state_channels is None else state_channels
        h, w = cfg.latent_hw if hw is None else hw
        self.c, self.h, self.w = c, h, w
        cs = c + cfg.time_channels + cfg.const_channels
        self.pre = [MultiScaleBlock(cs, rng) for _ in range(4)]
        self.merge = Conv3dCollapse(cs, 2, c, 3, rng)
        self.vit = ViT(c, c, h, w, cfg, rng)
        self.post = [MultiScaleBlock(c, rng) for _ in range(4)]

    def forward(self, h_prev, h_cur, t_prev, t_cur, const, rng=None) -> Tensor:
        cfg = self.cfg
        n = h_prev.shape[0]
        const_b = ad.reshape(const, (1,) + const.shape) * np.ones((n, 1, 1, 1))
        steps = []
        for hs, ts in ((h_prev, t_prev), (h_cur, t_cur)):
            temb = Tensor(time_embedding(np.broadcast_to(ts, (n,)), cfg.time_channels, self.h, self.w))
            steps.append(ad.concat([hs, temb, const_b], axis=1))
        x = ad.concat(steps, axis=0)  # both steps share the block weights
        for block in self.pre:
            x = block(x)
        cs = x.shape[1]
        x = ad.transpose(ad.reshape(x, (2, n, cs, self.h, self.w)), (1, 2, 0, 3, 4))
        x = self.merge(x)
        x = self.vit(x, rng)
        for block in self.post:
            x = block(x)
        return x


# ---------------------------------------------------------------------------
# projector and reconstructor


class PatchAttention(Module):
    """Residual patch-token self-attention over a (N, C, h, w) map."""

    def __init__(self, channels: int, h: int, w: int, cfg: ModelConfig, rng):
        super().__init__()
        p = cfg.patch
        self.p, self.c, self.h, self.w = p, channels, h, w
        tokens = (h // p) * (w // p)
        self.embed = Linear(p * p * channels, cfg.vit_dim, rng)
        self.pos = ad.parameter(0.02 * rng.standard_normal((1, tokens, cfg.vit_dim)))
        self.norm = LayerNorm(cfg.vit_dim)
        self.attn = MultiHeadAttention(cfg.vit_dim, cfg.projector_heads, rng, cfg.dropout)
        self.unembed = Linear(cfg.vit_dim, p * p * channels, rng)

    def forward(self, x, rng=None):
        z = self.embed(to_patches(x, self.p)) + self.pos
        z = self.attn(self.norm(z), rng) + z
        return x + from_patches(self.unembed(z), self.p, self.c, self.h, self.w)


class Projector(Module):
    """Latent -> normalized intensity grid (1 channel, 4x the latent extent)."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        h, w = cfg.latent_hw
        self.block = MultiScaleBlock(cfg.latent_channels, rng)
        self.attn = PatchAttention(cfg.latent_channels, h, w, cfg, rng)
        # small final weights: early training predicts near-zero fields
        self.out = Conv2d(cfg.latent_channels, 1, 3, rng, gain=1e-2)

    def forward(self, h, rng=None) -> Tensor:
        h = ad.as_tensor(h)
        if h.shape[1:] != (self.cfg.latent_channels,) + self.cfg.latent_hw:
            raise ValueError(f"latent shape {h.shape[1:]} does not match the projector")
        x = self.attn(self.block(h), rng)
        return self.out(ad.upsample_nearest(x, 4))


class ReconstructionHead(Module):
    def __init__(self, cin: int, hidden: int, cout: int, out_hw, rng):
        super().__init__()
        self.out_hw = tuple(out_hw)
        self.conv1 = Conv2d(cin, hidden, 3, rng)
        self.conv2 = Conv2d(hidden, cout, 3, rng)

    def forward(self, h):
        return ad.resize_bilinear(self.conv2(ad.leaky_relu(self.conv1(h))), self.out_hw)


class Reconstructor(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.heads = {
            name: ReconstructionHead(cfg.latent_channels, cfg.recon_hidden, c, cfg.modality_grid(name), rng)
            for name, c in cfg.modality_channels().items()
        }

    def forward(self, h) -> dict[str, Tensor]:
        return {name: head(h) for name, head in self.heads.items()}


# ---------------------------------------------------------------------------
# full model


class LatentForecaster(Module):
    """Encoder + three interval predictors + projector + reconstructor."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        h, w = cfg.latent_hw
        if h % cfg.patch or w % cfg.patch:
            raise ValueError(f"latent grid {h}x{w} not divisible by patch {cfg.patch}")
        self.encoder = Encoder(cfg, rng)
        self.lpm1 = LatentPredictor(cfg, rng)
        self.lpm2 = LatentPredictor(cfg, rng)
        self.lpm4 = LatentPredictor(cfg, rng)
        self.projector = Projector(cfg, rng)
        self.reconstructor = Reconstructor(cfg, rng)
        self.const_embed = ad.parameter(0.1 * rng.standard_normal((cfg.const_channels, h, w)))
        self.dropout_rng: np.random.Generator | None = None

    def predictor(self, delta: int) -> LatentPredictor:
        if delta not in DELTAS:
            raise ValueError(f"unknown interval {delta}; expected one of {DELTAS}")
        return getattr(self, f"lpm{delta}")

    def encode(self, qpe_radar, reanalysis, satellite=None) -> Tensor:
        return self.encoder(qpe_radar, reanalysis, satellite)

    def lpm_predict(self, delta: int, a: LatentState, b: LatentState) -> LatentState:
        lpm = self.predictor(delta)
        if not np.all(b.time_index - a.time_index == delta):
            raise ValueError(f"input steps must be spaced by {delta}")
        out = lpm(a.tensor, b.tensor, a.time_index, b.time_index, self.const_embed, self.dropout_rng)
        return LatentState(out, b.time_index + delta)

    def project(self, h) -> Tensor:
        return self.projector(h, self.dropout_rng)

    def project_many(self, latents: list[Tensor]) -> list[Tensor]:
        """Project several lead times in one batched call."""
        n = latents[0].shape[0]
        out = self.project(ad.concat(latents, axis=0))
        return [ad.take(ad.reshape(out, (len(latents), n) + out.shape[1:]), i) for i in range(len(latents))]

    def reconstruct(self, h) -> dict[str, Tensor]:
        return self.reconstructor(h)

    def group_parameter_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for name, p in self.named_parameters():
            key = name.split(".")[0]
            counts[key] = counts.get(key, 0) + p.size
        return counts


class PhysicalIterator(Module):
    """Ablation comparator: the same predictor stack iterating raw fields at full resolution.

    The state is every input channel on the fine grid (reanalysis resampled
    bilinearly), so there is no encoder, projector or latent bottleneck.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.state_channels = sum(cfg.modality_channels().values())
        hw = (cfg.height, cfg.width)
        self.lpm1 = LatentPredictor(cfg, rng, self.state_channels, hw)
        self.lpm2 = LatentPredictor(cfg, rng, self.state_channels, hw)
        self.lpm4 = LatentPredictor(cfg, rng, self.state_channels, hw)
        self.const_embed = ad.parameter(0.1 * rng.standard_normal((cfg.const_channels,) + hw))
        self.dropout_rng: np.random.Generator | None = None

    def predictor(self, delta: int) -> LatentPredictor:
        if delta not in DELTAS:
            raise ValueError(f"unknown interval {delta}; expected one of {DELTAS}")
        return getattr(self, f"lpm{delta}")

    def encode(self, qpe_radar, reanalysis, satellite=None) -> Tensor:
        """Stack all modalities on the fine grid (identity 'encoding')."""
        hw = (self.cfg.height, self.cfg.width)
        parts = [ad.as_tensor(qpe_radar), ad.resize_bilinear(ad.as_tensor(reanalysis), hw)]
        if self.cfg.satellite_channels:
            if satellite is None:
                n = parts[0].shape[0]
                satellite = np.zeros((n, self.cfg.satellite_channels) + hw)
            parts.append(ad.as_tensor(satellite))
        return ad.concat(parts, axis=1)

    def lpm_predict(self, delta: int, a: LatentState, b: LatentState) -> LatentState:
        lpm = self.predictor(delta)
        if not np.all(b.time_index - a.time_index == delta):
            raise ValueError(f"input steps must be spaced by {delta}")
        out = lpm(a.tensor, b.tensor, a.time_index, b.time_index, self.const_embed, self.dropout_rng)
        return LatentState(out, b.time_index + delta)

    def project(self, state) -> Tensor:
        """The intensity channel of a physical state."""
        state = ad.as_tensor(state)
        mask = np.zeros(state.shape, dtype=bool)
        mask[:, 0] = True
        return ad.reshape(ad.masked_select(state, mask), (state.shape[0], 1) + state.shape[2:])
