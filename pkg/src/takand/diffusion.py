"""Conditional diffusion over support/negative pair grids with a U-KAN denoiser.

A grid holds ``2K`` tokens (K support pairs, then K corrupted pairs), each token
the concatenation ``[h~; t~]`` of an enhanced pair. The denoiser convolves along
the token axis with the ``2d`` features as channels.

Timesteps are 1-based: ``t = 1..T`` indexes ``schedule.alpha_bar[t - 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import EnhancedPair
from .kan import KANLayer

Timestep = Union[int, torch.Tensor]


@dataclass
class NoiseSchedule:
    T: int
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    s: float = 0.008
    max_beta: float = 0.999

    def at(self, t: Timestep) -> torch.Tensor:
        t = torch.as_tensor(t)
        if bool((t < 1).any()) or bool((t > self.T).any()):
            raise ValueError(f"timestep must lie in [1, {self.T}]")
        return self.alpha_bar[t.long() - 1]

    def alpha_bar_prev(self, t: Timestep) -> torch.Tensor:
        t = torch.as_tensor(t).long()
        padded = torch.cat([torch.ones(1, dtype=self.alpha_bar.dtype), self.alpha_bar])
        return padded[t - 1]

    def constants(self) -> dict:
        return {"T": self.T, "s": self.s, "clip": self.max_beta}


def cosine_schedule(T: int, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """Squared-cosine cumulative schedule, betas clipped at ``max_beta``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    u = torch.arange(T + 1, dtype=torch.float64) / T
    f = torch.cos((u + s) / (1 + s) * math.pi / 2) ** 2
    abar = f / f[0]
    beta = (1 - abar[1:] / abar[:-1]).clamp(max=max_beta)
    alpha = 1 - beta
    return NoiseSchedule(T, beta, alpha, torch.cumprod(alpha, 0), s, max_beta)


def _expand(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    coef = coef.to(like.dtype)
    return coef.reshape(coef.shape + (1,) * (like.ndim - coef.ndim))


def forward_noise(z0: torch.Tensor, t: Timestep, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    if eps.shape != z0.shape:
        raise ValueError("noise must match the grid shape")
    abar = _expand(sched.at(t), z0)
    return abar.sqrt() * z0 + (1 - abar).sqrt() * eps


def estimate_z0(z_t: torch.Tensor, t: Timestep, eps_hat: torch.Tensor, sched: NoiseSchedule, clip: Optional[float] = None) -> torch.Tensor:
    """Invert the forward formula given a noise estimate; optionally clamp the result."""
    abar = _expand(sched.at(t), z_t)
    z0 = (z_t - (1 - abar).sqrt() * eps_hat) / abar.sqrt()
    return z0 if clip is None else z0.clamp(-clip, clip)


def sampling_timesteps(T: int, steps: int) -> list:
    """Evenly strided descending timesteps ending at 1 (or just ``[T]`` for one step)."""
    if not 1 <= steps <= T:
        raise ValueError(f"sample_steps must lie in [1, {T}]")
    if steps == 1:
        return [T]
    ts = np.unique(np.round(np.linspace(1, T, steps)).astype(int))
    return [int(x) for x in ts[::-1]]


@torch.no_grad()
def reverse_sample(
    denoiser: nn.Module,
    cond: Optional["ConditionPack"],
    sched: NoiseSchedule,
    sample_steps: int,
    shape: Sequence[int],
    generator: Optional[torch.Generator] = None,
    clip: Optional[float] = None,
    dtype=torch.float32,
) -> torch.Tensor:
    """Ancestral sampling from pure noise over a strided timestep chain.

    Each step uses the mean ``(z - beta/sqrt(1 - abar) * eps_hat) / sqrt(alpha)``
    and the posterior variance; the last step adds no noise. With ``clip`` the
    mean is formed from the clamped ``z0`` estimate instead (identical when
    nothing is clamped).
    """
    z = torch.randn(tuple(shape), generator=generator, dtype=dtype)
    chain = sampling_timesteps(sched.T, sample_steps)
    for i, t in enumerate(chain):
        prev = chain[i + 1] if i + 1 < len(chain) else 0
        abar_t = sched.alpha_bar[t - 1]
        abar_prev = sched.alpha_bar[prev - 1] if prev > 0 else torch.ones((), dtype=sched.alpha_bar.dtype)
        alpha = abar_t / abar_prev
        beta = 1 - alpha
        tt = torch.full(tuple(shape[:1]), t, dtype=torch.long)
        eps_hat = denoiser(z, tt, cond)
        if clip is None:
            mean = (z - (beta / (1 - abar_t).sqrt()).to(dtype) * eps_hat) / alpha.sqrt().to(dtype)
        else:
            z0 = estimate_z0(z, t, eps_hat, sched, clip)
            c0 = (abar_prev.sqrt() * beta / (1 - abar_t)).to(dtype)
            ct = (alpha.sqrt() * (1 - abar_prev) / (1 - abar_t)).to(dtype)
            mean = c0 * z0 + ct * z
        if prev == 0:
            z = mean
        else:
            var = (beta * (1 - abar_prev) / (1 - abar_t)).to(dtype)
            z = mean + var.sqrt() * torch.randn(z.shape, generator=generator, dtype=dtype)
    return z


@dataclass
class TripleGrid:
    tokens: torch.Tensor  # (..., 2K, 2d)
    labels: torch.Tensor  # (..., 2K) bool, True for support positions


def build_z0(support: EnhancedPair, negatives: EnhancedPair) -> TripleGrid:
    if support.h_tilde.shape != negatives.h_tilde.shape:
        raise ValueError("support and negative sets must have the same size")
    pos = torch.cat([support.h_tilde, support.t_tilde], dim=-1)
    neg = torch.cat([negatives.h_tilde, negatives.t_tilde], dim=-1)
    tokens = torch.cat([pos, neg], dim=-2)
    k = pos.shape[-2]
    labels = torch.arange(2 * k) < k
    return TripleGrid(tokens, labels.expand(tokens.shape[:-1]))


def extract_latent_rule(tokens: torch.Tensor) -> torch.Tensor:
    """Mean-pool the positive and negative halves of a grid and concatenate them."""
    n = tokens.shape[-2]
    if n % 2:
        raise ValueError("grid must hold an even number of tokens")
    pos, neg = tokens.split(n // 2, dim=-2)
    return torch.cat([pos.mean(-2), neg.mean(-2)], dim=-1)


@dataclass
class ConditionPack:
    r_bar: torch.Tensor  # (..., d)
    pos_summary: torch.Tensor  # (..., 2d)
    neg_summary: torch.Tensor  # (..., 2d)
    labels: torch.Tensor  # (..., 2K) bool

    def vector(self) -> torch.Tensor:
        return torch.cat([self.r_bar, self.pos_summary, self.neg_summary], dim=-1)


def film_condition(r_bar: torch.Tensor, support: EnhancedPair, negatives: EnhancedPair) -> ConditionPack:
    if support.h_tilde.shape != negatives.h_tilde.shape:
        raise ValueError("support and negative sets must have the same size")
    pos = torch.cat([support.h_tilde, support.t_tilde], dim=-1).mean(-2)
    neg = torch.cat([negatives.h_tilde, negatives.t_tilde], dim=-1).mean(-2)
    k = support.h_tilde.shape[-2]
    labels = (torch.arange(2 * k) < k).expand(pos.shape[:-1] + (2 * k,))
    return ConditionPack(r_bar, pos, neg, labels)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.double().unsqueeze(-1) * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _groups(channels: int) -> int:
    # at least two channels per group so length-1 inputs still normalize
    for g in (8, 4, 2):
        if channels % g == 0 and channels // g >= 2:
            return g
    return 1


class FiLM(nn.Module):
    """Per-position scale/shift from a conditioning sequence; identity at init."""

    def __init__(self, cond_dim: int, channels: int):
        super().__init__()
        self.proj = nn.Linear(cond_dim, 2 * channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor, cond_seq: torch.Tensor) -> torch.Tensor:
        # x: (B, C, L), cond_seq: (B, L, cond_dim)
        gamma, beta = self.proj(cond_seq).transpose(1, 2).chunk(2, dim=1)
        return x * (1 + gamma) + beta


class ResBlock1d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, cond_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.film = FiLM(cond_dim, in_ch)
        self.conv1 = nn.Conv1d(in_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv1d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv1d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, cond_seq=None):
        h = self.norm1(x)
        if cond_seq is not None:
            h = self.film(h, cond_seq)
        h = self.conv1(F.silu(h))
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Bottleneck(nn.Module):
    """Tokens -> linear projection -> + timestep embedding -> KAN (or MLP) -> LayerNorm -> back."""

    def __init__(self, channels: int, width: int, use_kan: bool = True, grid_size: int = 5, spline_order: int = 3):
        super().__init__()
        self.width = width
        self.token_proj = nn.Linear(channels, width)
        self.time_mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))
        if use_kan:
            self.mixer = KANLayer(width, width, grid_size, spline_order)
        else:
            self.mixer = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))
        self.norm = nn.LayerNorm(width)
        self.out_proj = nn.Linear(width, channels)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        tokens = self.token_proj(x.transpose(1, 2))
        temb = self.time_mlp(timestep_embedding(t, self.width).to(x.dtype))
        tokens = self.norm(self.mixer(tokens + temb.unsqueeze(1)))
        return x + self.out_proj(tokens).transpose(1, 2)


class UKanDenoiser(nn.Module):
    """1D U-Net over the token axis with a KAN bottleneck.

    Down/up residual blocks are FiLM-modulated by the episode condition plus a
    learned per-position label embedding; the timestep reaches only the
    bottleneck. The output head starts at zero.
    """

    def __init__(
        self,
        data_channels: int,
        cond_dim: int,
        channels: Sequence[int] = (64, 128),
        label_dim: int = 8,
        token_width: Optional[int] = None,
        use_kan: bool = True,
        kan_grid: int = 5,
        kan_order: int = 3,
    ):
        super().__init__()
        channels = list(channels)
        if not channels:
            raise ValueError("need at least one channel level")
        self.levels = len(channels)
        self.label_embed = nn.Embedding(2, label_dim)
        film_dim = cond_dim + label_dim
        self.in_conv = nn.Conv1d(data_channels, channels[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = channels[0]
        for i, ch in enumerate(channels):
            self.down.append(ResBlock1d(prev, ch, film_dim))
            if i < self.levels - 1:
                self.downsample.append(nn.Conv1d(ch, ch, 3, stride=2, padding=1))
            prev = ch
        self.bottleneck = Bottleneck(channels[-1], token_width or channels[-1], use_kan, kan_grid, kan_order)
        self.up = nn.ModuleList()
        for i in reversed(range(self.levels - 1)):
            self.up.append(ResBlock1d(channels[i + 1] + channels[i], channels[i], film_dim))
        self.out_norm = nn.GroupNorm(_groups(channels[0]), channels[0])
        self.out_conv = nn.Conv1d(channels[0], data_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def _cond_seq(self, cond: ConditionPack, length: int, batch: int, dtype) -> torch.Tensor:
        glob = cond.vector().to(dtype)
        if glob.ndim == 1:
            glob = glob.expand(batch, -1)
        labels = cond.labels.long()
        if labels.ndim == 1:
            labels = labels.expand(batch, -1)
        lab = self.label_embed(labels).to(dtype)  # (B, L, label_dim)
        if lab.shape[1] != length:
            lab = F.adaptive_avg_pool1d(lab.transpose(1, 2), length).transpose(1, 2)
        return torch.cat([glob.unsqueeze(1).expand(-1, length, -1), lab], dim=-1)

    def forward(self, z_t: torch.Tensor, t: Timestep, cond: Optional[ConditionPack] = None) -> torch.Tensor:
        """``z_t``: ``(B, 2K, 2d)`` or ``(2K, 2d)``; returns the noise estimate with the same shape."""
        squeeze = z_t.ndim == 2
        if squeeze:
            z_t = z_t.unsqueeze(0)
        batch, length, _ = z_t.shape
        t = torch.as_tensor(t).long().reshape(-1).expand(batch)
        mult = 2 ** (self.levels - 1)
        padded = -(-length // mult) * mult
        x = z_t.transpose(1, 2)
        if padded != length:
            x = F.pad(x, (0, padded - length))
        if cond is not None and cond.labels.shape[-1] != padded:
            cond = ConditionPack(cond.r_bar, cond.pos_summary, cond.neg_summary, F.pad(cond.labels.long(), (0, padded - length)))

        def cs(n):
            return None if cond is None else self._cond_seq(cond, n, batch, x.dtype)

        h = self.in_conv(x)
        skips = []
        for i, block in enumerate(self.down):
            h = block(h, cs(h.shape[-1]))
            if i < self.levels - 1:
                skips.append(h)
                h = self.downsample[i](h)
        h = self.bottleneck(h, t)
        for block in self.up:
            skip = skips.pop()
            h = F.interpolate(h, size=skip.shape[-1], mode="nearest")
            h = block(torch.cat([h, skip], dim=1), cs(skip.shape[-1]))
        out = self.out_conv(F.silu(self.out_norm(h)))[..., :length].transpose(1, 2)
        return out.squeeze(0) if squeeze else out
