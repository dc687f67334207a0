"""Variational generator: stride-4 conv VAE over mel frames with a flow prior.

The prior is a volume-preserving flow (shift-only residual couplings and
channel flips) that maps posterior latents to a standard normal.  Because
every block has unit Jacobian determinant, the prior density is just the
standard-normal density of the flowed latent.
"""

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .modules import ChannelLayerNorm, ConditionedWaveNet

LOG_SIGMA_RANGE = (-8.0, 8.0)
HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


class ShapeError(ValueError):
    pass


def standard_normal_logpdf(x):
    return -0.5 * x * x - HALF_LOG_2PI


def downsample_mask(frame_mask, stride=4):
    """``[B, T]`` frame mask -> ``[B, T // stride]`` latent mask."""
    return frame_mask[:, ::stride]


def pool_condition(h_l, frame_mask, stride=4):
    """Average-pool ``[B, T, d]`` linguistic features to ``[B, d, T // stride]``."""
    x = (h_l * frame_mask[..., None].to(h_l.dtype)).transpose(1, 2)
    return F.avg_pool1d(x, stride)


@dataclass
class PosteriorParams:
    mu: torch.Tensor
    log_sigma: torch.Tensor

    @property
    def sigma(self):
        return torch.exp(self.log_sigma)


def reparameterize(params, noise):
    if noise.shape != params.mu.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != {tuple(params.mu.shape)}")
    return params.mu + params.sigma * noise


def gaussian_logpdf(z, params):
    return -0.5 * ((z - params.mu) / params.sigma) ** 2 - params.log_sigma - HALF_LOG_2PI


class PosteriorEncoder(nn.Module):
    """Stride-4 conv + ReLU + LayerNorm, then a WaveNet at latent rate."""

    def __init__(self, cfg):
        super().__init__()
        c, s = cfg.vg_channels, cfg.temporal_stride
        self.stride = s
        self.down = nn.Conv1d(cfg.n_mels, c, 2 * s, stride=s, padding=s // 2)
        self.norm = ChannelLayerNorm(c)
        self.wn = ConditionedWaveNet(c, cfg.vg_encoder_kernel, cfg.vg_encoder_layers, cfg.hidden_size)
        self.proj = nn.Conv1d(c, 2 * cfg.latent_size, 1)

    def forward(self, mel, cond, frame_mask):
        """``mel``: ``[B, T, 80]``; ``cond``: pooled ``[B, d, T/4]``."""
        if mel.shape[1] % self.stride:
            raise ShapeError(f"frame count {mel.shape[1]} is not a multiple of {self.stride}")
        m = downsample_mask(frame_mask, self.stride)[:, None].to(mel.dtype)
        x = mel.transpose(1, 2) * frame_mask[:, None].to(mel.dtype)
        x = self.norm(F.relu(self.down(x))) * m
        x = self.wn(x, m, cond)
        stats = self.proj(x) * m
        mu, log_sigma = stats.chunk(2, dim=1)
        return PosteriorParams(mu, log_sigma.clamp(*LOG_SIGMA_RANGE) * m)


class Decoder(nn.Module):
    """Stride-4 transposed conv + ReLU + LayerNorm, then a WaveNet gated on frame-rate features."""

    def __init__(self, cfg):
        super().__init__()
        c, s = cfg.vg_channels, cfg.temporal_stride
        self.stride = s
        self.up = nn.ConvTranspose1d(cfg.latent_size, c, 2 * s, stride=s, padding=s // 2)
        self.norm = ChannelLayerNorm(c)
        self.wn = ConditionedWaveNet(c, cfg.vg_decoder_kernel, cfg.vg_decoder_layers, cfg.hidden_size)
        self.proj = nn.Conv1d(c, cfg.n_mels, 1)

    def forward(self, z, h_l, frame_mask):
        """``z``: ``[B, latent, T/4]``; ``h_l``: ``[B, T, d]``.  Returns ``[B, T, 80]``."""
        if z.shape[2] * self.stride != h_l.shape[1]:
            raise ShapeError(f"latent length {z.shape[2]} does not match {h_l.shape[1]} frames")
        m = frame_mask[:, None].to(z.dtype)
        zm = downsample_mask(frame_mask, self.stride)[:, None].to(z.dtype)
        x = self.norm(F.relu(self.up(z * zm))) * m
        x = self.wn(x, m, h_l.transpose(1, 2))
        return (self.proj(x) * m).transpose(1, 2)


class ResidualCoupling(nn.Module):
    """Shift-only coupling: the second half is offset by a function of the first half."""

    def __init__(self, channels, hidden, kernel_size, n_layers, cond_channels):
        super().__init__()
        self.half = channels // 2
        self.pre = nn.Conv1d(self.half, hidden, 1)
        self.wn = ConditionedWaveNet(hidden, kernel_size, n_layers, cond_channels)
        self.post = nn.Conv1d(hidden, self.half, 1)
        nn.init.zeros_(self.post.weight)
        nn.init.zeros_(self.post.bias)

    def shift(self, x0, mask, cond):
        h = self.pre(x0) * mask
        h = self.wn(h, mask, cond)
        return self.post(h) * mask

    def forward(self, x, mask, cond, reverse=False):
        x0, x1 = x[:, : self.half], x[:, self.half :]
        m = self.shift(x0, mask, cond)
        x1 = x1 - m if reverse else x1 + m
        return torch.cat([x0, x1 * mask], dim=1)


class VPFlow(nn.Module):
    """Stack of (residual coupling, channel flip) blocks; Jacobian determinant is 1."""

    def __init__(self, channels, hidden, kernel_size, n_layers, n_steps, cond_channels):
        super().__init__()
        self.couplings = nn.ModuleList(
            ResidualCoupling(channels, hidden, kernel_size, n_layers, cond_channels) for _ in range(n_steps)
        )

    def forward(self, z, cond, mask):
        """Posterior latent ``[B, C, L]`` -> standard-normal space."""
        for coupling in self.couplings:
            z = coupling(z, mask, cond)
            z = torch.flip(z, [1])
        return z

    def inverse(self, z0, cond, mask):
        for coupling in reversed(self.couplings):
            z0 = torch.flip(z0, [1])
            z0 = coupling(z0, mask, cond, reverse=True)
        return z0

    def log_prob(self, z, cond, mask):
        """Elementwise standard-normal log-density of the flowed latent (no Jacobian term)."""
        return standard_normal_logpdf(self.forward(z, cond, mask)) * mask


class VariationalGenerator(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.stride = cfg.temporal_stride
        self.latent_size = cfg.latent_size
        self.encoder = PosteriorEncoder(cfg)
        self.decoder = Decoder(cfg)
        self.vp_flow = VPFlow(
            cfg.latent_size,
            cfg.vp_flow_channels,
            cfg.vp_flow_kernel,
            cfg.vp_flow_layers,
            cfg.vp_flow_steps,
            cfg.hidden_size,
        )

    def condition(self, h_l, frame_mask):
        return pool_condition(h_l, frame_mask, self.stride)

    def latent_mask(self, frame_mask):
        return downsample_mask(frame_mask, self.stride)[:, None]

    def encode_posterior(self, mel, h_l, frame_mask):
        return self.encoder(mel, self.condition(h_l, frame_mask), frame_mask)

    def decode(self, z, h_l, frame_mask):
        return self.decoder(z, h_l, frame_mask)

    def prior_log_prob(self, z, h_l, frame_mask):
        mask = self.latent_mask(frame_mask).to(z.dtype)
        return self.vp_flow.log_prob(z, self.condition(h_l, frame_mask), mask)

    def kl_terms(self, params, z, h_l, frame_mask):
        """Elementwise single-sample KL estimate ``log q(z|x,c) - log p(z|c)`` (masked)."""
        mask = self.latent_mask(frame_mask).to(z.dtype)
        log_q = gaussian_logpdf(z, params)
        return (log_q - self.vp_flow.log_prob(z, self.condition(h_l, frame_mask), mask)) * mask

    def sample_prior(self, noise, h_l, frame_mask):
        """Map a standard-normal draw ``[B, latent, T/4]`` through the inverse flow."""
        mask = self.latent_mask(frame_mask).to(noise.dtype)
        return self.vp_flow.inverse(noise * mask, self.condition(h_l, frame_mask), mask)

    def kl_estimate(self, params, h_l, frame_mask, noise):
        """Single-sample Monte-Carlo KL, summed over latent elements and averaged over the batch."""
        z = reparameterize(params, noise)
        return self.kl_terms(params, z, h_l, frame_mask).sum() / z.shape[0]
