"""Glow-style flow post-net with grouped parameter sharing.

Each flow step is actnorm -> invertible 1x1 channel mixing -> affine
coupling.  Coupling networks are WaveNets; steps in the same contiguous
group share the WaveNet body (dilated convs and residual/skip projections)
while the conditioning projection and the start/end convs stay per-step.

Frames are squeezed in time by ``squeeze`` before the flow (``80 * squeeze``
channels, ``T / squeeze`` frames); there is no multi-scale split.
"""

import math

import torch
from torch import nn

from .modules import WaveNet

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
# sigmoid(raw + 2) rescaled so the scale is exactly 1 at raw = 0
_SCALE_SHIFT = 2.0
_LOG_SCALE_AT_ZERO = -math.log1p(math.exp(-_SCALE_SHIFT))


class FlowNumericError(FloatingPointError):
    pass


class FlowInitError(RuntimeError):
    pass


def group_index(step, n_steps, n_groups):
    """Group of 1-based ``step`` when ``n_steps`` steps are split into ``n_groups`` contiguous blocks."""
    if n_groups > n_steps or n_groups < 1:
        raise ValueError(f"need 1 <= n_groups <= n_steps, got {n_groups} groups for {n_steps} steps")
    if not 1 <= step <= n_steps:
        raise ValueError(f"step {step} outside 1..{n_steps}")
    return (step - 1) * n_groups // n_steps


def squeeze(x, mask, factor):
    """``[B, C, T] -> [B, C * factor, T / factor]``."""
    if factor == 1:
        return x, mask
    b, c, t = x.shape
    x = x.view(b, c, t // factor, factor).permute(0, 3, 1, 2).reshape(b, c * factor, t // factor)
    return x, mask[:, :, factor - 1 :: factor]


def unsqueeze(x, mask, factor):
    if factor == 1:
        return x, mask
    b, c, t = x.shape
    x = x.view(b, factor, c // factor, t).permute(0, 2, 3, 1).reshape(b, c // factor, t * factor)
    return x, mask.repeat_interleave(factor, dim=2)


class ActNorm(nn.Module):
    """Per-channel affine ``y = x * exp(logs) + bias`` with data-dependent init."""

    def __init__(self, channels):
        super().__init__()
        self.logs = nn.Parameter(torch.zeros(1, channels, 1))
        self.bias = nn.Parameter(torch.zeros(1, channels, 1))
        self.register_buffer("initialized", torch.tensor(False))

    def initialize(self, x, mask):
        with torch.no_grad():
            n = mask.sum()
            mean = (x * mask).sum((0, 2)) / n
            var = (((x - mean[None, :, None]) * mask) ** 2).sum((0, 2)) / n
            logs = -0.5 * torch.log(var.clamp(min=1e-12))
            self.logs.copy_(logs[None, :, None])
            self.bias.copy_((-mean * torch.exp(logs))[None, :, None])
            self.initialized.fill_(True)

    def forward(self, x, mask, reverse=False):
        n_frames = mask.sum((1, 2))
        if reverse:
            return (x - self.bias) * torch.exp(-self.logs) * mask, -self.logs.sum() * n_frames
        return (x * torch.exp(self.logs) + self.bias) * mask, self.logs.sum() * n_frames


class InvConv(nn.Module):
    """Invertible 1x1 channel mixing; initialized to a random rotation (det = +1)."""

    def __init__(self, channels):
        super().__init__()
        w, _ = torch.linalg.qr(torch.randn(channels, channels))
        if torch.det(w) < 0:
            w[:, 0] = -w[:, 0]
        self.weight = nn.Parameter(w)

    def forward(self, x, mask, reverse=False):
        n_frames = mask.sum((1, 2))
        sign, logabsdet = torch.linalg.slogdet(self.weight)
        if reverse:
            if sign == 0 or not torch.isfinite(logabsdet):
                raise FlowNumericError("channel-mixing matrix is singular")
            w = torch.linalg.inv(self.weight)
            return torch.einsum("ij,bjt->bit", w, x) * mask, -logabsdet * n_frames
        return torch.einsum("ij,bjt->bit", self.weight, x) * mask, logabsdet * n_frames


class AffineCoupling(nn.Module):
    """Affine coupling whose WaveNet body may be shared with other steps.

    The per-step parts are the start conv, the conditioning projection and
    the zero-initialized end conv that emits (shift, raw scale).
    """

    def __init__(self, channels, body, cond_channels):
        super().__init__()
        self.half = channels // 2
        self.body = body
        self.start = nn.Conv1d(self.half, body.hidden, 1)
        self.cond_proj = nn.Conv1d(cond_channels, body.cond_channels, 1)
        self.end = nn.Conv1d(body.hidden, 2 * self.half, 1)
        nn.init.zeros_(self.end.weight)
        nn.init.zeros_(self.end.bias)

    def _params(self, x0, mask, cond):
        h = self.start(x0) * mask
        h = self.body(h, mask, self.cond_proj(cond * mask))
        out = self.end(h)
        shift, raw = out[:, : self.half], out[:, self.half :]
        log_scale = nn.functional.logsigmoid(raw + _SCALE_SHIFT) - _LOG_SCALE_AT_ZERO
        return shift, log_scale

    def forward(self, x, mask, cond, reverse=False):
        x0, x1 = x[:, : self.half], x[:, self.half :]
        shift, log_scale = self._params(x0, mask, cond)
        if reverse:
            x1 = (x1 - shift) * torch.exp(-log_scale)
            logdet = -(log_scale * mask).sum((1, 2))
        else:
            x1 = x1 * torch.exp(log_scale) + shift
            logdet = (log_scale * mask).sum((1, 2))
        return torch.cat([x0, x1 * mask], dim=1), logdet


class FlowStep(nn.Module):
    def __init__(self, channels, body, cond_channels):
        super().__init__()
        self.actnorm = ActNorm(channels)
        self.invconv = InvConv(channels)
        self.coupling = AffineCoupling(channels, body, cond_channels)

    def forward(self, x, mask, cond, reverse=False):
        if reverse:
            x, ld_c = self.coupling(x, mask, cond, reverse=True)
            x, ld_w = self.invconv(x, mask, reverse=True)
            x, ld_a = self.actnorm(x, mask, reverse=True)
        else:
            x, ld_a = self.actnorm(x, mask)
            x, ld_w = self.invconv(x, mask)
            x, ld_c = self.coupling(x, mask, cond)
        return x, ld_a + ld_w + ld_c


class PostNet(nn.Module):
    """Conditional flow over mel frames.

    ``forward`` maps data to latent and returns the summed log-determinant;
    ``log_likelihood`` adds the standard-normal term.  Tensors are ``[B, C, T]``
    with ``mask`` ``[B, 1, T]``.
    """

    def __init__(self, channels, cond_channels, hidden, kernel_size, n_layers, n_steps, n_groups, squeeze=1):
        super().__init__()
        self.channels = channels
        self.squeeze = squeeze
        self.n_steps = n_steps
        self.n_groups = n_groups
        flow_channels = channels * squeeze
        self.bodies = nn.ModuleList(WaveNet(hidden, kernel_size, n_layers) for _ in range(n_groups))
        self.groups = [group_index(k, n_steps, n_groups) for k in range(1, n_steps + 1)]
        self.steps = nn.ModuleList(
            FlowStep(flow_channels, self.bodies[g], cond_channels * squeeze) for g in self.groups
        )

    @classmethod
    def from_config(cls, cfg):
        return cls(
            channels=cfg.n_mels,
            cond_channels=cfg.hidden_size + cfg.n_mels,
            hidden=cfg.postnet_wavenet_channels,
            kernel_size=cfg.postnet_wavenet_kernel,
            n_layers=cfg.postnet_wavenet_layers,
            n_steps=cfg.postnet_flow_steps,
            n_groups=cfg.postnet_shared_groups,
            squeeze=cfg.postnet_squeeze,
        )

    @property
    def initialized(self):
        return all(bool(s.actnorm.initialized) for s in self.steps)

    def forward(self, x, cond, mask):
        """Data ``[B, C, T]`` -> ``(z [B, C, T], logdet [B])``."""
        x, m = squeeze(x * mask, mask, self.squeeze)
        c, _ = squeeze(cond, mask, self.squeeze)
        logdet = torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
        for k, step in enumerate(self.steps):
            x, ld = step(x, m, c)
            if not (torch.isfinite(x).all() and torch.isfinite(ld).all()):
                raise FlowNumericError(f"non-finite activation after post-net step {k + 1}")
            logdet = logdet + ld
        x, _ = unsqueeze(x, m, self.squeeze)
        return x, logdet

    def inverse(self, z, cond, mask):
        z, m = squeeze(z * mask, mask, self.squeeze)
        c, _ = squeeze(cond, mask, self.squeeze)
        for k in reversed(range(self.n_steps)):
            z, _ = self.steps[k](z, m, c, reverse=True)
            if not torch.isfinite(z).all():
                raise FlowNumericError(f"non-finite activation after inverse post-net step {k + 1}")
        z, _ = unsqueeze(z, m, self.squeeze)
        return z

    def log_likelihood(self, x, cond, mask):
        """Per-utterance exact log-likelihood ``[B]`` and the latent."""
        z, logdet = self.forward(x, cond, mask)
        prior = ((-0.5 * z * z - HALF_LOG_2PI) * mask).sum((1, 2))
        return prior + logdet, z

    def sample(self, cond, mask, temperature=0.8, generator=None):
        """Draw ``z ~ N(0, temperature^2)`` and invert the flow."""
        if temperature < 0:
            raise ValueError("temperature must be non-negative")
        b, _, t = cond.shape
        z = torch.randn(b, self.channels, t, generator=generator, dtype=cond.dtype, device=cond.device)
        return self.inverse(z * temperature, cond, mask)

    def data_dependent_init(self, x, cond, mask):
        """Initialize every actnorm so its output is zero-mean/unit-variance on this batch."""
        if any(bool(s.actnorm.initialized) for s in self.steps):
            raise FlowInitError("post-net actnorm layers are already initialized")
        with torch.no_grad():
            x, m = squeeze(x * mask, mask, self.squeeze)
            c, _ = squeeze(cond, mask, self.squeeze)
            for step in self.steps:
                step.actnorm.initialize(x, m)
                x, _ = step(x, m, c)
