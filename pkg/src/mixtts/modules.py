"""Shared layers: masks, channel LayerNorm, non-causal WaveNet, FFT blocks.

Convolutional code uses the ``[B, C, T]`` layout; masks are ``[B, 1, T]``
float tensors.  Every conv input is multiplied by its mask so padded frames
never leak into valid ones.
"""

import math

import torch
from torch import nn
from torch.nn import functional as F


def sequence_mask(lengths, max_len=None):
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of a ``[B, C, T]`` tensor."""

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.ln = nn.LayerNorm(channels, eps=eps)

    def forward(self, x):
        return self.ln(x.transpose(1, 2)).transpose(1, 2)


class WaveNet(nn.Module):
    """Non-causal gated WaveNet body (dilation 1).

    The body holds only the dilated convs and the residual/skip projections;
    the conditioning projection ``cond`` (already ``2 * hidden * n_layers``
    channels) is produced by the caller, so several owners can share one body
    while keeping their own conditioning layers.
    """

    def __init__(self, hidden, kernel_size, n_layers, dropout=0.0):
        super().__init__()
        assert kernel_size % 2 == 1
        self.hidden = hidden
        self.n_layers = n_layers
        self.in_layers = nn.ModuleList()
        self.res_skip_layers = nn.ModuleList()
        self.drop = nn.Dropout(dropout)
        for i in range(n_layers):
            self.in_layers.append(nn.Conv1d(hidden, 2 * hidden, kernel_size, padding=kernel_size // 2))
            out = 2 * hidden if i < n_layers - 1 else hidden
            self.res_skip_layers.append(nn.Conv1d(hidden, out, 1))

    @property
    def cond_channels(self):
        return 2 * self.hidden * self.n_layers

    def forward(self, x, mask, cond=None):
        h = self.hidden
        skip = torch.zeros_like(x)
        for i in range(self.n_layers):
            a = self.in_layers[i](x * mask)
            if cond is not None:
                a = a + cond[:, 2 * h * i : 2 * h * (i + 1)]
            acts = torch.tanh(a[:, :h]) * torch.sigmoid(a[:, h:])
            acts = self.drop(acts)
            rs = self.res_skip_layers[i](acts)
            if i < self.n_layers - 1:
                x = (x + rs[:, :h]) * mask
                skip = skip + rs[:, h:]
            else:
                skip = skip + rs
        return skip * mask


class ConditionedWaveNet(nn.Module):
    """WaveNet with its own 1x1 conditioning projection."""

    def __init__(self, hidden, kernel_size, n_layers, cond_channels, dropout=0.0):
        super().__init__()
        self.body = WaveNet(hidden, kernel_size, n_layers, dropout)
        self.cond_layer = nn.Conv1d(cond_channels, self.body.cond_channels, 1)

    def forward(self, x, mask, cond):
        return self.body(x, mask, self.cond_layer(cond * mask))


class RelativeMultiHeadAttention(nn.Module):
    """Self-attention with clipped relative-position key/value embeddings.

    Relative offsets ``j - i`` are clipped to ``[-window, window]``; the two
    embedding tables are shared across heads.  Inputs are ``[B, T, C]``.
    """

    def __init__(self, channels, n_heads, window, dropout=0.0):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = channels // n_heads
        self.window = window
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.o = nn.Linear(channels, channels)
        std = self.head_dim ** -0.5
        self.rel_k = nn.Parameter(torch.randn(2 * window + 1, self.head_dim) * std)
        self.rel_v = nn.Parameter(torch.randn(2 * window + 1, self.head_dim) * std)
        self.drop = nn.Dropout(dropout)

    def _split(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, x, mask):
        """``mask``: ``[B, T]`` bool, True on valid positions."""
        b, t, c = x.shape
        q = self._split(self.q(x)) / math.sqrt(self.head_dim)
        k = self._split(self.k(x))
        v = self._split(self.v(x))
        pos = torch.arange(t, device=x.device)
        rel = (pos[None, :] - pos[:, None]).clamp(-self.window, self.window) + self.window
        ek, ev = self.rel_k[rel], self.rel_v[rel]
        scores = q @ k.transpose(-1, -2) + torch.einsum("bhid,ijd->bhij", q, ek)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        p = self.drop(torch.softmax(scores, dim=-1))
        out = p @ v + torch.einsum("bhij,ijd->bhid", p, ev)
        out = out.transpose(1, 2).reshape(b, t, c)
        return self.o(out)


class FFTBlock(nn.Module):
    """Post-norm transformer block with a conv feed-forward (kernel k, then 1x1)."""

    def __init__(self, channels, filter_size, kernel_size, n_heads, window, dropout):
        super().__init__()
        self.attn = RelativeMultiHeadAttention(channels, n_heads, window, dropout)
        self.norm1 = nn.LayerNorm(channels)
        self.conv1 = nn.Conv1d(channels, filter_size, kernel_size, padding=kernel_size // 2)
        self.conv2 = nn.Conv1d(filter_size, channels, 1)
        self.norm2 = nn.LayerNorm(channels)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        m = mask[:, :, None].to(x.dtype)
        x = self.norm1(x + self.drop(self.attn(x, mask))) * m
        y = self.conv1((x * m).transpose(1, 2))
        y = self.drop(F.relu(y))
        y = self.conv2(y * m.transpose(1, 2)).transpose(1, 2)
        x = self.norm2(x + self.drop(y)) * m
        return x


class FFTStack(nn.Module):
    def __init__(self, n_layers, channels, filter_size, kernel_size, n_heads, window, dropout):
        super().__init__()
        self.layers = nn.ModuleList(
            FFTBlock(channels, filter_size, kernel_size, n_heads, window, dropout) for _ in range(n_layers)
        )

    def forward(self, x, mask):
        x = x * mask[:, :, None].to(x.dtype)
        for layer in self.layers:
            x = layer(x, mask)
        return x
