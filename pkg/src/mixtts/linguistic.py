"""Linguistic encoder with mixture alignment.

Phonemes are encoded, averaged inside each word, re-encoded at word level,
expanded to frames with hard word durations, then refined by a masked
word-to-phoneme attention in which every frame attends only to the phonemes
of its own word.

Batched tensors use ``-1`` in ``word_ids`` / ``frame_word_ids`` for padding.
"""

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .modules import ChannelLayerNorm, FFTStack


class AlignmentError(ValueError):
    pass


def word_onehot(word_ids, n_words=None):
    """``[B, N]`` word labels -> ``[B, N, W]`` float one-hot (padding rows all zero)."""
    n_words = int(word_ids.max()) + 1 if n_words is None else n_words
    valid = word_ids >= 0
    onehot = F.one_hot(word_ids.clamp(min=0), n_words) * valid[..., None]
    return onehot


def word_pool(h_p, word_ids, n_words=None):
    """Mean of phoneme hidden states inside each word: ``[B, P, d] -> [B, W, d]``."""
    squeeze = h_p.dim() == 2
    if squeeze:
        h_p, word_ids = h_p[None], word_ids[None]
    onehot = word_onehot(word_ids, n_words).to(h_p.dtype)
    counts = onehot.sum(1).clamp(min=1)
    pooled = onehot.transpose(1, 2) @ h_p / counts[..., None]
    return pooled[0] if squeeze else pooled


def aggregate_word_durations(durations, word_ids, n_words=None):
    """Per-word sums of phoneme durations: ``[B, P] -> [B, W]``."""
    squeeze = durations.dim() == 1
    if squeeze:
        durations, word_ids = durations[None], word_ids[None]
    n_words = int(word_ids.max()) + 1 if n_words is None else n_words
    valid = word_ids >= 0
    out = torch.zeros(durations.shape[0], n_words, dtype=durations.dtype, device=durations.device)
    out = out.scatter_add(1, word_ids.clamp(min=0), durations * valid)
    return out[0] if squeeze else out


def round_durations(durations, min_frames=1):
    """Round half up, with at least ``min_frames`` per word."""
    return torch.floor(durations + 0.5).long().clamp(min=min_frames)


def length_regulate(word_hidden, durations):
    """Repeat row ``w`` of ``word_hidden`` ``durations[w]`` times.

    Returns ``(expanded [B, T, d], frame_word_ids [B, T])`` with ``T`` the
    largest per-item duration sum.
    """
    squeeze = word_hidden.dim() == 2
    if squeeze:
        word_hidden, durations = word_hidden[None], durations[None]
    durations = durations.long()
    if (durations < 0).any():
        raise AlignmentError("negative word duration")
    totals = durations.sum(1)
    if (totals == 0).any():
        raise AlignmentError("total duration is zero")
    t_max = int(totals.max())
    b, w, d = word_hidden.shape
    frame_word_ids = torch.full((b, t_max), -1, dtype=torch.long, device=word_hidden.device)
    for i in range(b):
        ids = torch.repeat_interleave(torch.arange(w, device=word_hidden.device), durations[i])
        frame_word_ids[i, : ids.numel()] = ids
    gathered = word_hidden.gather(1, frame_word_ids.clamp(min=0)[..., None].expand(b, t_max, d))
    expanded = gathered * (frame_word_ids >= 0)[..., None].to(word_hidden.dtype)
    if squeeze:
        return expanded[0], frame_word_ids[0]
    return expanded, frame_word_ids


def build_w2p_mask(word_ids, frame_word_ids):
    """``mask[b, t, p]`` is True iff frame ``t`` and phoneme ``p`` belong to the same word."""
    squeeze = word_ids.dim() == 1
    if squeeze:
        word_ids, frame_word_ids = word_ids[None], frame_word_ids[None]
    same = frame_word_ids[:, :, None] == word_ids[:, None, :]
    mask = same & (frame_word_ids >= 0)[:, :, None] & (word_ids >= 0)[:, None, :]
    return mask[0] if squeeze else mask


def position_in_word(ids, n_words=None):
    """Fractional position ``i / L_w`` of each element inside its word (0 on padding)."""
    squeeze = ids.dim() == 1
    if squeeze:
        ids = ids[None]
    onehot = word_onehot(ids, n_words)
    running = onehot.cumsum(1)
    index = (running * onehot).sum(-1) - 1
    length = (onehot.sum(1, keepdim=True) * onehot).sum(-1)
    coef = torch.where(ids >= 0, index.float() / length.clamp(min=1).float(), torch.zeros(()))
    return coef[0] if squeeze else coef


def add_w2p_positional_encodings(h_p, h_w, word_ids, frame_word_ids, e_kv, e_q):
    """Add ``(i / L_w) * e_kv`` to phoneme states and ``(j / T_w) * e_q`` to frame states."""
    n_words = int(max(word_ids.max(), frame_word_ids.max())) + 1
    kv = position_in_word(word_ids, n_words).to(h_p.dtype)
    q = position_in_word(frame_word_ids, n_words).to(h_w.dtype)
    return h_p + kv[..., None] * e_kv, h_w + q[..., None] * e_q


class WordToPhonemeAttention(nn.Module):
    """Multi-head attention whose weights are confined to each frame's own word."""

    def __init__(self, channels, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = channels // n_heads
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.o = nn.Linear(channels, channels)

    def forward(self, h_w, h_p, mask, frame_mask=None):
        """Returns ``(h_w + attention output, head-averaged weights [B, T, P])``.

        ``frame_mask`` marks real (non-padding) frames; each of them needs at
        least one permitted phoneme.
        """
        b, t, c = h_w.shape
        p = h_p.shape[1]
        frame_valid = torch.ones(b, t, dtype=torch.bool, device=h_w.device) if frame_mask is None else frame_mask
        if (frame_valid & ~mask.any(-1)).any():
            raise AlignmentError("attention row with no permitted phoneme")
        # padded frames get a dummy key so their softmax is defined; zeroed below
        safe = mask.clone()
        safe[..., 0] |= ~frame_valid
        q = self.q(h_w).view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.k(h_p).view(b, p, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.v(h_p).view(b, p, self.n_heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~safe[:, None], float("-inf"))
        weights = torch.softmax(scores, dim=-1) * mask[:, None].to(scores.dtype)
        out = (weights @ v).transpose(1, 2).reshape(b, t, c)
        h_l = (h_w + self.o(out)) * frame_valid[..., None].to(h_w.dtype)
        return h_l, weights.mean(1)


class DurationPredictor(nn.Module):
    """Two conv/ReLU/LayerNorm layers and a linear head; outputs log-scale phoneme durations."""

    def __init__(self, channels, kernel_size, dropout):
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = nn.Conv1d(channels, channels, kernel_size, padding=pad)
        self.norm1 = ChannelLayerNorm(channels)
        self.conv2 = nn.Conv1d(channels, channels, kernel_size, padding=pad)
        self.norm2 = ChannelLayerNorm(channels)
        self.proj = nn.Linear(channels, 1)
        self.drop = nn.Dropout(dropout)

    def forward(self, h_p, mask):
        m = mask[:, None, :].to(h_p.dtype)
        x = h_p.transpose(1, 2)
        x = self.drop(self.norm1(F.relu(self.conv1(x * m))))
        x = self.drop(self.norm2(F.relu(self.conv2(x * m))))
        return self.proj(x.transpose(1, 2)).squeeze(-1) * mask.to(h_p.dtype)


@dataclass
class EncoderOutput:
    h_l: torch.Tensor
    frame_mask: torch.Tensor
    frame_word_ids: torch.Tensor
    attention: torch.Tensor
    phoneme_log_durations: torch.Tensor
    word_log_durations: torch.Tensor
    word_durations: torch.Tensor
    word_mask: torch.Tensor


class LinguisticEncoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        d = cfg.hidden_size
        self.hidden = d
        self.embed = nn.Embedding(cfg.vocab_size, cfg.phoneme_embedding, padding_idx=0)
        nn.init.normal_(self.embed.weight, 0.0, cfg.phoneme_embedding ** -0.5)
        with torch.no_grad():
            self.embed.weight[0].zero_()
        self.embed_proj = nn.Linear(cfg.phoneme_embedding, d) if cfg.phoneme_embedding != d else nn.Identity()
        stack = dict(
            n_layers=cfg.encoder_layers,
            channels=d,
            filter_size=cfg.conv1d_filter_size,
            kernel_size=cfg.conv1d_kernel,
            n_heads=cfg.attention_heads,
            window=cfg.relative_window,
            dropout=cfg.dropout,
        )
        self.phoneme_encoder = FFTStack(**stack)
        self.word_encoder = FFTStack(**stack)
        self.duration_predictor = DurationPredictor(d, cfg.duration_kernel, cfg.dropout)
        self.w2p = WordToPhonemeAttention(d, cfg.attention_heads)
        # shared by both attention heads
        self.pos_kv = nn.Parameter(torch.randn(d))
        self.pos_q = nn.Parameter(torch.randn(d))

    def encode_phonemes(self, tokens, mask):
        if (tokens < 0).any() or (tokens >= self.embed.num_embeddings).any():
            raise IndexError("phoneme token outside the vocabulary")
        x = self.embed_proj(self.embed(tokens) * math.sqrt(self.hidden))
        return self.phoneme_encoder(x, mask)

    def predict_durations(self, h_p, mask):
        return self.duration_predictor(h_p, mask)

    def forward(self, tokens, word_ids, word_durations=None, overrides=None, pad_multiple=1):
        """Encode a batch of phoneme sequences into frame-aligned features.

        With ``word_durations`` the expansion is teacher-forced; otherwise the
        predicted durations are exponentiated, summed per word and rounded.
        ``overrides`` maps word index to an absolute frame count (applied to
        every batch item).  ``pad_multiple`` lengthens the last word so each
        total is a multiple of it.
        """
        ph_mask = word_ids >= 0
        n_words = int(word_ids.max()) + 1
        word_mask = word_onehot(word_ids, n_words).sum(1) > 0
        h_p = self.encode_phonemes(tokens, ph_mask)
        log_dur = self.predict_durations(h_p, ph_mask)
        linear = aggregate_word_durations(torch.exp(log_dur) * ph_mask, word_ids, n_words)
        word_log_dur = torch.log1p(linear) * word_mask

        if word_durations is None:
            durations = round_durations(linear.detach()) * word_mask
            for w, frames in (overrides or {}).items():
                if not 0 <= w < n_words:
                    raise AlignmentError(f"duration override for non-existent word {w}")
                if frames < 0:
                    raise AlignmentError("duration override must be non-negative")
                durations[:, w] = torch.where(word_mask[:, w], torch.tensor(int(frames)), durations[:, w])
        else:
            durations = word_durations.long() * word_mask
        if pad_multiple > 1:
            last = word_mask.long().sum(1) - 1
            extra = -durations.sum(1) % pad_multiple
            durations = durations.scatter_add(1, last[:, None], extra[:, None])

        pooled = word_pool(h_p, word_ids, n_words)
        h_word = self.word_encoder(pooled, word_mask)
        h_w, frame_word_ids = length_regulate(h_word, durations)
        h_p_pos, h_w_pos = add_w2p_positional_encodings(h_p, h_w, word_ids, frame_word_ids, self.pos_kv, self.pos_q)
        mask = build_w2p_mask(word_ids, frame_word_ids)
        h_l, attention = self.w2p(h_w_pos, h_p_pos, mask, frame_word_ids >= 0)
        return EncoderOutput(
            h_l=h_l,
            frame_mask=frame_word_ids >= 0,
            frame_word_ids=frame_word_ids,
            attention=attention,
            phoneme_log_durations=log_dur,
            word_log_durations=word_log_dur,
            word_durations=durations,
            word_mask=word_mask,
        )
