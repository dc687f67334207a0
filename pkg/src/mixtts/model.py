"""The full acoustic model: linguistic encoder -> variational generator -> post-net."""

from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .corpus import FRAME_MULTIPLE
from .linguistic import EncoderOutput, LinguisticEncoder
from .postnet import PostNet
from .variational import PosteriorParams, VariationalGenerator, reparameterize


@dataclass
class TrainOutputs:
    enc: EncoderOutput
    posterior: PosteriorParams
    z: torch.Tensor
    coarse_mel: torch.Tensor
    kl_terms: torch.Tensor
    pn_log_likelihood: torch.Tensor
    pn_latent: torch.Tensor


@dataclass
class InferenceOutputs:
    enc: EncoderOutput
    z: torch.Tensor
    coarse_mel: torch.Tensor
    mel: torch.Tensor


class AcousticModel(nn.Module):
    """Mel-spectrograms inside the model are normalized per channel with corpus statistics."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = LinguisticEncoder(cfg)
        self.vg = VariationalGenerator(cfg)
        self.postnet = PostNet.from_config(cfg)
        self.register_buffer("mel_mean", torch.zeros(cfg.n_mels))
        self.register_buffer("mel_std", torch.ones(cfg.n_mels))

    def set_mel_stats(self, mean, std):
        with torch.no_grad():
            self.mel_mean.copy_(torch.as_tensor(mean, dtype=self.mel_mean.dtype))
            self.mel_std.copy_(torch.as_tensor(std, dtype=self.mel_std.dtype).clamp(min=1e-5))

    def normalize(self, mel):
        return (mel - self.mel_mean) / self.mel_std

    def denormalize(self, mel):
        return mel * self.mel_std + self.mel_mean

    def postnet_condition(self, h_l, coarse_mel, frame_mask):
        # the post-net does not back-propagate into the coarse mel
        cond = torch.cat([h_l, coarse_mel.detach()], dim=-1)
        return (cond * frame_mask[..., None].to(cond.dtype)).transpose(1, 2)

    def forward_train(self, tokens, word_ids, word_durations, mels, noise=None):
        """Teacher-forced pass over normalized ``mels`` ``[B, T, 80]``."""
        enc = self.encoder(tokens, word_ids, word_durations=word_durations)
        frame_mask = enc.frame_mask
        if enc.h_l.shape[1] != mels.shape[1]:
            raise ValueError(f"durations give {enc.h_l.shape[1]} frames but mels have {mels.shape[1]}")
        posterior = self.vg.encode_posterior(mels, enc.h_l, frame_mask)
        if noise is None:
            noise = torch.randn_like(posterior.mu)
        latent_mask = self.vg.latent_mask(frame_mask).to(mels.dtype)
        z = reparameterize(posterior, noise) * latent_mask
        coarse = self.vg.decode(z, enc.h_l, frame_mask)
        kl = self.vg.kl_terms(posterior, z, enc.h_l, frame_mask)
        fm = frame_mask[:, None].to(mels.dtype)
        cond = self.postnet_condition(enc.h_l, coarse, frame_mask)
        ll, pn_z = self.postnet.log_likelihood(mels.transpose(1, 2), cond, fm)
        return TrainOutputs(enc, posterior, z, coarse, kl, ll, pn_z)

    @torch.no_grad()
    def infer(self, tokens, word_ids, generator=None, temperature=None, prior_temperature=1.0, overrides=None, word_durations=None):
        """Synthesize normalized mels.  The prior draw precedes the post-net draw on ``generator``."""
        temperature = self.cfg.temperature if temperature is None else temperature
        enc = self.encoder(tokens, word_ids, word_durations=word_durations, overrides=overrides, pad_multiple=FRAME_MULTIPLE)
        frame_mask = enc.frame_mask
        b, t = frame_mask.shape
        dtype = enc.h_l.dtype
        noise = torch.randn(b, self.cfg.latent_size, t // self.cfg.temporal_stride, generator=generator, dtype=dtype)
        z = self.vg.sample_prior(noise * prior_temperature, enc.h_l, frame_mask)
        coarse = self.vg.decode(z, enc.h_l, frame_mask)
        cond = self.postnet_condition(enc.h_l, coarse, frame_mask)
        fm = frame_mask[:, None].to(dtype)
        mel = self.postnet.sample(cond, fm, temperature=temperature, generator=generator)
        return InferenceOutputs(enc, z, coarse, mel.transpose(1, 2))

    def module_groups(self):
        """Named parameter groups used for parameter reports."""
        enc = self.encoder
        return {
            "linguistic_encoder": [m for name, m in enc.named_children() if name != "duration_predictor"]
            + [enc.pos_kv, enc.pos_q],
            "duration_predictor": [enc.duration_predictor],
            "postnet": [self.postnet],
            "vg_decoder": [self.vg.decoder],
            "vp_flow": [self.vg.vp_flow],
            "vg_encoder": [self.vg.encoder],
        }
