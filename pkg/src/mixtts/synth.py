"""Inference: phoneme text in, 80-bin log-mel frames out."""

import math
import shlex
import shutil
import subprocess
from dataclasses import dataclass, field

import numpy as np
import torch

from .corpus import FRAME_MULTIPLE, MelSpectrogram, parse_phoneme_text, save_mel
from .linguistic import build_w2p_mask
from .trainer import load_checkpoint


class VocoderError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthesisRequest:
    phoneme_text: str
    seed: int = 1234
    temperature: float = 0.8
    prior_temperature: float = 1.0
    duration_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.temperature < 0 or self.prior_temperature < 0:
            raise ValueError("temperatures must be non-negative")


@dataclass
class SynthesisResult:
    mel: MelSpectrogram
    coarse_mel: MelSpectrogram
    attention: np.ndarray  # [T, P], rows sum to 1
    w2p_mask: np.ndarray  # [T, P] bool
    phonemes: tuple
    word_ids: tuple
    used_word_durations: list


def expected_frames(word_durations):
    return FRAME_MULTIPLE * math.ceil(sum(word_durations) / FRAME_MULTIPLE)


class Synthesizer:
    def __init__(self, model, vocab):
        self.model = model.eval()
        self.vocab = list(vocab)

    @classmethod
    def from_checkpoint(cls, path, expected_config=None):
        model, vocab, _ = load_checkpoint(path, expected_config)
        return cls(model, vocab)

    def synthesize(self, request: SynthesisRequest) -> SynthesisResult:
        seq = parse_phoneme_text(request.phoneme_text, self.vocab)
        tokens = torch.tensor([seq.tokens])
        word_ids = torch.tensor([seq.word_ids])
        gen = torch.Generator().manual_seed(int(request.seed))
        out = self.model.infer(
            tokens,
            word_ids,
            generator=gen,
            temperature=request.temperature,
            prior_temperature=request.prior_temperature,
            overrides=dict(request.duration_overrides),
        )
        mel = self.model.denormalize(out.mel)[0].numpy().astype(np.float32)
        coarse = self.model.denormalize(out.coarse_mel)[0].numpy().astype(np.float32)
        enc = out.enc
        return SynthesisResult(
            mel=MelSpectrogram(mel),
            coarse_mel=MelSpectrogram(coarse),
            attention=enc.attention[0].numpy(),
            w2p_mask=build_w2p_mask(word_ids[0], enc.frame_word_ids[0]).numpy(),
            phonemes=seq.phonemes,
            word_ids=seq.word_ids,
            used_word_durations=[int(d) for d in enc.word_durations[0]],
        )

    def sample_grid(self, request, temperatures, seeds):
        """``{(temperature, seed): SynthesisResult}`` over the cartesian product."""
        grid = {}
        for temp in temperatures:
            for seed in seeds:
                req = SynthesisRequest(
                    request.phoneme_text, seed, temp, request.prior_temperature, request.duration_overrides
                )
                grid[(temp, seed)] = self.synthesize(req)
        return grid


def synthesize(request, checkpoint):
    return Synthesizer.from_checkpoint(checkpoint).synthesize(request)


def vocode(mel, mel_path, command):
    """Write ``mel`` to ``mel_path`` and run an external vocoder on it.

    ``command`` is a shell-style string; ``{mel}`` is replaced by the mel path,
    otherwise the path is appended.  Returns the vocoder's exit code.
    """
    args = shlex.split(command)
    if not args:
        raise VocoderError("empty vocoder command")
    if shutil.which(args[0]) is None:
        raise VocoderError(f"vocoder executable not found: {args[0]!r}")
    save_mel(mel, mel_path)
    if any("{mel}" in a for a in args):
        args = [a.replace("{mel}", str(mel_path)) for a in args]
    else:
        args.append(str(mel_path))
    return subprocess.run(args, check=False).returncode
