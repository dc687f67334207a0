"""Independent numerical oracles, parameter reports and the ``verify`` suite."""

import math
from dataclasses import dataclass

import numpy as np
import torch

from .config import ModelConfig, load_config
from .corpus import HOP_LENGTH, SAMPLE_RATE
from .model import AcousticModel
from .postnet import PostNet
from .variational import VPFlow

FRAME_SECONDS = HOP_LENGTH / SAMPLE_RATE
HEADLINE_EXCLUDED = ("vg_encoder",)


class SingularJacobianError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# oracles


def numerical_jacobian(fn, x, eps=1e-3):
    """Dense central-difference Jacobian of ``fn`` at ``x`` (flattened), float64."""
    x = x.detach().to(torch.float64)
    n = x.numel()
    if n > 64:
        raise ValueError(f"dense Jacobian limited to 64 dimensions, got {n}")
    flat = x.reshape(-1)
    cols = []
    with torch.no_grad():
        for i in range(n):
            step = torch.zeros_like(flat)
            step[i] = eps
            hi = fn((flat + step).view_as(x)).reshape(-1)
            lo = fn((flat - step).view_as(x)).reshape(-1)
            cols.append((hi - lo) / (2 * eps))
    return torch.stack(cols, dim=1)


def numerical_logdet(fn, x, eps=1e-3):
    """``log|det J|`` of ``fn`` at ``x`` from a central-difference Jacobian."""
    jac = numerical_jacobian(fn, x, eps).numpy()
    sign, logabsdet = np.linalg.slogdet(jac)
    if sign == 0 or not np.isfinite(logabsdet):
        raise SingularJacobianError(f"Jacobian is singular (condition number {np.linalg.cond(jac):.3g})")
    return float(logabsdet)


def gaussian_kl_oracle(mu1, sigma1, mu2, sigma2):
    """Closed-form KL(N(mu1, sigma1) || N(mu2, sigma2)) for diagonal Gaussians, summed over dims."""
    mu1, sigma1, mu2, sigma2 = (np.asarray(a, dtype=np.float64) for a in (mu1, sigma1, mu2, sigma2))
    if np.any(sigma1 <= 0) or np.any(sigma2 <= 0):
        raise ValueError("standard deviations must be positive")
    kl = np.log(sigma2 / sigma1) + (sigma1**2 + (mu1 - mu2) ** 2) / (2 * sigma2**2) - 0.5
    return float(np.sum(kl))


# ---------------------------------------------------------------------------
# parameter counts


@dataclass
class ParamReport:
    parts: dict
    excluded: dict
    total: int

    @property
    def all_parameters(self):
        return self.total + sum(self.excluded.values())

    def rows(self):
        for name, n in self.parts.items():
            yield name, n
        for name, n in self.excluded.items():
            yield f"{name} (excluded)", n
        yield "total", self.total


def _numel(obj):
    if isinstance(obj, torch.nn.Parameter):
        return obj.numel()
    return sum(p.numel() for p in obj.parameters())


def parameter_report(model):
    groups = {name: sum(_numel(m) for m in mods) for name, mods in model.module_groups().items()}
    parts = {k: v for k, v in groups.items() if k not in HEADLINE_EXCLUDED}
    excluded = {k: v for k, v in groups.items() if k in HEADLINE_EXCLUDED}
    report = ParamReport(parts, excluded, sum(parts.values()))
    unique = sum(p.numel() for p in model.parameters())
    if report.all_parameters != unique:
        raise AssertionError(f"module groups cover {report.all_parameters} of {unique} parameters")
    return report


def count_parameters(config):
    """Trainable parameters of a fresh model; the VAE encoder is excluded from ``total``."""
    cfg = load_config(config) if not isinstance(config, ModelConfig) else config
    return parameter_report(AcousticModel(cfg))


# ---------------------------------------------------------------------------
# duration error


@dataclass
class DurationErrorReport:
    word_level_mae: float
    sentence_level_mae: float


def duration_error(predicted, ground_truth):
    """Word MAE in milliseconds and sentence MAE in seconds.

    Both arguments are lists of per-utterance word-duration lists in frames.
    """
    if len(predicted) != len(ground_truth):
        raise ValueError("different number of utterances")
    word_errs, sent_errs = [], []
    for pred, gt in zip(predicted, ground_truth):
        if len(pred) != len(gt):
            raise ValueError(f"utterance has {len(pred)} predicted and {len(gt)} reference words")
        pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
        word_errs.extend(np.abs(pred - gt))
        sent_errs.append(abs(pred.sum() - gt.sum()))
    return DurationErrorReport(
        word_level_mae=float(np.mean(word_errs)) * FRAME_SECONDS * 1000.0,
        sentence_level_mae=float(np.mean(sent_errs)) * FRAME_SECONDS,
    )


# ---------------------------------------------------------------------------
# random toy flows


def _perturb_(module, gen, scale):
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)


def random_toy_postnet(seed, max_dim=64):
    """A float64 post-net with randomized parameters plus an input it can be evaluated on.

    Returns ``(postnet, x [1, C, T], cond [1, Cc, T], mask [1, 1, T])`` with
    ``C * T <= max_dim``.
    """
    rng = np.random.default_rng(seed)
    torch.manual_seed(int(rng.integers(2**31)))
    gen = torch.Generator().manual_seed(int(rng.integers(2**31)))
    while True:
        sq = int(rng.choice([1, 2]))
        channels = int(rng.choice([2, 4, 6, 8])) if sq == 1 else int(rng.choice([1, 2, 3, 4]))
        frames = sq * int(rng.integers(1, 5))
        if channels * frames <= max_dim and (channels * sq) % 2 == 0:
            break
    steps = int(rng.integers(1, 4))
    groups = int(rng.integers(1, steps + 1))
    pn = PostNet(
        channels=channels,
        cond_channels=int(rng.integers(1, 4)),
        hidden=int(rng.choice([4, 8])),
        kernel_size=3,
        n_layers=int(rng.integers(1, 3)),
        n_steps=steps,
        n_groups=groups,
        squeeze=sq,
    ).double()
    _perturb_(pn, gen, 0.3)
    with torch.no_grad():
        for step in pn.steps:
            step.actnorm.logs.copy_(torch.randn(step.actnorm.logs.shape, generator=gen, dtype=torch.float64) * 0.5)
            step.actnorm.initialized.fill_(True)
    x = torch.randn(1, channels, frames, generator=gen, dtype=torch.float64)
    cond = torch.randn(1, pn.steps[0].coupling.cond_proj.in_channels // sq, frames, generator=gen, dtype=torch.float64)
    mask = torch.ones(1, 1, frames, dtype=torch.float64)
    return pn, x, cond, mask


def random_toy_vpflow(seed, max_dim=6):
    rng = np.random.default_rng(seed)
    torch.manual_seed(int(rng.integers(2**31)))
    gen = torch.Generator().manual_seed(int(rng.integers(2**31)))
    channels = int(rng.choice([2, 4, 6]))
    frames = max(1, max_dim // channels - int(rng.integers(0, 2)))
    flow = VPFlow(channels, hidden=4, kernel_size=3, n_layers=2, n_steps=int(rng.integers(1, 4)), cond_channels=3).double()
    _perturb_(flow, gen, 0.5)
    z = torch.randn(1, channels, frames, generator=gen, dtype=torch.float64)
    cond = torch.randn(1, 3, frames, generator=gen, dtype=torch.float64)
    mask = torch.ones(1, 1, frames, dtype=torch.float64)
    return flow, z, cond, mask


def logdet_agreement(seed, eps=1e-3):
    """(analytic, numerical) post-net log-det on a random toy configuration."""
    pn, x, cond, mask = random_toy_postnet(seed)
    with torch.no_grad():
        _, analytic = pn(x, cond, mask)
    numerical = numerical_logdet(lambda v: pn(v, cond, mask)[0], x, eps)
    return float(analytic), numerical


def vp_volume(seed, eps=1e-3):
    """Numerical ``|det J|`` of a random toy VP-flow."""
    flow, z, cond, mask = random_toy_vpflow(seed)
    return math.exp(numerical_logdet(lambda v: flow(v, cond, mask), z, eps))


def kl_agreement(seed, n_samples=10_000, latent=16, frames=4):
    """(Monte-Carlo KL with an identity flow, closed-form KL) for random diagonal Gaussians."""
    from .variational import PosteriorParams, gaussian_logpdf, reparameterize, standard_normal_logpdf

    gen = torch.Generator().manual_seed(seed)
    mu = torch.randn(1, latent, frames, generator=gen, dtype=torch.float64)
    log_sigma = (torch.rand(1, latent, frames, generator=gen, dtype=torch.float64) - 0.5)
    params = PosteriorParams(mu.expand(n_samples, -1, -1), log_sigma.expand(n_samples, -1, -1))
    noise = torch.randn(n_samples, latent, frames, generator=gen, dtype=torch.float64)
    z = reparameterize(params, noise)
    flow = VPFlow(latent, 4, 3, 1, 1, 1).double()  # zero-init couplings: a pure channel flip
    with torch.no_grad():
        log_p = standard_normal_logpdf(flow(z, torch.zeros(n_samples, 1, frames, dtype=torch.float64), torch.ones(1, 1, frames, dtype=torch.float64)))
    mc = float((gaussian_logpdf(z, params) - log_p).sum((1, 2)).mean())
    oracle = gaussian_kl_oracle(mu.numpy(), log_sigma.exp().numpy(), 0.0, 1.0)
    return mc, oracle


# ---------------------------------------------------------------------------
# verify suite


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""

    def row(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name}\t{status}\t{self.value:.6g}\t{self.tolerance:.3g}\t{self.detail}"


REPORT_HEADER = "check\tstatus\tvalue\ttolerance\tdetail"


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-12)


def oracle_checks(n_draws=10):
    """Model-independent flow and KL oracles."""
    worst = max(_rel(*logdet_agreement(s)) for s in range(n_draws))
    yield CheckResult("postnet_logdet_vs_numerical", worst < 1e-3, worst, 1e-3, f"{n_draws} toy configs, max rel err")
    worst = max(abs(vp_volume(s) - 1.0) for s in range(n_draws))
    yield CheckResult("vpflow_volume_preservation", worst < 1e-3, worst, 1e-3, f"{n_draws} toy configs, max |det-1|")
    worst = max(_rel(*kl_agreement(s)) for s in range(max(2, n_draws // 2)))
    yield CheckResult("kl_monte_carlo_vs_closed_form", worst < 0.02, worst, 0.02, "10k samples, max rel err")


def model_checks(model, vocab, text=None, seed=1234):
    """Round trips, mask invariants and determinism on a loaded model."""
    from .synth import SynthesisRequest, Synthesizer

    gen = torch.Generator().manual_seed(seed)
    cfg = model.cfg
    t = 16
    mel = torch.randn(4, cfg.n_mels, t, generator=gen)
    cond = torch.randn(4, cfg.hidden_size + cfg.n_mels, t, generator=gen)
    mask = torch.ones(4, 1, t)
    with torch.no_grad():
        z, _ = model.postnet(mel, cond, mask)
        err = float((model.postnet.inverse(z, cond, mask) - mel).abs().max())
    yield CheckResult("postnet_round_trip", err < 1e-3, err, 1e-3, "max abs")
    lat = torch.randn(4, cfg.latent_size, t // 4, generator=gen)
    vcond = torch.randn(4, cfg.hidden_size, t // 4, generator=gen)
    vmask = torch.ones(4, 1, t // 4)
    with torch.no_grad():
        back = model.vg.vp_flow.inverse(model.vg.vp_flow(lat, vcond, vmask), vcond, vmask)
    err = float((back - lat).abs().max())
    yield CheckResult("vpflow_round_trip", err < 1e-3, err, 1e-3, "max abs")

    synth = Synthesizer(model, vocab)
    if text is None:
        phones = [p for p in vocab if p not in ("<pad>",)][:5]
        text = " ".join(phones[1:3]) + " | SIL | " + " ".join(phones[3:5] or phones[1:2])
    req = SynthesisRequest(text, seed=seed)
    a, b = synth.synthesize(req), synth.synthesize(req)
    same = bool(np.array_equal(a.mel.frames, b.mel.frames))
    yield CheckResult("synthesis_determinism", same, 0.0 if same else 1.0, 0.0, "bit-identical mels")
    outside = float(np.abs(a.attention[~a.w2p_mask]).max()) if (~a.w2p_mask).any() else 0.0
    yield CheckResult("attention_block_structure", outside == 0.0, outside, 0.0, "max weight outside word mask")
    law = a.mel.n_frames == sum(a.used_word_durations) and a.mel.n_frames % 4 == 0
    yield CheckResult("frame_count_law", law, float(a.mel.n_frames), 0.0, f"durations {a.used_word_durations}")


def run_oracle_suite(model=None, vocab=None, n_draws=10):
    results = list(oracle_checks(n_draws))
    if model is not None:
        results.extend(model_checks(model, vocab))
    return results
