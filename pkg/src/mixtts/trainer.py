"""Losses, learning-rate schedule, training loop and checkpoints."""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from .config import ModelConfig
from .corpus import parse_phoneme_text
from .model import AcousticModel

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MIXTTS-CKPT1\n"


class NonFiniteLossError(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    max_steps: int = 2000
    warmup_steps: int = 200
    kl_anneal_steps: int = 200
    lr_scale: float = 1.0
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-9
    grad_clip: float = 1.0
    seed: int = 1234
    checkpoint_interval: int = 1000
    divergence_threshold: float = 1e4

    def __post_init__(self):
        for name in ("batch_size", "max_steps", "warmup_steps", "checkpoint_interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.kl_anneal_steps < 0:
            raise ValueError("kl_anneal_steps must be non-negative")
        if not all(0 < b < 1 for b in self.betas):
            raise ValueError("Adam betas must lie in (0, 1)")

    @classmethod
    def from_file(cls, path):
        data = yaml.safe_load(Path(path).read_text()) or {}
        if "betas" in data:
            data["betas"] = tuple(data["betas"])
        return cls(**data)


@dataclass
class LossBreakdown:
    l_dur: torch.Tensor
    l_vg: torch.Tensor
    l_kl: torch.Tensor
    l_pn: torch.Tensor
    kl_weight: float
    total: torch.Tensor = field(init=False)

    def __post_init__(self):
        self.total = self.l_dur + self.l_vg + self.kl_weight * self.l_kl + self.l_pn

    def as_dict(self):
        return {
            "l_dur": float(torch.as_tensor(self.l_dur).detach()),
            "l_vg": float(torch.as_tensor(self.l_vg).detach()),
            "l_kl": float(torch.as_tensor(self.l_kl).detach()),
            "l_pn": float(torch.as_tensor(self.l_pn).detach()),
            "kl_weight": float(torch.as_tensor(self.kl_weight).detach()),
            "total": float(torch.as_tensor(self.total).detach()),
        }


@dataclass
class Batch:
    tokens: torch.Tensor
    word_ids: torch.Tensor
    word_durations: torch.Tensor
    mels: torch.Tensor
    ids: tuple = ()

    def to(self, dtype):
        return Batch(self.tokens, self.word_ids, self.word_durations, self.mels.to(dtype), self.ids)


def collate(items, pad_frames_to=None):
    """Pad ``(sequence, word_durations, normalized frames)`` triples into a :class:`Batch`."""
    b = len(items)
    p_max = max(len(seq) for seq, _, _ in items)
    w_max = max(seq.word_count for seq, _, _ in items)
    t_max = max(frames.shape[0] for _, _, frames in items)
    if pad_frames_to:
        t_max = max(t_max, pad_frames_to)
    tokens = torch.zeros(b, p_max, dtype=torch.long)
    word_ids = torch.full((b, p_max), -1, dtype=torch.long)
    durations = torch.zeros(b, w_max, dtype=torch.long)
    mels = torch.zeros(b, t_max, items[0][2].shape[1])
    for i, (seq, durs, frames) in enumerate(items):
        tokens[i, : len(seq)] = torch.tensor(seq.tokens)
        word_ids[i, : len(seq)] = torch.tensor(seq.word_ids)
        durations[i, : len(durs)] = torch.tensor(durs)
        mels[i, : frames.shape[0]] = torch.as_tensor(frames)
    return Batch(tokens, word_ids, durations, mels)


def _masked_mean(x, mask):
    return (x * mask).sum() / mask.sum()


def compute_losses(batch, model, noise=None, kl_weight=1.0):
    """All four training terms, each averaged over unpadded elements.

    ``l_dur`` compares word log-durations on the ``log(1 + frames)`` scale;
    ``l_pn`` is reported in nats per frame-channel.
    """
    out = model.forward_train(batch.tokens, batch.word_ids, batch.word_durations, batch.mels, noise=noise)
    dtype = batch.mels.dtype
    word_mask = out.enc.word_mask.to(dtype)
    target = torch.log1p(batch.word_durations.to(dtype))
    l_dur = _masked_mean((out.enc.word_log_durations - target) ** 2, word_mask)

    frame_mask = out.enc.frame_mask[..., None].to(dtype)
    n_mels = batch.mels.shape[-1]
    l_vg = _masked_mean((out.coarse_mel - batch.mels).abs(), frame_mask) / n_mels

    latent_mask = model.vg.latent_mask(out.enc.frame_mask).to(dtype)
    l_kl = out.kl_terms.sum() / (latent_mask.sum() * out.kl_terms.shape[1])

    l_pn = -out.pn_log_likelihood.sum() / (frame_mask.sum() * n_mels)

    losses = LossBreakdown(l_dur, l_vg, l_kl, l_pn, kl_weight)
    for name in ("l_dur", "l_vg", "l_kl", "l_pn"):
        if not torch.isfinite(getattr(losses, name)):
            raise NonFiniteLossError(f"{name} is not finite")
    return losses


def lr_at_step(step, warmup, d_model, scale=1.0):
    """Transformer schedule ``d^-0.5 * min(s^-0.5, s * warmup^-1.5)``."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def kl_weight_at_step(step, anneal_steps):
    """Linear ramp from 0 at step 0 to 1 at ``anneal_steps``."""
    if anneal_steps <= 0:
        return 1.0
    return min(1.0, step / anneal_steps)


def corpus_mel_stats(frames_list):
    stacked = np.concatenate(frames_list, axis=0).astype(np.float64)
    return stacked.mean(0), stacked.std(0)


def load_training_items(manifest, vocab, model):
    """Parse and normalize every record of ``manifest``."""
    items = []
    raw = []
    for rec in manifest.records:
        frames, durs = manifest.load_record(rec)
        raw.append((rec, frames, durs))
    mean, std = model.mel_mean.numpy(), model.mel_std.numpy()
    for rec, frames, durs in raw:
        seq = parse_phoneme_text(rec.phoneme_text, vocab)
        items.append((seq, durs, ((frames - mean) / std).astype(np.float32)))
    return items, raw


class Trainer:
    def __init__(self, model, config: TrainConfig, vocab):
        self.model = model
        self.config = config
        self.vocab = list(vocab)
        self.step = 0
        self.optimizer = torch.optim.Adam(
            model.parameters(), lr=1.0, betas=tuple(config.betas), eps=config.eps
        )
        self.history = []

    def current_lr(self):
        return lr_at_step(max(self.step, 1), self.config.warmup_steps, self.model.cfg.hidden_size, self.config.lr_scale)

    def initialize(self, batch):
        """Data-dependent post-net init on the first batch."""
        self.model.eval()
        with torch.no_grad():
            enc = self.model.encoder(batch.tokens, batch.word_ids, word_durations=batch.word_durations)
            posterior = self.model.vg.encode_posterior(batch.mels, enc.h_l, enc.frame_mask)
            coarse = self.model.vg.decode(posterior.mu, enc.h_l, enc.frame_mask)
            cond = self.model.postnet_condition(enc.h_l, coarse, enc.frame_mask)
            fm = enc.frame_mask[:, None].to(batch.mels.dtype)
            self.model.postnet.data_dependent_init(batch.mels.transpose(1, 2), cond, fm)

    def train_step(self, batch, noise=None):
        self.model.train()
        self.step += 1
        for group in self.optimizer.param_groups:
            group["lr"] = self.current_lr()
        kl_weight = kl_weight_at_step(self.step, self.config.kl_anneal_steps)
        self.optimizer.zero_grad(set_to_none=True)
        losses = compute_losses(batch, self.model, noise=noise, kl_weight=kl_weight)
        if float(losses.total.detach()) > self.config.divergence_threshold:
            raise TrainingDiverged(f"total loss {float(losses.total.detach()):.4g} at step {self.step}: {losses.as_dict()}")
        losses.total.backward()
        torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.optimizer.step()
        record = {"step": self.step, "lr": self.current_lr(), **losses.as_dict()}
        self.history.append(record)
        return losses


def fit(manifest, model_config: ModelConfig, train_config: TrainConfig, out_dir=None, log_file=None):
    """Train from scratch on ``manifest`` and return the :class:`Trainer`.

    Batches are drawn in a seeded order; two runs with the same seed give the
    same loss curve.
    """
    torch.manual_seed(train_config.seed)
    vocab = list(manifest.phoneme_vocab)
    model_config = model_config.replace(vocab_size=max(model_config.vocab_size, len(vocab)))
    model = AcousticModel(model_config)
    _, raw = load_training_items(manifest, vocab, model)
    mean, std = corpus_mel_stats([f for _, f, _ in raw])
    model.set_mel_stats(mean, std)
    items, _ = load_training_items(manifest, vocab, model)
    trainer = Trainer(model, train_config, vocab)

    gen = torch.Generator().manual_seed(train_config.seed)
    order = []

    def next_batch():
        nonlocal order
        if len(order) < train_config.batch_size:
            order = order + torch.randperm(len(items), generator=gen).tolist()
        idx, order = order[: train_config.batch_size], order[train_config.batch_size :]
        return collate([items[i] for i in idx])

    trainer.initialize(collate(items[: train_config.batch_size]))
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_path = Path(log_file) if log_file else (out_dir / "train_log.jsonl" if out_dir else None)
    log_fh = open(log_path, "w") if log_path else None
    try:
        while trainer.step < train_config.max_steps:
            try:
                trainer.train_step(next_batch())
            except (TrainingDiverged, NonFiniteLossError):
                log.error("training diverged at step %d", trainer.step)
                if out_dir:
                    dump = {"history_tail": trainer.history[-50:], "step": trainer.step}
                    (out_dir / "divergence_dump.json").write_text(json.dumps(dump, indent=1))
                raise
            if log_fh:
                log_fh.write(json.dumps(trainer.history[-1]) + "\n")
            if out_dir and trainer.step % train_config.checkpoint_interval == 0:
                save_checkpoint(out_dir / f"step{trainer.step:07d}.ckpt", trainer)
                log.info("step %d: %s", trainer.step, trainer.history[-1])
    finally:
        if log_fh:
            log_fh.close()
    if out_dir:
        save_checkpoint(out_dir / "final.ckpt", trainer)
    return trainer


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout: ``MIXTTS-CKPT1\n``, 64 hex chars of SHA-256 over the payload, ``\n``,
# then the payload: a u64 LE header length, a canonical JSON header, and the
# raw little-endian bytes of every tensor in header order.  The header holds
# config text, fingerprint, step, vocab, optimizer hyper-parameters and a
# (name, dtype, shape, offset, nbytes) entry per tensor.  Saving the same
# state twice gives identical bytes.

_DTYPES = {str(d): d for d in (torch.float32, torch.float64, torch.float16, torch.int64, torch.int32, torch.bool, torch.uint8)}


def _pack(meta, tensors):
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        raw = t.detach().cpu().contiguous().reshape(-1).view(torch.uint8).numpy().tobytes()
        entries.append([name, str(t.dtype), list(t.shape), offset, len(raw)])
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    return len(header).to_bytes(8, "little") + header + b"".join(chunks)


def _unpack(data):
    n = int.from_bytes(data[:8], "little")
    header = json.loads(data[8 : 8 + n])
    body = memoryview(data)[8 + n :]
    tensors = {}
    for name, dtype, shape, offset, nbytes in header["tensors"]:
        buf = bytearray(body[offset : offset + nbytes])
        flat = torch.frombuffer(buf, dtype=torch.uint8) if nbytes else torch.empty(0, dtype=torch.uint8)
        tensors[name] = flat.view(_DTYPES[dtype]).reshape(shape).clone()
    return header["meta"], tensors


def _split_optimizer(state):
    tensors, plain = {}, {}
    for idx, slots in state["state"].items():
        for key, value in slots.items():
            if torch.is_tensor(value):
                tensors[f"optimizer/{idx}/{key}"] = value
            else:
                plain[f"{idx}/{key}"] = value
    return tensors, {"param_groups": state["param_groups"], "plain": plain}


def _join_optimizer(tensors, meta):
    state = {}
    for name, value in tensors.items():
        _, idx, key = name.split("/", 2)
        state.setdefault(int(idx), {})[key] = value
    for name, value in meta["plain"].items():
        idx, key = name.split("/", 1)
        state.setdefault(int(idx), {})[key] = value
    groups = [{k: tuple(v) if k == "betas" else v for k, v in g.items()} for g in meta["param_groups"]]
    return {"state": state, "param_groups": groups}


def save_checkpoint(path, trainer_or_model, vocab=None, step=0, optimizer=None):
    if isinstance(trainer_or_model, Trainer):
        model = trainer_or_model.model
        vocab = trainer_or_model.vocab
        step = trainer_or_model.step
        optimizer = trainer_or_model.optimizer
    else:
        model = trainer_or_model
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    opt_meta = None
    if optimizer is not None:
        opt_tensors, opt_meta = _split_optimizer(optimizer.state_dict())
        tensors.update(opt_tensors)
    meta = {
        "config": model.cfg.canonical_text(),
        "fingerprint": model.cfg.fingerprint(),
        "step": int(step),
        "vocab": list(vocab or []),
        "optimizer": opt_meta,
    }
    data = _pack(meta, tensors)
    digest = hashlib.sha256(data).hexdigest().encode("ascii")
    Path(path).write_bytes(CKPT_MAGIC + digest + b"\n" + data)


def read_checkpoint(path, expected_config=None):
    """Verify and decode a checkpoint into a payload dict (model/optimizer state included)."""
    raw = Path(path).read_bytes()
    head = len(CKPT_MAGIC) + 65
    if not raw.startswith(CKPT_MAGIC) or len(raw) < head + 8:
        raise CheckpointError(f"{path}: not a checkpoint file")
    digest, data = raw[len(CKPT_MAGIC) : head - 1], raw[head:]
    if hashlib.sha256(data).hexdigest().encode("ascii") != digest:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted)")
    meta, tensors = _unpack(data)
    if expected_config is not None and meta["fingerprint"] != expected_config.fingerprint():
        raise CheckpointError(f"{path}: config fingerprint does not match the requested config")
    model_state = {k[len("model/") :]: v for k, v in tensors.items() if k.startswith("model/")}
    optimizer = None
    if meta["optimizer"] is not None:
        opt = {k: v for k, v in tensors.items() if k.startswith("optimizer/")}
        optimizer = _join_optimizer(opt, meta["optimizer"])
    return {**{k: meta[k] for k in ("config", "fingerprint", "step", "vocab")},
            "model": model_state, "optimizer": optimizer}


def load_checkpoint(path, expected_config=None):
    """Rebuild ``(model, vocab, payload)``; the model is in eval mode."""
    payload = read_checkpoint(path, expected_config)
    cfg = ModelConfig.from_dict(yaml.safe_load(payload["config"]))
    model = AcousticModel(cfg)
    model.load_state_dict(payload["model"])
    model.eval()
    return model, payload["vocab"], payload


def restore_trainer(path, train_config, expected_config=None):
    model, vocab, payload = load_checkpoint(path, expected_config)
    trainer = Trainer(model, train_config, vocab)
    if payload["optimizer"] is not None:
        trainer.optimizer.load_state_dict(payload["optimizer"])
    trainer.step = payload["step"]
    return trainer
