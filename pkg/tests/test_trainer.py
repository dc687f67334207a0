import json
import math

import numpy as np
import pytest
import torch

from mixtts.config import load_config
from mixtts.model import AcousticModel
from mixtts.trainer import (
    Batch,
    CheckpointError,
    LossBreakdown,
    NonFiniteLossError,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    compute_losses,
    fit,
    kl_weight_at_step,
    load_checkpoint,
    lr_at_step,
    read_checkpoint,
    restore_trainer,
    save_checkpoint,
)

from conftest import random_batch


def make_batch(lengths=(2, 3), seed=0, dtype=torch.float32):
    tokens, word_ids, durs = random_batch(16, list(lengths), seed)
    t = int(durs.sum(1).max())
    mels = torch.randn(len(lengths), t, 80, generator=torch.Generator().manual_seed(seed), dtype=dtype)
    for i in range(len(lengths)):
        mels[i, int(durs[i].sum()) :] = 0
    return Batch(tokens, word_ids, durs, mels)


def _noise(model, batch, seed=0):
    t = batch.mels.shape[1] // 4
    return torch.randn(batch.mels.shape[0], model.cfg.latent_size, t,
                       generator=torch.Generator().manual_seed(seed), dtype=batch.mels.dtype)


# -- losses -------------------------------------------------------------------------------


def test_loss_decomposition():
    lb = LossBreakdown(torch.tensor(1.0), torch.tensor(2.0), torch.tensor(3.0), torch.tensor(-4.0), 0.5)
    assert float(lb.total) == 1 + 2 + 0.5 * 3 - 4
    assert lb.as_dict()["total"] == pytest.approx(0.5)


def test_l_dur_zero_when_predictions_match(micro_model):
    # one phoneme per word, every word 4 frames; predictor pinned to log(4)
    batch = Batch(torch.tensor([[3, 5, 7]]), torch.tensor([[0, 1, 2]]), torch.tensor([[4, 4, 4]]),
                  torch.randn(1, 12, 80))
    with torch.no_grad():
        micro_model.encoder.duration_predictor.proj.weight.zero_()
        micro_model.encoder.duration_predictor.proj.bias.fill_(math.log(4))
        losses = compute_losses(batch, micro_model, noise=_noise(micro_model, batch))
    assert float(losses.l_dur) == pytest.approx(0.0, abs=1e-12)


def test_l_vg_zero_when_coarse_equals_truth(micro_model):
    batch = make_batch()
    batch.mels.zero_()
    with torch.no_grad():
        micro_model.vg.decoder.proj.weight.zero_()
        micro_model.vg.decoder.proj.bias.zero_()
        losses = compute_losses(batch, micro_model, noise=_noise(micro_model, batch))
    assert float(losses.l_vg) == 0.0


def test_l_pn_identity_flow_closed_form(micro_model):
    model = micro_model.double()
    with torch.no_grad():
        for s in model.postnet.steps:
            s.invconv.weight.copy_(torch.eye(s.invconv.weight.shape[0], dtype=torch.float64))
    batch = make_batch(dtype=torch.float64)
    with torch.no_grad():
        losses = compute_losses(batch, model, noise=_noise(model, batch))
    x = batch.mels.numpy()
    valid = np.concatenate([x[i, : int(batch.word_durations[i].sum())] for i in range(x.shape[0])])
    expected = np.mean(0.5 * (valid**2 + np.log(2 * np.pi)))
    assert float(losses.l_pn) == pytest.approx(expected, abs=1e-5)


def _pad(x, n, dim, value=0):
    shape = list(x.shape)
    shape[dim] = n - x.shape[dim]
    return torch.cat([x, torch.full(shape, value, dtype=x.dtype)], dim)


def test_padding_leaves_losses_unchanged(micro_model):
    """Appending padded phonemes to every item leaves each loss term unchanged."""
    model = micro_model.double()
    batch = make_batch((2, 4), seed=3, dtype=torch.float64)
    noise = _noise(model, batch, 1)
    p = batch.tokens.shape[1] + 3
    padded = Batch(_pad(batch.tokens, p, 1), _pad(batch.word_ids, p, 1, -1), batch.word_durations, batch.mels)
    with torch.no_grad():
        a = compute_losses(batch, model, noise=noise)
        b = compute_losses(padded, model, noise=noise)
    for name in ("l_dur", "l_vg", "l_kl", "l_pn"):
        assert abs(float(getattr(a, name)) - float(getattr(b, name))) < 1e-6, name


def test_item_alone_equals_item_in_batch(micro_model):
    """A short utterance gives the same per-item terms alone and padded next to a longer one."""
    model = micro_model.double()
    long_b = make_batch((5,), seed=5, dtype=torch.float64)
    short_b = make_batch((2,), seed=6, dtype=torch.float64)
    p = max(long_b.tokens.shape[1], short_b.tokens.shape[1])
    w = long_b.word_durations.shape[1]
    t_long, t_short = long_b.mels.shape[1], short_b.mels.shape[1]
    assert t_long > t_short and w > short_b.word_durations.shape[1]
    both = Batch(
        torch.cat([_pad(long_b.tokens, p, 1), _pad(short_b.tokens, p, 1)]),
        torch.cat([_pad(long_b.word_ids, p, 1, -1), _pad(short_b.word_ids, p, 1, -1)]),
        torch.cat([long_b.word_durations, _pad(short_b.word_durations, w, 1)]),
        torch.cat([long_b.mels, _pad(short_b.mels, t_long, 1)]),
    )
    n_short = _noise(model, short_b, 8)
    noise = torch.cat([_noise(model, long_b, 7), _pad(n_short, t_long // 4, 2)])
    with torch.no_grad():
        ob = model.forward_train(both.tokens, both.word_ids, both.word_durations, both.mels, noise=noise)
        os_ = model.forward_train(short_b.tokens, short_b.word_ids, short_b.word_durations, short_b.mels, noise=n_short)
    torch.testing.assert_close(ob.coarse_mel[1, :t_short], os_.coarse_mel[0], rtol=0, atol=1e-6)
    torch.testing.assert_close(ob.pn_log_likelihood[1], os_.pn_log_likelihood[0], rtol=0, atol=1e-6)
    torch.testing.assert_close(ob.kl_terms[1].sum(), os_.kl_terms[0].sum(), rtol=0, atol=1e-6)
    assert torch.all(ob.coarse_mel[1, t_short:] == 0)


def test_nan_term_is_named(micro_model):
    batch = make_batch()
    batch.mels[0, 0, 0] = float("nan")
    with pytest.raises((NonFiniteLossError, FloatingPointError), match="l_|post-net"):
        compute_losses(batch, micro_model, noise=_noise(micro_model, batch))


# -- schedules ---------------------------------------------------------------------------------


def test_lr_peak_at_warmup():
    rates = [lr_at_step(s, 200, 192) for s in range(1, 2000)]
    assert int(np.argmax(rates)) + 1 == 200
    assert np.all(np.diff(rates[:199]) > 0) and np.all(np.diff(rates[199:]) < 0)


def test_lr_four_warmups_is_half_peak():
    assert lr_at_step(800, 200, 192) == pytest.approx(lr_at_step(200, 200, 192) / 2)
    assert lr_at_step(16000, 4000, 192) == pytest.approx(192**-0.5 * 4000**-0.5 / 2)


def test_lr_d_model_scaling():
    assert lr_at_step(50, 200, 384) / lr_at_step(50, 200, 192) == pytest.approx(2**-0.5)
    with pytest.raises(ValueError):
        lr_at_step(0, 200, 192)


def test_kl_ramp():
    assert [kl_weight_at_step(s, 200) for s in (0, 50, 100, 200, 500)] == [0, 0.25, 0.5, 1, 1]
    assert kl_weight_at_step(3, 0) == 1.0


def test_train_config_validation(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(betas=(0.9, 1.0))
    with pytest.raises(ValueError):
        TrainConfig(max_steps=0)
    (tmp_path / "t.yaml").write_text("max_steps: 7\nbetas: [0.8, 0.9]\n")
    tc = TrainConfig.from_file(tmp_path / "t.yaml")
    assert tc.max_steps == 7 and tc.betas == (0.8, 0.9) and tc.eps == 1e-9


# -- training loop -------------------------------------------------------------------------------


def test_same_seed_same_curve(toy_corpus, tmp_path):
    tc = TrainConfig(batch_size=4, max_steps=6, warmup_steps=3, kl_anneal_steps=3)
    a = fit(toy_corpus, load_config("micro"), tc, out_dir=tmp_path / "a")
    b = fit(toy_corpus, load_config("micro"), tc, out_dir=tmp_path / "b")
    assert a.history == b.history
    lines = (tmp_path / "a/train_log.jsonl").read_text().splitlines()
    assert len(lines) == 6
    rec = json.loads(lines[-1])
    assert set(rec) >= {"step", "l_dur", "l_vg", "l_kl", "l_pn", "kl_weight", "total"}
    assert rec["total"] == pytest.approx(rec["l_dur"] + rec["l_vg"] + rec["kl_weight"] * rec["l_kl"] + rec["l_pn"])


def test_divergence_aborts_with_dump(toy_corpus, tmp_path):
    tc = TrainConfig(batch_size=2, max_steps=3, divergence_threshold=-1e9)
    with pytest.raises(TrainingDiverged):
        fit(toy_corpus, load_config("micro"), tc, out_dir=tmp_path)
    dump = json.loads((tmp_path / "divergence_dump.json").read_text())
    assert dump["step"] == 1


def test_postnet_initialized_before_training(toy_corpus):
    tr = fit(toy_corpus, load_config("micro"), TrainConfig(batch_size=2, max_steps=1))
    assert tr.model.postnet.initialized


# -- checkpoints ---------------------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(micro_model, tmp_path):
    tc = TrainConfig(batch_size=2, max_steps=2)
    tr = Trainer(micro_model, tc, ["<pad>", "SIL"])
    batch = make_batch()
    tr.initialize(batch)
    tr.train_step(batch, noise=_noise(micro_model, batch))
    save_checkpoint(tmp_path / "a.ckpt", tr)
    model, vocab, payload = load_checkpoint(tmp_path / "a.ckpt", micro_model.cfg)
    assert vocab == ["<pad>", "SIL"] and payload["step"] == 1
    for (k, v), (k2, v2) in zip(micro_model.state_dict().items(), model.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    micro_model.eval()
    with torch.no_grad():
        g1, g2 = torch.Generator().manual_seed(3), torch.Generator().manual_seed(3)
        a = micro_model.infer(batch.tokens[:1], batch.word_ids[:1], generator=g1)
        b = model.infer(batch.tokens[:1], batch.word_ids[:1], generator=g2)
    assert torch.equal(a.mel, b.mel)
    # optimizer moments survive
    tr2 = restore_trainer(tmp_path / "a.ckpt", tc)
    s1 = tr.optimizer.state_dict()["state"]
    s2 = tr2.optimizer.state_dict()["state"]
    assert all(torch.equal(s1[k]["exp_avg"], s2[k]["exp_avg"]) for k in s1)
    save_checkpoint(tmp_path / "b.ckpt", tr2)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_corrupted_checkpoint(micro_model, tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", micro_model, ["<pad>"])
    raw = bytearray((tmp_path / "a.ckpt").read_bytes())
    raw[-100] ^= 0xFF
    (tmp_path / "b.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        read_checkpoint(tmp_path / "b.ckpt")
    (tmp_path / "c.ckpt").write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "c.ckpt")


def test_fingerprint_mismatch(tmp_path):
    torch.manual_seed(0)
    model = AcousticModel(load_config("micro"))
    save_checkpoint(tmp_path / "m.ckpt", model, ["<pad>"])
    with pytest.raises(CheckpointError, match="fingerprint"):
        load_checkpoint(tmp_path / "m.ckpt", load_config("micro").replace(hidden_size=16, phoneme_embedding=16))


@pytest.mark.slow
def test_normal_checkpoint_refuses_small(tmp_path):
    torch.manual_seed(0)
    save_checkpoint(tmp_path / "n.ckpt", AcousticModel(load_config("normal")), ["<pad>"])
    with pytest.raises(CheckpointError, match="fingerprint"):
        load_checkpoint(tmp_path / "n.ckpt", load_config("small"))
