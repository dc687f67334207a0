"""Command-line entry point: ``mixtts {synth,train,count-params,verify,make-toy}``."""

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config
from .corpus import CorpusError, VocabularyError, make_toy_corpus, read_manifest, save_mel

log = logging.getLogger("mixtts")


def _override(text):
    try:
        idx, frames = text.split("=")
        return int(idx), int(frames)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected IDX=FRAMES, got {text!r}") from None


def _int_list(text):
    return [int(v) for v in text.split(",") if v]


def cmd_synth(args):
    from .linguistic import AlignmentError
    from .synth import SynthesisRequest, Synthesizer, VocoderError, vocode

    synth = Synthesizer.from_checkpoint(args.ckpt)
    request = SynthesisRequest(
        args.text,
        seed=args.seed,
        temperature=args.temperature,
        prior_temperature=args.prior_temperature,
        duration_overrides=dict(args.override_duration or []),
    )
    try:
        result = synth.synthesize(request)
    except VocabularyError as exc:
        raise SystemExit(f"error: {exc}; input must be phonemes separated by spaces with '|' between words")
    except AlignmentError as exc:
        raise SystemExit(f"error: {exc}")
    save_mel(result.mel, args.out)
    print(f"wrote {args.out}\t{result.mel.n_frames} frames\tword durations {result.used_word_durations}")
    if args.plot or args.plot_attention:
        from .plotting import plot_attention, plot_mel

        if args.plot:
            plot_mel(result.mel.frames, args.plot, title=args.text)
        if args.plot_attention:
            plot_attention(result.attention, args.plot_attention)
    if args.vocoder:
        try:
            return vocode(result.mel, args.out, args.vocoder)
        except VocoderError as exc:
            raise SystemExit(f"error: {exc}")
    return 0


def cmd_train(args):
    from .trainer import TrainConfig, fit

    model_cfg = load_config(args.config)
    train_cfg = TrainConfig.from_file(args.train_config) if args.train_config else TrainConfig()
    overrides = {k: v for k, v in (("max_steps", args.max_steps), ("seed", args.seed)) if v is not None}
    if overrides:
        train_cfg = TrainConfig(**{**train_cfg.__dict__, **overrides})
    manifest = read_manifest(args.manifest)
    trainer = fit(manifest, model_cfg, train_cfg, out_dir=args.out_dir)
    last = trainer.history[-1]
    print("\t".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}" for k, v in last.items()))
    print(f"checkpoint\t{Path(args.out_dir) / 'final.ckpt'}")
    return 0


def cmd_count_params(args):
    from .diagnostics import count_parameters

    cfg = load_config(args.config)
    print("module\tparameters")
    for name, n in count_parameters(cfg).rows():
        print(f"{name}\t{n}")
    if args.groups:
        print("\nshared_groups\ttotal\tpostnet")
        for g in args.groups:
            rep = count_parameters(cfg.replace(postnet_shared_groups=g))
            print(f"{g}\t{rep.total}\t{rep.parts['postnet']}")
    return 0


def cmd_verify(args):
    from .diagnostics import REPORT_HEADER, run_oracle_suite

    model = vocab = None
    if args.ckpt:
        from .trainer import load_checkpoint

        model, vocab, _ = load_checkpoint(args.ckpt)
    results = run_oracle_suite(model, vocab, n_draws=args.draws)
    lines = [REPORT_HEADER] + [r.row() for r in results]
    print("\n".join(lines))
    if args.report_dir:
        out = Path(args.report_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify.tsv").write_text("\n".join(lines) + "\n")
        if model is not None:
            _verify_figures(model, vocab, out)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def _verify_figures(model, vocab, out):
    from .plotting import plot_attention, plot_mel, plot_mel_grid
    from .synth import SynthesisRequest, Synthesizer

    synth = Synthesizer(model, vocab)
    phones = [p for p in vocab[2:]]
    text = " ".join(phones[:2]) + " | " + " ".join(phones[2:4] or phones[:1])
    res = synth.synthesize(SynthesisRequest(text))
    plot_mel(res.mel.frames, out / "mel.png", title=text)
    plot_mel(res.coarse_mel.frames, out / "coarse_mel.png", title="coarse " + text)
    plot_attention(res.attention, out / "attention.png")
    grid = synth.sample_grid(SynthesisRequest(text), temperatures=(0.2, 0.4, 0.6, 0.8, 1.0), seeds=(1237, 1239, 3237))
    plot_mel_grid({f"T={t} seed={s}": r.mel.frames for (t, s), r in grid.items()}, out / "sample_grid.png")


def cmd_make_toy(args):
    manifest = make_toy_corpus(args.seed, args.n, args.max_words, args.out)
    print(f"wrote {len(manifest.records)} utterances to {Path(args.out) / 'manifest.tsv'}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="mixtts", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="synthesize a mel-spectrogram from phoneme text")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--text", required=True, help="phonemes separated by spaces, words by '|'")
    s.add_argument("--seed", type=int, default=1234)
    s.add_argument("--temperature", type=float, default=0.8, help="post-net sampling temperature")
    s.add_argument("--prior-temperature", type=float, default=1.0)
    s.add_argument("--override-duration", type=_override, action="append", metavar="IDX=FRAMES")
    s.add_argument("--out", default="mel.mel1")
    s.add_argument("--plot")
    s.add_argument("--plot-attention")
    s.add_argument("--vocoder", help="command run on the written mel ('{mel}' is substituted)")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train from a manifest")
    t.add_argument("--config", required=True, help="preset name or YAML file")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--train-config", help="YAML file with optimizer/schedule settings")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("count-params", help="report trainable parameters per module")
    c.add_argument("--config", required=True)
    c.add_argument("--groups", type=_int_list, help="comma-separated shared-group counts to sweep")
    c.set_defaults(func=cmd_count_params)

    v = sub.add_parser("verify", help="run the numerical oracle suite")
    v.add_argument("--ckpt")
    v.add_argument("--draws", type=int, default=10, help="random toy flows per oracle")
    v.add_argument("--report-dir", help="write verify.tsv and figures here")
    v.set_defaults(func=cmd_verify)

    m = sub.add_parser("make-toy", help="write a synthetic corpus")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.add_argument("--n", type=int, default=16, help="number of utterances")
    m.add_argument("--max-words", type=int, default=4)
    m.set_defaults(func=cmd_make_toy)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, CorpusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
