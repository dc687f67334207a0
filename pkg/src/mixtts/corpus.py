"""Dataset ingestion: phoneme text, mel-spectrograms, manifests, toy corpus.

Phoneme text is space-separated phonemes with ``|`` between words, e.g.
``"HH AE1 Z | N EH1 V ER0"``.  Silence is an ordinary word spelled ``SIL``.

Mel frames are computed with a centered STFT (reflect padding of
``WIN_LENGTH // 2`` on both sides), so a clip of ``n`` samples yields
``n // HOP_LENGTH + 1`` frames.
"""

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

SAMPLE_RATE = 22050
HOP_LENGTH = 256
WIN_LENGTH = 1024
N_FFT = 1024
N_MELS = 80
FMIN = 0.0
FMAX = 8000.0
MAG_FLOOR = 1e-5
LOG_FLOOR = float(np.log(MAG_FLOOR))

PAD = "<pad>"
SIL = "SIL"
WORD_SEP = "|"
FRAME_MULTIPLE = 4

MEL_MAGIC = b"MEL1"
_MEL_HEADER = struct.Struct("<4sII")


class CorpusError(ValueError):
    pass


class ParseError(CorpusError):
    pass


class VocabularyError(CorpusError):
    pass


class MelFormatError(CorpusError):
    pass


class SampleRateError(CorpusError):
    pass


# ---------------------------------------------------------------------------
# phoneme text


@dataclass(frozen=True)
class PhonemeSequence:
    phonemes: tuple
    tokens: tuple
    word_ids: tuple

    @property
    def word_count(self):
        return self.word_ids[-1] + 1

    def __len__(self):
        return len(self.tokens)

    def words(self):
        out = [[] for _ in range(self.word_count)]
        for ph, w in zip(self.phonemes, self.word_ids):
            out[w].append(ph)
        return out


def split_words(text):
    """Split phoneme text into a list of words, each a list of phonemes."""
    if not text or not text.strip():
        raise ParseError("phoneme text is empty")
    words = []
    for i, chunk in enumerate(text.split(WORD_SEP)):
        phones = chunk.split()
        if not phones:
            raise ParseError(f"empty word at position {i} in {text!r}")
        words.append(phones)
    return words


def parse_phoneme_text(text, vocab):
    """Parse ``text`` into token indices and per-phoneme word ids.

    ``vocab`` is a sequence of phoneme strings or a ``{phoneme: index}`` map.
    """
    index = vocab if isinstance(vocab, dict) else {p: i for i, p in enumerate(vocab)}
    phonemes, tokens, word_ids = [], [], []
    for w, phones in enumerate(split_words(text)):
        for ph in phones:
            if ph not in index or ph == PAD:
                raise VocabularyError(f"unknown phoneme {ph!r}")
            phonemes.append(ph)
            tokens.append(index[ph])
            word_ids.append(w)
    return PhonemeSequence(tuple(phonemes), tuple(tokens), tuple(word_ids))


def format_phoneme_text(seq):
    return f" {WORD_SEP} ".join(" ".join(word) for word in seq.words())


def build_vocab(texts, extra=()):
    """Padding symbol first, then SIL, then every other phoneme sorted."""
    seen = set(extra)
    for text in texts:
        for phones in split_words(text):
            seen.update(phones)
    seen.discard(PAD)
    seen.discard(SIL)
    return [PAD, SIL] + sorted(seen)


# ---------------------------------------------------------------------------
# mel-spectrograms


@dataclass(frozen=True)
class MelSpectrogram:
    frames: np.ndarray
    sample_rate: int = SAMPLE_RATE
    hop: int = HOP_LENGTH
    win: int = WIN_LENGTH

    def __post_init__(self):
        frames = self.frames
        if frames.ndim != 2 or frames.shape[1] != N_MELS:
            raise MelFormatError(f"mel must be T x {N_MELS}, got {frames.shape}")
        if frames.shape[0] < 1:
            raise MelFormatError("mel has no frames")
        if not np.all(np.isfinite(frames)):
            raise MelFormatError("mel contains non-finite values")
        if (self.sample_rate, self.hop, self.win) != (SAMPLE_RATE, HOP_LENGTH, WIN_LENGTH):
            raise MelFormatError("mel metadata does not match 22050 Hz / hop 256 / win 1024")

    @property
    def n_frames(self):
        return self.frames.shape[0]


def _hz_to_mel(hz):
    # Slaney scale: linear below 1 kHz, logarithmic above.
    hz = np.asarray(hz, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    mel = hz / f_sp
    return np.where(hz >= min_log_hz, min_log_mel + np.log(np.maximum(hz, 1e-10) / min_log_hz) / logstep, mel)


def _mel_to_hz(mel):
    mel = np.asarray(mel, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(mel >= min_log_mel, min_log_hz * np.exp(logstep * (mel - min_log_mel)), f_sp * mel)


def mel_filterbank(sr=SAMPLE_RATE, n_fft=N_FFT, n_mels=N_MELS, fmin=FMIN, fmax=FMAX):
    """Slaney-normalized triangular filterbank, shape (n_mels, n_fft // 2 + 1)."""
    fft_freqs = np.linspace(0, sr / 2, n_fft // 2 + 1)
    mel_pts = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fdiff = np.diff(hz_pts)
    ramps = hz_pts[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0, np.minimum(lower, upper))
    weights *= (2.0 / (hz_pts[2:] - hz_pts[:-2]))[:, None]
    return weights


def mel_center_frequencies(n_mels=N_MELS, fmin=FMIN, fmax=FMAX):
    return _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))[1:-1]


_MEL_BASIS = mel_filterbank()
_WINDOW = get_window("hann", WIN_LENGTH, fftbins=True)


def n_frames_for(num_samples):
    return num_samples // HOP_LENGTH + 1


def extract_mel(wav, sample_rate=SAMPLE_RATE):
    """Log-mel spectrogram of mono float audio in [-1, 1]."""
    if sample_rate != SAMPLE_RATE:
        raise SampleRateError(f"expected {SAMPLE_RATE} Hz audio, got {sample_rate} Hz")
    wav = np.asarray(wav, dtype=np.float64)
    if wav.ndim != 1:
        raise CorpusError("audio must be mono")
    if wav.size == 0:
        raise CorpusError("audio is empty")
    pad = N_FFT // 2
    mode = "reflect" if wav.size > pad else "constant"
    padded = np.pad(wav, (pad, pad), mode=mode)
    frames = np.lib.stride_tricks.sliding_window_view(padded, N_FFT)[::HOP_LENGTH]
    spec = np.abs(np.fft.rfft(frames * _WINDOW, axis=-1))
    mel = spec @ _MEL_BASIS.T
    logmel = np.log(np.maximum(mel, MAG_FLOOR)).astype(np.float32)
    return MelSpectrogram(logmel)


def read_wav(path):
    sr, data = wavfile.read(path)
    if data.ndim != 1:
        raise CorpusError(f"{path}: expected mono PCM audio")
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / float(np.iinfo(data.dtype).max)
    return data.astype(np.float64), sr


def save_mel(mel, path):
    frames = np.ascontiguousarray(mel.frames, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_MEL_HEADER.pack(MEL_MAGIC, frames.shape[0], frames.shape[1]))
        f.write(frames.tobytes())


def load_mel(path):
    raw = Path(path).read_bytes()
    if len(raw) < _MEL_HEADER.size:
        raise MelFormatError(f"{path}: truncated header")
    magic, n_frames, n_mels = _MEL_HEADER.unpack_from(raw)
    if magic != MEL_MAGIC:
        raise MelFormatError(f"{path}: bad magic {magic!r}")
    if n_mels != N_MELS:
        raise MelFormatError(f"{path}: n_mels={n_mels}, expected {N_MELS}")
    expected = _MEL_HEADER.size + 4 * n_frames * n_mels
    if len(raw) != expected:
        raise MelFormatError(f"{path}: size {len(raw)} does not match header ({expected} bytes)")
    frames = np.frombuffer(raw, dtype="<f4", offset=_MEL_HEADER.size).reshape(n_frames, n_mels)
    return MelSpectrogram(frames.astype(np.float32))


def pad_frames(frames, word_durations, multiple=FRAME_MULTIPLE):
    """Edge-pad ``frames`` to a multiple of ``multiple``; the last word absorbs the padding."""
    extra = -frames.shape[0] % multiple
    durations = list(word_durations)
    if extra:
        frames = np.concatenate([frames, np.repeat(frames[-1:], extra, axis=0)])
        durations[-1] += extra
    return frames, durations


def pad_durations(word_durations, multiple=FRAME_MULTIPLE):
    durations = list(word_durations)
    durations[-1] += -sum(durations) % multiple
    return durations


# ---------------------------------------------------------------------------
# manifests

MANIFEST_FIELDS = ("id", "phoneme_text", "mel_path", "wav_path", "word_durations")


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    phoneme_text: str
    mel_path: str = None
    wav_path: str = None
    word_durations: tuple = None

    def __post_init__(self):
        words = split_words(self.phoneme_text)
        if self.word_durations is not None:
            if len(self.word_durations) != len(words):
                raise CorpusError(
                    f"{self.id}: {len(self.word_durations)} durations for {len(words)} words"
                )
            if any(d < 0 for d in self.word_durations):
                raise CorpusError(f"{self.id}: negative word duration")


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple
    phoneme_vocab: tuple
    split: str = "train"
    root: str = field(default=".", compare=False)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise CorpusError("duplicate utterance ids in manifest")
        vocab = set(self.phoneme_vocab)
        for r in self.records:
            for phones in split_words(r.phoneme_text):
                for ph in phones:
                    if ph not in vocab:
                        raise VocabularyError(f"{r.id}: phoneme {ph!r} not in vocabulary")

    def resolve(self, path):
        p = Path(path)
        return p if p.is_absolute() else Path(self.root) / p

    def load_record(self, record):
        """Return (frames T x 80, word durations) with frames padded to a multiple of 4."""
        if record.mel_path:
            frames = load_mel(self.resolve(record.mel_path)).frames
        elif record.wav_path:
            wav, sr = read_wav(self.resolve(record.wav_path))
            frames = extract_mel(wav, sr).frames
        else:
            raise CorpusError(f"{record.id}: no mel_path or wav_path")
        if record.word_durations is None:
            raise CorpusError(f"{record.id}: training records need word_durations")
        if sum(record.word_durations) != frames.shape[0]:
            raise CorpusError(
                f"{record.id}: durations sum to {sum(record.word_durations)} "
                f"but mel has {frames.shape[0]} frames"
            )
        return pad_frames(frames, record.word_durations)


def manifest_text(manifest):
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    writer.writerow(MANIFEST_FIELDS)
    for r in manifest.records:
        durs = "" if r.word_durations is None else ",".join(str(d) for d in r.word_durations)
        writer.writerow([r.id, r.phoneme_text, r.mel_path or "", r.wav_path or "", durs])
    return buf.getvalue()


def write_manifest(manifest, path):
    Path(path).write_text(manifest_text(manifest))


def read_manifest(path, vocab=None, split="train"):
    path = Path(path)
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f, delimiter="\t"))
    records = []
    for row in rows:
        missing = set(MANIFEST_FIELDS) - set(row)
        if missing:
            raise CorpusError(f"{path}: missing columns {sorted(missing)}")
        durs = row["word_durations"].strip()
        records.append(
            UtteranceRecord(
                id=row["id"],
                phoneme_text=row["phoneme_text"],
                mel_path=row["mel_path"] or None,
                wav_path=row["wav_path"] or None,
                word_durations=tuple(int(d) for d in durs.split(",")) if durs else None,
            )
        )
    if vocab is None:
        vocab = build_vocab(r.phoneme_text for r in records)
    return DatasetManifest(tuple(records), tuple(vocab), split, root=str(path.parent))


# ---------------------------------------------------------------------------
# synthetic corpus

TOY_PHONEMES = ("AA", "AE", "AH", "B", "D", "EH", "IY", "K", "M", "N", "S", "T")
_VOICED = {"AA", "AE", "AH", "B", "D", "EH", "IY", "M", "N"}


def _toy_inventory(rng):
    centers = mel_center_frequencies()
    inventory = {}
    for ph in TOY_PHONEMES:
        n_formants = 3
        inventory[ph] = dict(
            duration=int(rng.integers(3, 8)),
            formant_bins=rng.uniform(4, 70, size=n_formants),
            formant_widths=rng.uniform(2.0, 6.0, size=n_formants),
            formant_amps=rng.uniform(1.0, 3.0, size=n_formants),
            voiced=ph in _VOICED,
        )
    return inventory, centers


def _toy_frame(spec, f0, centers):
    bins = np.arange(N_MELS)
    env = np.zeros(N_MELS)
    for c, w, a in zip(spec["formant_bins"], spec["formant_widths"], spec["formant_amps"]):
        env += a * np.exp(-0.5 * ((bins - c) / w) ** 2)
    frame = -7.0 + 1.5 * env
    if spec["voiced"]:
        ripple = np.cos(2 * np.pi * centers / f0) ** 4
        frame += 1.5 * ripple * np.exp(-centers / 3000.0)
    return frame


def render_toy_utterance(words, inventory, centers):
    """Frames and word durations for a list of words (``SIL`` renders as floor-level silence)."""
    frames, durations = [], []
    for w, phones in enumerate(words):
        if phones == [SIL]:
            durations.append(6)
            frames.extend([np.full(N_MELS, LOG_FLOOR + 1.0)] * 6)
            continue
        f0 = 110.0 + 15.0 * (TOY_PHONEMES.index(phones[0]) % 5) - 4.0 * w
        count = 0
        for i, ph in enumerate(phones):
            spec = inventory[ph]
            dur = spec["duration"] + (2 if i == len(phones) - 1 else 0)
            frames.extend([_toy_frame(spec, f0, centers)] * dur)
            count += dur
        durations.append(count)
    return np.asarray(frames, dtype=np.float32), durations


def make_toy_corpus(seed, n_utterances, max_words, out_dir):
    """Write a deterministic synthetic corpus (mels + manifest.tsv) to ``out_dir``.

    Every phoneme has a fixed spectral envelope and base duration drawn from
    ``seed``; voiced phonemes carry a harmonic ripple whose pitch depends on
    the word.  Silence words are inserted between words at random.
    """
    if n_utterances < 1:
        raise CorpusError("n_utterances must be >= 1")
    if max_words < 1:
        raise CorpusError("max_words must be >= 1")
    rng = np.random.default_rng(seed)
    inventory, centers = _toy_inventory(rng)
    out = Path(out_dir)
    (out / "mels").mkdir(parents=True, exist_ok=True)
    records = []
    for u in range(n_utterances):
        n_words = int(rng.integers(1, max_words + 1))
        words = []
        for w in range(n_words):
            if w > 0 and rng.random() < 0.3:
                words.append([SIL])
            n_ph = int(rng.integers(1, 5))
            words.append([TOY_PHONEMES[i] for i in rng.integers(0, len(TOY_PHONEMES), size=n_ph)])
        frames, durations = render_toy_utterance(words, inventory, centers)
        frames, durations = pad_frames(frames, durations)
        uid = f"toy{seed:04d}-{u:04d}"
        rel = f"mels/{uid}.mel1"
        save_mel(MelSpectrogram(frames), out / rel)
        text = f" {WORD_SEP} ".join(" ".join(p) for p in words)
        records.append(UtteranceRecord(uid, text, mel_path=rel, word_durations=tuple(durations)))
    vocab = [PAD, SIL] + sorted(TOY_PHONEMES)
    manifest = DatasetManifest(tuple(records), tuple(vocab), "train", root=str(out))
    write_manifest(manifest, out / "manifest.tsv")
    return manifest
