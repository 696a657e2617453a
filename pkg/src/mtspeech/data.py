"""Synthetic phoneme corpora and the manifest / vocabulary / audio formats.

Each phoneme is a short tone complex (a fundamental in its own frequency
band plus one partial) under an amplitude envelope.  An utterance is a
concatenation of phoneme segments; the transcript lists the segment
phonemes, and a frame-label track records the phoneme that dominates the
receptive field of every encoder frame.

On disk::

    <out>/vocab_<language>.txt        one token per line, line i -> id i
    <out>/<split>.tsv                 path, samples, ids, language (tab separated)
    <out>/audio/<split>/<uid>.wav     PCM16 mono
    <out>/audio/<split>/<uid>.frames  one phoneme id per encoder frame
"""

from __future__ import annotations

import json
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import BASE_KERNELS, BASE_STRIDES, EncoderConfig, Utterance


class DataError(ValueError):
    """Malformed or inconsistent corpus files."""


class ManifestError(DataError):
    pass


class VocabError(DataError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    language: str
    count: int
    labeled: bool = True


def _default_splits():
    return {
        "pretrain": SplitSpec("src", 2000, True),
        "finetune": SplitSpec("tgt", 100, True),
        "test": SplitSpec("tgt", 100, True),
    }


@dataclass(frozen=True)
class SyntheticSpec:
    num_phonemes: int = 8
    languages: tuple = ("src", "tgt")
    # fraction of each later language's inventory shared with the first one
    overlap: float = 1.0
    splits: dict = field(default_factory=_default_splits)
    segment_ms: tuple = (50.0, 90.0)
    segments_per_utterance: tuple = (3, 6)
    allow_repeats: bool = False
    # number of phonemes allowed to follow each phoneme (0: unconstrained)
    successors: int = 2
    sample_rate: int = 16000
    freq_range: tuple = (250.0, 4000.0)
    noise_level: float = 0.05
    seed: int = 0
    kernels: tuple = BASE_KERNELS
    strides: tuple = BASE_STRIDES

    def __post_init__(self):
        if self.num_phonemes < 2:
            raise ValueError("need at least two phonemes")
        if not 0 <= self.successors <= self.num_phonemes - (0 if self.allow_repeats else 1):
            raise ValueError("successors must lie between 0 and the number of eligible phonemes")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap must lie in [0, 1]")
        rf = self.encoder().receptive_field
        if self.segment_ms[0] * self.sample_rate / 1000.0 < rf:
            raise ValueError(f"shortest segment is below the encoder receptive field ({rf} samples)")
        for name, split in self.splits.items():
            if split.language not in self.languages:
                raise ValueError(f"split {name!r} uses unknown language {split.language!r}")

    def encoder(self):
        return EncoderConfig(conv_channels=(1,) * len(self.kernels), kernels=tuple(self.kernels),
                             strides=tuple(self.strides), dim=4, heads=1, pos_conv_groups=1,
                             sample_rate=self.sample_rate)

    def to_json(self):
        d = asdict(self)
        d["splits"] = {k: asdict(v) for k, v in self.splits.items()}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "splits" in d:
            d["splits"] = {k: SplitSpec(**v) if isinstance(v, dict) else v for k, v in d["splits"].items()}
        for key in ("languages", "segment_ms", "segments_per_utterance", "freq_range", "kernels",
                    "strides"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class Template:
    token: str
    freq: float
    partial_ratio: float
    envelope: str


@dataclass
class Segment:
    phoneme: int  # language-local id (1-based)
    start: int
    end: int


def template_bank(spec: SyntheticSpec):
    """Templates and per-language inventories (lists of template indices)."""
    P = spec.num_phonemes
    shared = int(round(spec.overlap * P))
    n_new = P - shared
    size = P + n_new * (len(spec.languages) - 1)
    rng = np.random.default_rng([spec.seed, 7919])
    lo, hi = spec.freq_range
    freqs = np.geomspace(lo, hi, size)
    order = rng.permutation(size)
    envelopes = ("hann", "decay", "attack")
    bank = [
        Template(token=f"ph{i:02d}", freq=float(freqs[order[i]]),
                 partial_ratio=float(rng.choice([1.5, 2.0, 2.5, 3.0])),
                 envelope=envelopes[i % len(envelopes)])
        for i in range(size)
    ]
    inventories = {spec.languages[0]: list(range(P))}
    nxt = P
    for lang in spec.languages[1:]:
        keep = sorted(rng.choice(P, size=shared, replace=False).tolist()) if shared else []
        inventories[lang] = keep + list(range(nxt, nxt + n_new))
        nxt += n_new
    return bank, inventories


def _envelope(kind, n):
    x = np.linspace(0.0, 1.0, n, endpoint=False)
    if kind == "hann":
        return np.sin(np.pi * x) ** 2
    if kind == "decay":
        return np.minimum(1.0, x * 10.0) * np.exp(-3.0 * x)
    return np.minimum(1.0, x * 1.5) * np.minimum(1.0, (1.0 - x) * 10.0)


def render_segment(tmpl: Template, n, sample_rate, rng):
    t = np.arange(n) / sample_rate
    f = tmpl.freq * (1.0 + rng.uniform(-0.02, 0.02))
    amp = rng.uniform(0.5, 0.9)
    ph1, ph2 = rng.uniform(0, 2 * np.pi, size=2)
    tone = np.sin(2 * np.pi * f * t + ph1) + 0.5 * np.sin(2 * np.pi * tmpl.partial_ratio * f * t + ph2)
    return amp * _envelope(tmpl.envelope, n) * tone / 1.5


def phonotactics(spec: SyntheticSpec, language):
    """Allowed successors of each phoneme (1-based ids), or None if unconstrained.

    Drawn once per language so that phoneme order carries information a
    context model can pick up.
    """
    if not spec.successors:
        return None
    P = spec.num_phonemes
    rng = np.random.default_rng([spec.seed, 104729, spec.languages.index(language)])
    table = {}
    for p in range(1, P + 1):
        pool = [q for q in range(1, P + 1) if spec.allow_repeats or q != p]
        table[p] = sorted(int(q) for q in rng.choice(pool, size=spec.successors, replace=False))
    return table


def synthesize_utterance(spec: SyntheticSpec, bank, inventory, rng, successors=None):
    """Waveform in [-1, 1] and its segment list for one utterance."""
    n_seg = int(rng.integers(spec.segments_per_utterance[0], spec.segments_per_utterance[1] + 1))
    P = len(inventory)
    phones = []
    for _ in range(n_seg):
        if successors is not None and phones:
            choices = successors[phones[-1]]
        else:
            choices = [p for p in range(1, P + 1) if spec.allow_repeats or not phones or p != phones[-1]]
        phones.append(int(rng.choice(choices)))
    lo, hi = spec.segment_ms
    parts, segments, pos = [], [], 0
    for p in phones:
        n = int(round(rng.uniform(lo, hi) * spec.sample_rate / 1000.0))
        parts.append(render_segment(bank[inventory[p - 1]], n, spec.sample_rate, rng))
        segments.append(Segment(p, pos, pos + n))
        pos += n
    x = np.concatenate(parts)
    if spec.noise_level > 0:
        x = x + rng.normal(0.0, spec.noise_level, size=x.size)
    return np.clip(x, -1.0, 1.0), segments


def frame_labels(segments, num_samples, enc: EncoderConfig):
    """Phoneme covering the most samples of each encoder frame's receptive field."""
    T = enc.num_frames(num_samples)
    ids = np.zeros(num_samples, dtype=np.int64)
    for s in segments:
        ids[s.start:s.end] = s.phoneme
    out = np.zeros(T, dtype=np.int64)
    rf, hop = enc.receptive_field, enc.hop
    for t in range(T):
        window = ids[t * hop:t * hop + rf]
        out[t] = np.bincount(window).argmax()
    return out


# ----------------------------------------------------------------------------
# file formats
# ----------------------------------------------------------------------------


def write_wav(path, samples, sample_rate):
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def read_wav(path):
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise DataError(f"{path}: expected mono PCM16")
        rate = w.getframerate()
        pcm = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return pcm.astype(np.float64) / 32768.0, rate


def wav_num_samples(path):
    with wave.open(str(path), "rb") as w:
        return w.getnframes()


@dataclass
class Vocabulary:
    tokens: list

    def __post_init__(self):
        seen = set()
        for t in self.tokens:
            if t in seen:
                raise VocabError(f"duplicate token {t!r}")
            seen.add(t)

    def __len__(self):
        return len(self.tokens)

    @property
    def num_classes(self):
        """CTC output size: tokens plus the blank at id 0."""
        return len(self.tokens) + 1

    def id(self, token):
        return self.tokens.index(token) + 1


def save_vocab(path, vocab: Vocabulary):
    Path(path).write_text("".join(t + "\n" for t in vocab.tokens), encoding="utf-8")


def load_vocab(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    tokens = [ln.strip() for ln in lines if ln.strip()]
    if not tokens:
        raise VocabError(f"{path}: empty vocabulary")
    return Vocabulary(tokens)


@dataclass
class ManifestRecord:
    path: str
    samples: int
    labels: list | None
    language: str


@dataclass
class Manifest:
    root: Path
    records: list

    def audio_path(self, rec):
        return self.root / rec.path

    def frames_path(self, rec):
        return (self.root / rec.path).with_suffix(".frames")


def save_manifest(path, records):
    lines = []
    for r in records:
        ids = "" if r.labels is None else " ".join(str(i) for i in r.labels)
        lines.append(f"{r.path}\t{r.samples}\t{ids}\t{r.language}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_manifest(path, check_files=True):
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"{path}: manifest not found")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated columns, got {len(cols)}")
        audio, samples, ids, lang = cols
        try:
            n = int(samples)
            labels = [int(i) for i in ids.split()] if ids.strip() else None
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: malformed number") from None
        if labels is not None and 0 in labels:
            raise ManifestError(f"{path}:{lineno}: transcript contains the blank id 0")
        rec = ManifestRecord(audio, n, labels, lang)
        if check_files:
            audio_path = path.parent / audio
            if not audio_path.is_file():
                raise ManifestError(f"{path}:{lineno}: audio file {audio_path} does not exist")
            actual = wav_num_samples(audio_path)
            if actual != n:
                raise ManifestError(f"{path}:{lineno}: declared {n} samples, file has {actual}")
        records.append(rec)
    return Manifest(path.parent, records)


def save_frame_labels(path, labels):
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels), encoding="utf-8")


def load_frame_labels(path):
    return np.array([int(v) for v in Path(path).read_text().split()], dtype=np.int64)


def load_utterances(manifest, with_frame_labels=False):
    if not isinstance(manifest, Manifest):
        manifest = load_manifest(manifest)
    out = []
    for rec in manifest.records:
        samples, rate = read_wav(manifest.audio_path(rec))
        frames = None
        if with_frame_labels:
            fp = manifest.frames_path(rec)
            if not fp.is_file():
                raise ManifestError(f"missing frame-label track {fp}")
            frames = load_frame_labels(fp)
        out.append(Utterance(samples, labels=rec.labels, language=rec.language, frame_labels=frames,
                             sample_rate=rate, uid=Path(rec.path).stem))
    return out


# ----------------------------------------------------------------------------
# corpus generation
# ----------------------------------------------------------------------------


def generate_split(spec: SyntheticSpec, split: str):
    """In-memory utterances (with frame labels) of one split."""
    bank, inventories = template_bank(spec)
    sp = spec.splits[split]
    enc = spec.encoder()
    table = phonotactics(spec, sp.language)
    out = []
    for i in range(sp.count):
        rng = np.random.default_rng([spec.seed, _split_key(split), i])
        x, segs = synthesize_utterance(spec, bank, inventories[sp.language], rng, table)
        x = np.round(x * 32767.0) / 32768.0 + 0.0  # exactly representable in PCM16; no -0.0
        labels = np.array([s.phoneme for s in segs]) if sp.labeled else None
        out.append(Utterance(x, labels=labels, language=sp.language,
                             frame_labels=frame_labels(segs, x.size, enc), sample_rate=spec.sample_rate,
                             uid=f"{split}_{i:05d}"))
    return out


def _split_key(name):
    return int.from_bytes(name.encode()[:8].ljust(8, b"\0"), "little") & 0x7FFFFFFF


def generate_corpus(spec: SyntheticSpec, out_dir):
    """Write every split, vocabularies and frame-label tracks; returns manifest paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    bank, inventories = template_bank(spec)
    for lang, inv in inventories.items():
        save_vocab(out / f"vocab_{lang}.txt", Vocabulary([bank[i].token for i in inv]))
    (out / "spec.json").write_text(spec.to_json() + "\n", encoding="utf-8")
    manifests = {}
    for split in spec.splits:
        audio_dir = out / "audio" / split
        audio_dir.mkdir(parents=True, exist_ok=True)
        records = []
        for utt in generate_split(spec, split):
            rel = Path("audio") / split / f"{utt.uid}.wav"
            write_wav(out / rel, utt.samples, spec.sample_rate)
            save_frame_labels((out / rel).with_suffix(".frames"), utt.frame_labels)
            labels = None if utt.labels is None else utt.labels.tolist()
            records.append(ManifestRecord(rel.as_posix(), utt.samples.size, labels, utt.language))
        save_manifest(out / f"{split}.tsv", records)
        manifests[split] = out / f"{split}.tsv"
    return manifests
