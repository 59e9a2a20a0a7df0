"""Utterance data model, manifest I/O, synthetic corpus generation and
shuffled multi-speaker batching.

Manifest layout (one directory)::

    manifest.tsv     header ``#adadurian-manifest v1`` then one record per line
    phones.txt       id<TAB>name, id 0 is the prosodic boundary symbol
    tones.txt        id<TAB>name, id 0 is "none" (used by boundaries)
    languages.txt
    speakers.txt
    emotions.txt
    signal.json      SignalConfig the mels were extracted with
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .dsp import SignalConfig, Waveform, read_mel, read_mel_header, wave_to_mel, write_mel, write_wav

MANIFEST_HEADER = "#adadurian-manifest v1"
BOUNDARY = "B"
NONE_TONE = "none"
VOCAB_FILES = {
    "phones": "phones.txt",
    "tones": "tones.txt",
    "languages": "languages.txt",
    "speakers": "speakers.txt",
    "emotions": "emotions.txt",
}


class CorpusError(Exception):
    pass


class ManifestParseError(CorpusError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


class VocabError(CorpusError):
    pass


class DurationMismatchError(CorpusError):
    def __init__(self, utt_id: str, message: str):
        super().__init__(f"utterance {utt_id}: {message}")
        self.utt_id = utt_id


class TokenKind(str, Enum):
    PHONEME = "phoneme"
    BOUNDARY = "prosodic_boundary"


@dataclass(frozen=True)
class LinguisticToken:
    kind: TokenKind
    phone_id: int
    tone_stress_id: int
    language_id: int

    @property
    def is_boundary(self) -> bool:
        return self.kind is TokenKind.BOUNDARY

    @classmethod
    def boundary(cls) -> "LinguisticToken":
        return cls(TokenKind.BOUNDARY, 0, 0, 0)


@dataclass(frozen=True)
class Utterance:
    utt_id: str
    speaker_id: int
    emotion_id: int
    tokens: Tuple[LinguisticToken, ...]
    durations: Tuple[int, ...]
    mel_path: str
    wave_path: Optional[str] = None

    @property
    def num_frames(self) -> int:
        return sum(self.durations)

    @property
    def phoneme_durations(self) -> List[int]:
        return [d for t, d in zip(self.tokens, self.durations) if not t.is_boundary]


@dataclass(frozen=True)
class Vocabs:
    phones: Tuple[str, ...]
    tones: Tuple[str, ...]
    languages: Tuple[str, ...]
    speakers: Tuple[str, ...]
    emotions: Tuple[str, ...]

    def index(self, table: str, name: str) -> int:
        names = getattr(self, table)
        try:
            return names.index(name)
        except ValueError:
            raise VocabError(f"unknown {table[:-1]} {name!r}") from None


@dataclass(frozen=True)
class Manifest:
    records: Tuple[Utterance, ...]
    vocabs: Vocabs
    signal: SignalConfig = field(default_factory=SignalConfig)
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.records)

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def load_mel(self, utt: Utterance) -> np.ndarray:
        return read_mel(self.resolve(utt.mel_path))

    def speakers_present(self) -> List[int]:
        return sorted({r.speaker_id for r in self.records})

    def subset(self, records: Sequence[Utterance]) -> "Manifest":
        return Manifest(tuple(records), self.vocabs, self.signal, self.root)

    def select_speakers(self, names: Sequence[str]) -> "Manifest":
        ids = {self.vocabs.index("speakers", n) for n in names}
        return self.subset([r for r in self.records if r.speaker_id in ids])


# --- token grammar ------------------------------------------------------------

def parse_token(text: str, vocabs: Vocabs) -> LinguisticToken:
    if text == BOUNDARY:
        return LinguisticToken.boundary()
    parts = text.split("/")
    if len(parts) != 3:
        raise CorpusError(f"bad token {text!r}: expected phone/tone/lang or {BOUNDARY}")
    phone, tone, lang = parts
    if phone == BOUNDARY or phone == vocabs.phones[0]:
        raise VocabError(f"token {text!r} uses the reserved boundary phone")
    return LinguisticToken(TokenKind.PHONEME, vocabs.index("phones", phone),
                           vocabs.index("tones", tone), vocabs.index("languages", lang))


def parse_tokens(text: str, vocabs: Vocabs) -> Tuple[LinguisticToken, ...]:
    return tuple(parse_token(t, vocabs) for t in text.split())


def format_token(token: LinguisticToken, vocabs: Vocabs) -> str:
    if token.is_boundary:
        return BOUNDARY
    return "/".join((vocabs.phones[token.phone_id], vocabs.tones[token.tone_stress_id],
                     vocabs.languages[token.language_id]))


def check_token(token: LinguisticToken, vocabs: Vocabs) -> None:
    if not 0 <= token.phone_id < len(vocabs.phones):
        raise VocabError(f"phone id {token.phone_id} out of range")
    if not 0 <= token.tone_stress_id < len(vocabs.tones):
        raise VocabError(f"tone/stress id {token.tone_stress_id} out of range")
    if not 0 <= token.language_id < len(vocabs.languages):
        raise VocabError(f"language id {token.language_id} out of range")
    if token.is_boundary and (token.phone_id != 0 or token.tone_stress_id != 0):
        raise VocabError("boundary tokens must carry the reserved phone and tone ids")


# --- manifest I/O ---------------------------------------------------------------

def _read_vocab(path: Path) -> Tuple[str, ...]:
    names = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        idx, _, name = line.partition("\t")
        if not name or not idx.isdigit() or int(idx) != len(names):
            raise ManifestParseError(path, n, "vocab lines must be consecutive 'id<TAB>name'")
        names.append(name)
    return tuple(names)


def _write_vocab(path: Path, names: Sequence[str]) -> None:
    path.write_text("".join(f"{i}\t{n}\n" for i, n in enumerate(names)), encoding="utf-8")


def load_vocabs(directory) -> Vocabs:
    directory = Path(directory)
    return Vocabs(**{k: _read_vocab(directory / f) for k, f in VOCAB_FILES.items()})


def validate_utterance(utt: Utterance, vocabs: Vocabs, n_frames: Optional[int] = None) -> None:
    if len(utt.tokens) != len(utt.durations):
        raise DurationMismatchError(utt.utt_id, "token and duration counts differ")
    if not 0 <= utt.speaker_id < len(vocabs.speakers):
        raise VocabError(f"{utt.utt_id}: speaker id {utt.speaker_id} out of range")
    if not 0 <= utt.emotion_id < len(vocabs.emotions):
        raise VocabError(f"{utt.utt_id}: emotion id {utt.emotion_id} out of range")
    for tok, dur in zip(utt.tokens, utt.durations):
        check_token(tok, vocabs)
        if tok.is_boundary and dur != 0:
            raise DurationMismatchError(utt.utt_id, "boundary tokens must have duration 0")
        if not tok.is_boundary and dur < 1:
            raise DurationMismatchError(utt.utt_id, "phoneme durations must be >= 1")
    if n_frames is not None and sum(utt.durations) != n_frames:
        raise DurationMismatchError(
            utt.utt_id, f"durations sum to {sum(utt.durations)} but mel has {n_frames} frames")


def load_manifest(path) -> Manifest:
    """Read and validate a manifest; vocab files and signal.json sit beside it."""
    path = Path(path)
    root = path.parent
    vocabs = load_vocabs(root)
    signal_path = root / "signal.json"
    signal = (SignalConfig.from_dict(json.loads(signal_path.read_text()))
              if signal_path.exists() else SignalConfig())
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ManifestParseError(path, 1, f"missing header {MANIFEST_HEADER!r}")
    records = []
    seen = set()
    for n, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) not in (6, 7):
            raise ManifestParseError(path, n, f"expected 6 or 7 tab-separated fields, got {len(fields)}")
        utt_id, speaker, emotion, token_text, dur_text, mel_path = fields[:6]
        wave_path = fields[6] if len(fields) == 7 and fields[6] else None
        try:
            durations = tuple(int(d) for d in dur_text.split())
        except ValueError:
            raise ManifestParseError(path, n, f"non-integer duration in {dur_text!r}") from None
        try:
            tokens = parse_tokens(token_text, vocabs)
        except VocabError:
            raise
        except CorpusError as exc:
            raise ManifestParseError(path, n, str(exc)) from None
        if utt_id in seen:
            raise ManifestParseError(path, n, f"duplicate utt_id {utt_id!r}")
        seen.add(utt_id)
        utt = Utterance(utt_id, vocabs.index("speakers", speaker), vocabs.index("emotions", emotion),
                        tokens, durations, mel_path, wave_path)
        n_frames, n_mels = read_mel_header(root / mel_path)
        if n_mels != signal.n_mels:
            raise CorpusError(f"{utt_id}: mel has {n_mels} bins, config says {signal.n_mels}")
        validate_utterance(utt, vocabs, n_frames)
        records.append(utt)
    return Manifest(tuple(records), vocabs, signal, root)


def write_manifest(manifest: Manifest, path) -> Path:
    path = Path(path)
    root = path.parent
    root.mkdir(parents=True, exist_ok=True)
    v = manifest.vocabs
    for key, fname in VOCAB_FILES.items():
        _write_vocab(root / fname, getattr(v, key))
    (root / "signal.json").write_text(
        json.dumps(manifest.signal.to_dict(), sort_keys=True, indent=1) + "\n")
    lines = [MANIFEST_HEADER]
    for r in manifest.records:
        fields = [r.utt_id, v.speakers[r.speaker_id], v.emotions[r.emotion_id],
                  " ".join(format_token(t, v) for t in r.tokens),
                  " ".join(str(d) for d in r.durations), r.mel_path]
        if r.wave_path:
            fields.append(r.wave_path)
        lines.append("\t".join(fields))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# --- synthetic corpus -------------------------------------------------------

@dataclass(frozen=True)
class SpeakerTimbre:
    base_pitch: float  # Hz
    formant_offset: float  # Hz
    envelope_power: float  # shape of the per-phoneme amplitude bump


@dataclass(frozen=True)
class EmotionStyle:
    pitch_scale: float
    rate_scale: float


DEFAULT_EMOTION_STYLES = {
    "neutral": EmotionStyle(1.0, 1.0),
    "anger": EmotionStyle(1.5, 0.8),
    "happiness": EmotionStyle(2.0, 1.0),
    "sadness": EmotionStyle(0.5, 1.4),
}


def default_timbre(speaker_index: int) -> SpeakerTimbre:
    return SpeakerTimbre(base_pitch=100.0 * (1 + speaker_index % 3),
                         formant_offset=150.0 * ((speaker_index * 7) % 5 - 2),
                         envelope_power=(1.0, 2.0, 0.5)[speaker_index % 3])


@dataclass(frozen=True)
class SynthSpec:
    n_speakers: int = 2
    n_utterances_per_speaker: int = 50
    phone_inventory_size: int = 12
    seed: int = 7
    duration_range: Tuple[int, int] = (3, 8)
    words_per_utterance: Tuple[int, int] = (2, 3)
    phones_per_word: Tuple[int, int] = (1, 3)
    speaker_start: int = 0
    emotions: Tuple[str, ...] = ("neutral",)
    emotion_styles: Tuple[Tuple[str, EmotionStyle], ...] = tuple(DEFAULT_EMOTION_STYLES.items())
    timbres: Optional[Tuple[SpeakerTimbre, ...]] = None
    languages: Tuple[str, ...] = ("zh", "en")

    def __post_init__(self):
        if self.n_speakers < 1 or self.n_utterances_per_speaker < 1:
            raise CorpusError("need at least one speaker and one utterance")
        if self.phone_inventory_size < 2:
            raise CorpusError("phone inventory must hold at least 2 phones")
        lo, hi = self.duration_range
        if not 1 <= lo <= hi:
            raise CorpusError("duration_range must satisfy 1 <= lo <= hi")
        styles = dict(self.emotion_styles)
        for e in self.emotions:
            if e not in styles:
                raise CorpusError(f"no style for emotion {e!r}")
        if self.timbres is not None and len(self.timbres) != self.n_speakers:
            raise CorpusError("timbres must list one entry per speaker")

    def timbre(self, k: int) -> SpeakerTimbre:
        if self.timbres is not None:
            return self.timbres[k]
        return default_timbre(self.speaker_start + k)

    def speaker_names(self) -> Tuple[str, ...]:
        return tuple(f"spk{self.speaker_start + k:02d}" for k in range(self.n_speakers))


N_TONES = 4
N_STRESS = 2


def synthetic_vocabs(spec: SynthSpec) -> Vocabs:
    phones = ["<bnd>"] + [f"p{i:02d}" for i in range(1, spec.phone_inventory_size + 1)]
    tones = [NONE_TONE] + [f"T{i}" for i in range(1, N_TONES + 1)] + [f"S{i}" for i in range(N_STRESS)]
    return Vocabs(tuple(phones), tuple(tones), spec.languages, spec.speaker_names(), spec.emotions)


def phone_language(phone_id: int, spec: SynthSpec) -> int:
    """First half of the inventory is tonal (language 0), the rest stressed."""
    return 0 if phone_id <= (spec.phone_inventory_size + 1) // 2 else 1


def _tone_ids(language_id: int) -> List[int]:
    if language_id == 0:
        return list(range(1, N_TONES + 1))
    return list(range(N_TONES + 1, N_TONES + 1 + N_STRESS))


def _quantize_pitch(f0: float, cfg: SignalConfig) -> float:
    # multiples of sample_rate/hop keep every frame of a steady segment identical
    grid = cfg.sample_rate / cfg.hop_length
    return max(grid, grid * round(f0 / grid))


def render_phoneme(phone_id: int, tone_id: int, n_samples: int, start: int, f0: float,
                   timbre: SpeakerTimbre, spec: SynthSpec, cfg: SignalConfig) -> np.ndarray:
    """Three harmonics at ``f0`` plus a formant band tied to the phone id."""
    t = (start + np.arange(n_samples)) / cfg.sample_rate
    out = np.zeros(n_samples)
    for h, amp in zip((1, 2, 3), (0.4, 0.25, 0.15)):
        out += amp * np.sin(2 * np.pi * h * f0 * t)
    span = 5000.0
    center = 500.0 + (phone_id - 1) * span / max(1, spec.phone_inventory_size - 1) + timbre.formant_offset
    center = min(max(center, 2 * f0), cfg.sample_rate / 2 - 500.0)
    half_band = 300.0
    gain = 0.5 + 0.15 * tone_id
    k_lo = max(4, math.ceil((center - half_band) / f0))
    k_hi = math.floor((center + half_band) / f0)
    for k in range(k_lo, k_hi + 1):
        weight = 1.0 - abs(k * f0 - center) / half_band
        if weight > 0:
            out += 0.25 * gain * weight * np.sin(2 * np.pi * k * f0 * t)
    tau = (np.arange(n_samples) + 0.5) / n_samples
    env = 0.3 + 0.7 * np.sin(np.pi * tau) ** timbre.envelope_power
    return out * env


def synthesize_utterance(tokens: Sequence[LinguisticToken], durations: Sequence[int],
                         timbre: SpeakerTimbre, style: EmotionStyle, spec: SynthSpec,
                         cfg: SignalConfig) -> np.ndarray:
    """Render tokens with their exact durations.

    The waveform is sum(durations)*hop - hop//2 samples long so that center-padded
    analysis yields exactly sum(durations) frames.
    """
    f0 = _quantize_pitch(timbre.base_pitch * style.pitch_scale, cfg)
    pieces = []
    pos = 0
    for tok, dur in zip(tokens, durations):
        if tok.is_boundary:
            continue
        n = dur * cfg.hop_length
        pieces.append(render_phoneme(tok.phone_id, tok.tone_stress_id, n, pos, f0, timbre, spec, cfg))
        pos += n
    samples = np.concatenate(pieces) if pieces else np.zeros(0)
    samples = samples[:max(0, len(samples) - cfg.hop_length // 2)]
    return 0.3 * samples


def _random_utterance(rng: np.random.Generator, spec: SynthSpec, style: EmotionStyle):
    n_words = int(rng.integers(spec.words_per_utterance[0], spec.words_per_utterance[1] + 1))
    tokens, durations = [], []
    lo, hi = spec.duration_range
    phones_by_lang = {}
    for p in range(1, spec.phone_inventory_size + 1):
        phones_by_lang.setdefault(phone_language(p, spec), []).append(p)
    for w in range(n_words):
        lang = int(rng.integers(0, len(phones_by_lang)))
        n_ph = int(rng.integers(spec.phones_per_word[0], spec.phones_per_word[1] + 1))
        for _ in range(n_ph):
            p = int(rng.choice(phones_by_lang[lang]))
            tone = int(rng.choice(_tone_ids(lang)))
            base = int(rng.integers(lo, hi + 1))
            tokens.append(LinguisticToken(TokenKind.PHONEME, p, tone, lang))
            durations.append(max(1, int(math.floor(base * style.rate_scale + 0.5))))
        tokens.append(LinguisticToken.boundary())
        durations.append(0)
    return tuple(tokens), tuple(durations)


def make_synthetic_corpus(spec: SynthSpec, out_dir, cfg: Optional[SignalConfig] = None) -> Manifest:
    """Write WAVs, mels and a manifest for a deterministic toy multi-speaker corpus."""
    cfg = cfg or SignalConfig()
    out_dir = Path(out_dir)
    (out_dir / "wavs").mkdir(parents=True, exist_ok=True)
    (out_dir / "mels").mkdir(parents=True, exist_ok=True)
    vocabs = synthetic_vocabs(spec)
    styles = dict(spec.emotion_styles)
    rng = np.random.default_rng(spec.seed)
    records = []
    for k, speaker in enumerate(vocabs.speakers):
        timbre = spec.timbre(k)
        for i in range(spec.n_utterances_per_speaker):
            emotion_id = i % len(spec.emotions)
            style = styles[spec.emotions[emotion_id]]
            tokens, durations = _random_utterance(rng, spec, style)
            samples = synthesize_utterance(tokens, durations, timbre, style, spec, cfg)
            utt_id = f"{speaker}_{i:04d}"
            wav_rel, mel_rel = f"wavs/{utt_id}.wav", f"mels/{utt_id}.mel"
            wav = Waveform(samples, cfg.sample_rate)
            write_wav(out_dir / wav_rel, wav)
            mel = wave_to_mel(wav, cfg)
            if mel.num_frames != sum(durations):
                raise CorpusError(f"{utt_id}: rendered {mel.num_frames} frames, scheduled {sum(durations)}")
            write_mel(out_dir / mel_rel, mel.frames)
            records.append(Utterance(utt_id, k, emotion_id, tokens, durations, mel_rel, wav_rel))
    manifest = Manifest(tuple(records), vocabs, cfg, out_dir)
    write_manifest(manifest, out_dir / "manifest.tsv")
    return manifest


# --- splitting and batching -------------------------------------------------

def split_train_valid(manifest: Manifest, valid_fraction: float, seed: int) -> Tuple[Manifest, Manifest]:
    """Per-speaker held-out split; every speaker lands in both halves."""
    if not 0 < valid_fraction < 1:
        raise CorpusError("valid_fraction must be in (0, 1)")
    by_speaker: Dict[int, List[Utterance]] = {}
    for r in manifest.records:
        by_speaker.setdefault(r.speaker_id, []).append(r)
    rng = np.random.default_rng(seed)
    valid_ids = set()
    for spk in sorted(by_speaker):
        utts = by_speaker[spk]
        if len(utts) < 2:
            raise CorpusError(f"speaker {manifest.vocabs.speakers[spk]!r} has fewer than 2 utterances")
        n_valid = min(len(utts) - 1, max(1, int(round(valid_fraction * len(utts)))))
        order = rng.permutation(len(utts))
        valid_ids.update(utts[i].utt_id for i in order[:n_valid])
    train = [r for r in manifest.records if r.utt_id not in valid_ids]
    valid = [r for r in manifest.records if r.utt_id in valid_ids]
    return manifest.subset(train), manifest.subset(valid)


def batch_iterator(manifest: Manifest, batch_size: int, seed: int, epoch: int) -> Iterator[List[Utterance]]:
    """One epoch: a seeded global permutation of all records, cut into batches."""
    if batch_size < 1:
        raise CorpusError("batch_size must be >= 1")
    if len(manifest) == 0:
        raise CorpusError("cannot batch an empty manifest")
    order = np.random.default_rng(seed + epoch).permutation(len(manifest))
    for start in range(0, len(order), batch_size):
        yield [manifest.records[i] for i in order[start:start + batch_size]]
