"""The duration-informed acoustic model.

Pipeline: content encoder (phone + tone/stress embeddings, 3-layer prenet,
CBHG) -> state skipping -> duration model -> frame expansion with speaker,
emotion and per-phoneme language embeddings plus a relative position scalar ->
windowed-attention autoregressive decoder emitting ``frames_per_step`` frames
per step -> LSTM post-net with a fixed lookahead, run offline or streaming.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from typing import Deque, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F
from torch.nn.utils.rnn import pad_sequence

from .checkpoint import Checkpoint
from .corpus import LinguisticToken, Vocabs
from .neural import (CBHG, AdditiveAttention, BiRecurrent, Prenet, Recurrent, ResidualRecurrent,
                     init_parameters, param_groups)


class ModelError(ValueError):
    pass


# layer sizes small enough for finite-difference checks and fast tests
TINY_SIZES = dict(phone_dim=8, tone_dim=8, language_dim=8, emotion_dim=8, speaker_dim=8,
                  encoder_prenet=(8, 8, 8), encoder_width=8, cbhg_bank=2, cbhg_channels=8,
                  cbhg_highway=1, duration_phone_dim=8, duration_tone_dim=8,
                  duration_language_dim=8, duration_width=8, decoder_prenet=(8, 8),
                  attention_depth=8, attention_window=2, decoder_width=8, frames_per_step=2,
                  postnet_fc=(8, 8), postnet_width=8, postnet_delay=1)


@dataclass(frozen=True)
class ModelConfig:
    phones: Tuple[str, ...]
    tones: Tuple[str, ...]
    languages: Tuple[str, ...]
    speakers: Tuple[str, ...]
    emotions: Tuple[str, ...]
    phone_dim: int = 128
    tone_dim: int = 16
    language_dim: int = 8
    emotion_dim: int = 16
    speaker_dim: int = 64
    encoder_prenet: Tuple[int, ...] = (128, 128, 128)
    encoder_width: int = 128
    cbhg_bank: int = 8
    cbhg_channels: int = 32
    cbhg_highway: int = 4
    duration_phone_dim: int = 64
    duration_tone_dim: int = 16
    duration_language_dim: int = 8
    duration_width: int = 128
    duration_layers: int = 2
    decoder_prenet: Tuple[int, ...] = (256, 256)
    attention_depth: int = 128
    attention_window: int = 10
    decoder_width: int = 256
    frames_per_step: int = 4
    postnet_fc: Tuple[int, ...] = (512, 256)
    postnet_width: int = 256
    postnet_delay: int = 5
    n_mels: int = 80
    mel_mean: float = -4.0
    mel_std: float = 4.0

    def __post_init__(self):
        if self.frames_per_step < 1:
            raise ModelError("frames_per_step must be >= 1")
        if self.postnet_delay < 0:
            raise ModelError("postnet_delay must be >= 0")
        if self.attention_window < 0:
            raise ModelError("attention_window must be >= 0")
        widths = (self.phone_dim, self.tone_dim, self.language_dim, self.emotion_dim,
                  self.speaker_dim, self.encoder_width, self.duration_width, self.attention_depth,
                  self.decoder_width, self.postnet_width, self.n_mels,
                  *self.encoder_prenet, *self.decoder_prenet, *self.postnet_fc)
        if any(w <= 0 for w in widths):
            raise ModelError("all widths must be positive")
        if not self.encoder_prenet or not self.decoder_prenet or not self.postnet_fc:
            raise ModelError("prenets need at least one layer")
        if self.mel_std <= 0:
            raise ModelError("mel_std must be positive")

    @property
    def expanded_dim(self) -> int:
        return self.encoder_width + self.speaker_dim + self.emotion_dim + self.language_dim + 1

    @classmethod
    def from_vocabs(cls, vocabs: Vocabs, speakers: Optional[Sequence[str]] = None,
                    emotions: Optional[Sequence[str]] = None, **overrides) -> "ModelConfig":
        return cls(phones=tuple(vocabs.phones), tones=tuple(vocabs.tones),
                   languages=tuple(vocabs.languages),
                   speakers=tuple(speakers if speakers is not None else vocabs.speakers),
                   emotions=tuple(emotions if emotions is not None else vocabs.emotions),
                   **overrides)

    def full_scale(self) -> "ModelConfig":
        """Full-size layer widths (512-unit duration BLSTM and attention)."""
        return replace(self, duration_width=512, attention_depth=512, decoder_prenet=(256, 256),
                       postnet_fc=(512, 256), postnet_width=256, frames_per_step=4, postnet_delay=5)

    def tiny(self) -> "ModelConfig":
        """Width-8 configuration for finite-difference checks."""
        return replace(self, **TINY_SIZES)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


# --- submodules -------------------------------------------------------------

class ContentEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.prenet = Prenet(cfg.phone_dim + cfg.tone_dim, cfg.encoder_prenet)
        self.to_width = nn.Linear(cfg.encoder_prenet[-1], cfg.encoder_width)
        self.cbhg = CBHG(cfg.encoder_width, cfg.cbhg_bank, cfg.cbhg_channels, cfg.cbhg_highway)

    def forward(self, x: Tensor, lengths: Optional[Tensor]) -> Tensor:
        return self.cbhg(self.to_width(self.prenet(x)), lengths)


class DurationModel(nn.Module):
    """Own phone/tone/language tables, stacked BLSTM, nonnegative log1p(frames) head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.phone_embedding = nn.Embedding(len(cfg.phones), cfg.duration_phone_dim)
        self.tone_embedding = nn.Embedding(len(cfg.tones), cfg.duration_tone_dim)
        self.language_embedding = nn.Embedding(len(cfg.languages), cfg.duration_language_dim)
        in_dim = cfg.duration_phone_dim + cfg.duration_tone_dim + cfg.duration_language_dim
        self.rnn = BiRecurrent(in_dim, cfg.duration_width, cfg.duration_layers)
        self.head = nn.Linear(2 * cfg.duration_width, 1)

    def forward(self, phone: Tensor, tone: Tensor, lang: Tensor, lengths: Optional[Tensor]) -> Tensor:
        x = torch.cat([self.phone_embedding(phone), self.tone_embedding(tone),
                       self.language_embedding(lang)], dim=-1)
        return F.softplus(self.head(self.rnn(x, lengths))).squeeze(-1)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        r, m, e = cfg.frames_per_step, cfg.n_mels, cfg.expanded_dim
        p = cfg.decoder_prenet[-1]
        self.frames_per_step = r
        self.n_mels = m
        self.half_width = cfg.attention_window
        self.prenet = Prenet(r * m, cfg.decoder_prenet)
        self.attention = AdditiveAttention(p + e, e, cfg.attention_depth)
        self.input_proj = nn.Linear(p + e, cfg.decoder_width)
        self.rnn1 = ResidualRecurrent(cfg.decoder_width)
        self.rnn2 = Recurrent(cfg.decoder_width, cfg.decoder_width)
        self.proj = nn.Linear(cfg.decoder_width + e, r * m)

    def num_steps(self, n_frames: int) -> int:
        return math.ceil(n_frames / self.frames_per_step)

    def forward(self, memory: Tensor, lengths: Tensor, teacher: Optional[Tensor] = None,
                on_step=None) -> Tensor:
        """memory (B, T, E) -> normalized coarse frames (B, T, n_mels).

        ``teacher`` holds normalized ground-truth frames (B, steps*r, n_mels),
        already padded per utterance with its final frame.
        """
        B, T, _ = memory.shape
        r, m = self.frames_per_step, self.n_mels
        steps = self.num_steps(T)
        keys = self.attention.keys(memory)
        ctx = memory.new_zeros(B, memory.shape[-1])
        prev = memory.new_zeros(B, r * m)
        pre_all = None
        if teacher is not None:
            blocks = teacher.reshape(B, steps, r * m)
            prev_blocks = torch.cat([blocks.new_zeros(B, 1, r * m), blocks[:, :-1]], dim=1)
            pre_all = self.prenet(prev_blocks)
        state1 = state2 = None
        outs = []
        for s in range(steps):
            center = torch.clamp(lengths - 1, max=s * r)
            pre = pre_all[:, s] if pre_all is not None else self.prenet(prev)
            ctx, weights, idx = self.attention.windowed(torch.cat([pre, ctx], -1), keys, memory,
                                                        center, lengths, self.half_width)
            x = self.input_proj(torch.cat([pre, ctx], -1))
            y1, state1 = self.rnn1.step(x, state1)
            h2, state2 = self.rnn2.step(y1, state2)
            out = self.proj(torch.cat([h2, ctx], -1))
            outs.append(out)
            if on_step is not None:
                on_step(s, out, weights, idx)
            prev = out
        return torch.stack(outs, 1).reshape(B, steps * r, m)[:, :T]


class Postnet(nn.Module):
    """FC stack -> LSTM fed with input t+delay -> linear, added to the coarse frame."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.delay = cfg.postnet_delay
        self.fc = Prenet(cfg.n_mels, cfg.postnet_fc)
        self.rnn = Recurrent(cfg.postnet_fc[-1], cfg.postnet_width)
        self.out = nn.Linear(cfg.postnet_width, cfg.n_mels)


class AdaDurIAN(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.phone_embedding = nn.Embedding(len(cfg.phones), cfg.phone_dim)
        self.tone_stress_embedding = nn.Embedding(len(cfg.tones), cfg.tone_dim)
        self.language_embedding = nn.Embedding(len(cfg.languages), cfg.language_dim)
        self.emotion_embedding = nn.Embedding(len(cfg.emotions), cfg.emotion_dim)
        self.speaker_embedding = nn.Embedding(len(cfg.speakers), cfg.speaker_dim)
        self.encoder = ContentEncoder(cfg)
        self.duration_model = DurationModel(cfg)
        self.decoder = Decoder(cfg)
        self.postnet = Postnet(cfg)
        init_parameters(self, seed)
        param_groups(self)  # asserts the group partition

    # normalization of mel values inside the network
    def normalize(self, mel: Tensor) -> Tensor:
        return (mel - self.cfg.mel_mean) / self.cfg.mel_std

    def denormalize(self, x: Tensor) -> Tensor:
        return x * self.cfg.mel_std + self.cfg.mel_mean

    @property
    def dtype(self):
        return self.phone_embedding.weight.dtype

    def encode_ids(self, phone: Tensor, tone: Tensor, lengths: Optional[Tensor] = None) -> Tensor:
        x = torch.cat([self.phone_embedding(phone), self.tone_stress_embedding(tone)], dim=-1)
        return self.encoder(x, lengths)

    def postnet_offline(self, coarse: Tensor, lengths: Optional[Tensor] = None) -> Tensor:
        """Batched training path: coarse (B, T, n_mels) -> refined, same shape."""
        B, T, _ = coarse.shape
        if lengths is None:
            lengths = torch.full((B,), T, dtype=torch.long)
        processed = self.postnet.fc(self.normalize(coarse))
        t = torch.arange(T)[None, :]
        src = torch.minimum(t + self.postnet.delay, (lengths - 1).clamp(min=0)[:, None])
        shifted = torch.gather(processed, 1, src.unsqueeze(-1).expand(-1, -1, processed.shape[-1]))
        h = self.postnet.rnn(shifted)
        return coarse + self.cfg.mel_std * self.postnet.out(h)

    def to_checkpoint(self, **kw) -> Checkpoint:
        tensors = {n: p.detach().to(torch.float32).cpu().numpy().copy()
                   for n, p in self.named_parameters()}
        return Checkpoint(self.cfg.to_dict(), tensors, **kw)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "AdaDurIAN":
        model = cls(ModelConfig.from_dict(ckpt.config))
        own = dict(model.named_parameters())
        if set(own) != set(ckpt.tensors):
            raise ModelError("checkpoint tensors do not match the model layout")
        with torch.no_grad():
            for n, p in own.items():
                src = ckpt.tensors[n]
                if tuple(src.shape) != tuple(p.shape):
                    raise ModelError(f"{n}: shape {src.shape} vs model {tuple(p.shape)}")
                p.copy_(torch.from_numpy(np.array(src)))
        return model


# --- token helpers -------------------------------------------------------------

def token_ids(tokens: Sequence[LinguisticToken]) -> Tuple[Tensor, Tensor, Tensor]:
    phone = torch.tensor([t.phone_id for t in tokens], dtype=torch.long)
    tone = torch.tensor([t.tone_stress_id for t in tokens], dtype=torch.long)
    lang = torch.tensor([t.language_id for t in tokens], dtype=torch.long)
    return phone, tone, lang


def _check_ids(tokens: Sequence[LinguisticToken], cfg: ModelConfig) -> None:
    if len(tokens) == 0:
        raise ModelError("token sequence is empty")
    for t in tokens:
        if not (0 <= t.phone_id < len(cfg.phones) and 0 <= t.tone_stress_id < len(cfg.tones)
                and 0 <= t.language_id < len(cfg.languages)):
            raise ModelError(f"token {t} has an id outside the model vocabulary")


# --- library surface ---------------------------------------------------------

def encode(tokens: Sequence[LinguisticToken], model: AdaDurIAN) -> Tensor:
    """Per-token content states (N, encoder_width). Conditions are not inputs."""
    _check_ids(tokens, model.cfg)
    phone, tone, _ = token_ids(tokens)
    return model.encode_ids(phone[None], tone[None])[0]


def skip_states(states: Tensor, tokens: Sequence[LinguisticToken]) -> Tensor:
    """Drop states at prosodic boundary positions."""
    if states.shape[0] != len(tokens):
        raise ModelError("state and token counts differ")
    keep = [i for i, t in enumerate(tokens) if not t.is_boundary]
    return states[keep]


def predict_durations(tokens: Sequence[LinguisticToken], model: AdaDurIAN) -> Tensor:
    """Real-valued frame counts, one per phoneme token."""
    _check_ids(tokens, model.cfg)
    phone, tone, lang = token_ids(tokens)
    log_dur = model.duration_model(phone[None], tone[None], lang[None], None)[0]
    keep = [i for i, t in enumerate(tokens) if not t.is_boundary]
    return torch.expm1(log_dur[keep]).clamp(min=0.0)


def round_durations(values) -> List[int]:
    """Round half up, then clamp to at least one frame."""
    vals = np.asarray(values.detach().cpu().numpy() if torch.is_tensor(values) else values,
                      dtype=np.float64)
    if np.any(vals < 0):
        raise ModelError("durations must be nonnegative")
    return [max(1, int(math.floor(v + 0.5))) for v in vals]


def relative_positions(durations: Tensor) -> Tensor:
    """(i+1)/d for the i-th frame of each phoneme of duration d."""
    durations = durations.long()
    starts = torch.cumsum(durations, 0) - durations
    frame = torch.arange(int(durations.sum())) - starts.repeat_interleave(durations)
    return (frame + 1).double() / durations.repeat_interleave(durations).double()


def expand_states(enc: Tensor, durations, speaker_id: int, emotion_id: int, language_ids,
                  model: AdaDurIAN) -> Tensor:
    """Frame-level rows [state | speaker | emotion | language | relative position]."""
    durations = torch.as_tensor(durations, dtype=torch.long)
    language_ids = torch.as_tensor(language_ids, dtype=torch.long)
    if enc.shape[0] == 0:
        raise ModelError("no phoneme states to expand")
    if not (enc.shape[0] == len(durations) == len(language_ids)):
        raise ModelError(f"length mismatch: {enc.shape[0]} states, {len(durations)} durations, "
                         f"{len(language_ids)} language ids")
    if torch.any(durations < 1):
        raise ModelError("expanded durations must be >= 1")
    T = int(durations.sum())
    rows = enc.repeat_interleave(durations, dim=0)
    spk = model.speaker_embedding.weight[speaker_id].expand(T, -1)
    emo = model.emotion_embedding.weight[emotion_id].expand(T, -1)
    lang = model.language_embedding(language_ids).repeat_interleave(durations, dim=0)
    pos = relative_positions(durations).to(enc.dtype).unsqueeze(-1)
    return torch.cat([rows, spk, emo, lang, pos], dim=-1)


def windowed_attention(query: Tensor, expanded: Tensor, center: int, model: AdaDurIAN,
                       half_width: Optional[int] = None):
    """Context and full-length weights for one query against one utterance."""
    T = expanded.shape[0]
    if not 0 <= center < T:
        raise ModelError(f"center {center} outside [0, {T})")
    W = model.cfg.attention_window if half_width is None else half_width
    att = model.decoder.attention
    ctx, w, idx = att.windowed(query[None], att.keys(expanded[None]), expanded[None],
                               torch.tensor([center]), torch.tensor([T]), W)
    full = expanded.new_zeros(T)
    valid = (idx[0] >= 0) & (idx[0] < T)
    full[idx[0][valid]] = w[0][valid]
    return ctx[0], full


def pad_teacher(mel: Tensor, r: int) -> Tensor:
    """Pad (T, M) to a multiple of r frames by repeating the final frame."""
    T = mel.shape[0]
    extra = math.ceil(T / r) * r - T
    if extra:
        mel = torch.cat([mel, mel[-1:].expand(extra, -1)], dim=0)
    return mel


class DecodeResult(NamedTuple):
    coarse: Tensor
    n_steps: int


def decode_sequence(expanded: Tensor, model: AdaDurIAN, teacher_mel=None) -> DecodeResult:
    """Coarse mel (T, n_mels) for one utterance, free-running unless ``teacher_mel``."""
    T = expanded.shape[0]
    teacher = None
    if teacher_mel is not None:
        teacher_mel = torch.as_tensor(np.asarray(teacher_mel), dtype=expanded.dtype) \
            if not torch.is_tensor(teacher_mel) else teacher_mel.to(expanded.dtype)
        if teacher_mel.shape[0] != T:
            raise ModelError(f"teacher has {teacher_mel.shape[0]} frames, expected {T}")
        teacher = pad_teacher(model.normalize(teacher_mel), model.cfg.frames_per_step)[None]
    steps = []
    out = model.decoder(expanded[None], torch.tensor([T]), teacher,
                        on_step=lambda s, *_: steps.append(s))
    return DecodeResult(model.denormalize(out[0]), len(steps))


def postnet_offline(coarse: Tensor, model: AdaDurIAN) -> Tensor:
    """Whole-utterance post-net: refined frame t reads input min(t + delay, T - 1).

    Every layer is applied to one frame at a time, as the stream does, so the two
    share floating-point reduction order; batched matmuls would not.
    """
    T = coarse.shape[0]
    if T < 1:
        raise ModelError("post-net needs at least one frame")
    pn, delay = model.postnet, model.postnet.delay
    with torch.no_grad():
        processed = [pn.fc(model.normalize(f)) for f in coarse]
        state, refined = None, []
        for t in range(T):
            h, state = pn.rnn.step(processed[min(t + delay, T - 1)][None], state)
            refined.append(coarse[t] + model.cfg.mel_std * pn.out(h[0]))
    return torch.stack(refined)


class StreamError(RuntimeError):
    pass


@dataclass
class StreamState:
    delay: int
    hidden: Optional[Tuple[Tensor, Tensor]] = None
    buffer: Deque[Tensor] = field(default_factory=deque)
    last_processed: Optional[Tensor] = None
    pushed: int = 0
    emitted: int = 0
    flushed: bool = False


def new_stream(model: AdaDurIAN) -> StreamState:
    return StreamState(delay=model.postnet.delay)


def _emit(state: StreamState, processed: Tensor, model: AdaDurIAN) -> Tensor:
    h, state.hidden = model.postnet.rnn.step(processed[None], state.hidden)
    coarse = state.buffer.popleft()
    state.emitted += 1
    return coarse + model.cfg.mel_std * model.postnet.out(h[0])


def postnet_stream_push(state: StreamState, frame: Tensor, model: AdaDurIAN):
    """Feed one coarse frame; returns (state, refined frames now available)."""
    if state.flushed:
        raise StreamError("push after flush")
    with torch.no_grad():
        processed = model.postnet.fc(model.normalize(frame))
        state.buffer.append(frame)
        state.last_processed = processed
        state.pushed += 1
        out = []
        if state.pushed > state.delay:
            out.append(_emit(state, processed, model))
    return state, out


def postnet_stream_flush(state: StreamState, model: AdaDurIAN) -> List[Tensor]:
    """Emit the remaining frames, feeding the last input in place of future ones."""
    if state.flushed:
        raise StreamError("stream already flushed")
    state.flushed = True
    out = []
    with torch.no_grad():
        while state.buffer:
            out.append(_emit(state, state.last_processed, model))
    return out


def postnet_stream(coarse: Tensor, model: AdaDurIAN) -> Tensor:
    state = new_stream(model)
    frames = []
    for f in coarse:
        state, out = postnet_stream_push(state, f, model)
        frames.extend(out)
    frames.extend(postnet_stream_flush(state, model))
    return torch.stack(frames)


class StreamTrace(NamedTuple):
    """decoded[t] = coarse frames available when refined frame t was emitted."""
    decoded: List[int]

    @property
    def first_frame(self) -> int:
        return self.decoded[0]

    @property
    def lookahead(self) -> int:
        """Worst-case coarse frames decoded past an emitted frame, counting itself."""
        return max(d - t for t, d in enumerate(self.decoded))


def decode_streaming(expanded: Tensor, model: AdaDurIAN) -> Tuple[Tensor, StreamTrace]:
    """Free-running decode with each block pushed through the streaming post-net
    as soon as the decoder emits it."""
    T = expanded.shape[0]
    r, m = model.cfg.frames_per_step, model.cfg.n_mels
    state = new_stream(model)
    frames: List[Tensor] = []
    decoded: List[int] = []
    n_coarse = 0

    def on_step(s, out, weights, idx):
        nonlocal state, n_coarse
        block = model.denormalize(out[0].reshape(r, m))[:T - s * r]
        n_coarse = min(T, (s + 1) * r)  # the whole block exists once the step returns
        for f in block:
            state, ready = postnet_stream_push(state, f, model)
            frames.extend(ready)
            decoded.extend([n_coarse] * len(ready))

    with torch.no_grad():
        model.decoder(expanded[None], torch.tensor([T]), on_step=on_step)
        tail = postnet_stream_flush(state, model)
    frames.extend(tail)
    decoded.extend([n_coarse] * len(tail))
    return torch.stack(frames), StreamTrace(decoded)


# --- end to end ----------------------------------------------------------------

def synthesize(tokens: Sequence[LinguisticToken], speaker_id: int, emotion_id: int,
               model: AdaDurIAN, durations: Optional[Sequence[int]] = None):
    """Refined mel (T, n_mels) as numpy plus the integer phoneme durations used.

    ``durations`` are per phoneme token (boundaries excluded); predicted when omitted.
    """
    cfg = model.cfg
    if not 0 <= speaker_id < len(cfg.speakers):
        raise ModelError(f"speaker id {speaker_id} outside the model's {len(cfg.speakers)} speakers")
    if not 0 <= emotion_id < len(cfg.emotions):
        raise ModelError(f"emotion id {emotion_id} outside the model's {len(cfg.emotions)} emotions")
    with torch.no_grad():
        enc = skip_states(encode(tokens, model), tokens)
        if durations is None:
            durations = round_durations(predict_durations(tokens, model))
        durations = [int(d) for d in durations]
        if len(durations) != enc.shape[0]:
            raise ModelError(f"{len(durations)} durations for {enc.shape[0]} phonemes")
        langs = [t.language_id for t in tokens if not t.is_boundary]
        expanded = expand_states(enc, durations, speaker_id, emotion_id, langs, model)
        coarse = decode_sequence(expanded, model).coarse
        refined = postnet_stream(coarse, model)
    return refined.cpu().numpy(), durations


# --- batched teacher-forced pass -------------------------------------------------

@dataclass
class Batch:
    phone: Tensor  # (B, N)
    tone: Tensor
    lang: Tensor
    token_lengths: Tensor  # (B,)
    phoneme_index: List[Tensor]  # per utterance, positions of phoneme tokens
    durations: List[Tensor]  # per utterance, phoneme frame counts
    speaker: Tensor  # (B,)
    emotion: Tensor  # (B,)
    mel: Tensor  # (B, T, n_mels), padded
    mel_lengths: Tensor  # (B,)


def forward_batch(batch: Batch, model: AdaDurIAN) -> dict:
    """Teacher-forced outputs: coarse and refined mels, log1p duration predictions."""
    enc = model.encode_ids(batch.phone, batch.tone, batch.token_lengths)
    log_dur = model.duration_model(batch.phone, batch.tone, batch.lang, batch.token_lengths)
    expanded, log_dur_ph = [], []
    for b in range(enc.shape[0]):
        idx = batch.phoneme_index[b]
        expanded.append(expand_states(enc[b, idx], batch.durations[b], int(batch.speaker[b]),
                                      int(batch.emotion[b]), batch.lang[b, idx], model))
        log_dur_ph.append(log_dur[b, idx])
    memory = pad_sequence(expanded, batch_first=True)
    r = model.cfg.frames_per_step
    norm_mel = model.normalize(batch.mel)
    teacher = pad_sequence([pad_teacher(norm_mel[b, :int(n)], r)
                            for b, n in enumerate(batch.mel_lengths)], batch_first=True)
    steps = model.decoder.num_steps(memory.shape[1])
    if teacher.shape[1] < steps * r:
        teacher = F.pad(teacher, (0, 0, 0, steps * r - teacher.shape[1]))
    coarse = model.denormalize(model.decoder(memory, batch.mel_lengths, teacher))
    refined = model.postnet_offline(coarse, batch.mel_lengths)
    return {"coarse": coarse, "refined": refined, "log_durations": log_dur_ph}
