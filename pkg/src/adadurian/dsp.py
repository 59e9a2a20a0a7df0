"""Signal path: STFT magnitude, mel filterbank, log-mel extraction and
Griffin-Lim reconstruction.

Mel scale is the Slaney variant (linear below 1 kHz, logarithmic above),
filters are unit-peak triangles, and logs are natural.
"""

from __future__ import annotations

import functools
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional

import numpy as np

MEL_MAGIC = b"ADMEL1"


class SignalError(ValueError):
    pass


@dataclass(frozen=True)
class SignalConfig:
    sample_rate: int = 24000
    win_length: int = 1080  # 45 ms
    hop_length: int = 240  # 10 ms
    fft_size: int = 2048
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 12000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if not (0 < self.hop_length <= self.win_length <= self.fft_size):
            raise SignalError("need 0 < hop_length <= win_length <= fft_size")
        if self.n_mels < 1:
            raise SignalError("n_mels must be >= 1")
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise SignalError("need 0 <= fmin < fmax <= sample_rate/2")
        if self.log_floor <= 0:
            raise SignalError("log_floor must be positive")

    @property
    def n_freqs(self) -> int:
        return self.fft_size // 2 + 1

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "SignalConfig":
        return cls(**d)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 24000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    frames: np.ndarray
    config: SignalConfig = field(default_factory=SignalConfig)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[1] != self.config.n_mels:
            raise SignalError(
                f"mel must be T x {self.config.n_mels}, got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def num_frames(num_samples: int, cfg: SignalConfig) -> int:
    """Frame count under center padding."""
    return num_samples // cfg.hop_length + 1 if num_samples > 0 else 0


@functools.lru_cache(maxsize=8)
def _analysis_window(cfg: SignalConfig) -> np.ndarray:
    # periodic Hann of win_length, zero-padded to fft_size and centered
    n = np.arange(cfg.win_length)
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / cfg.win_length)
    window = np.zeros(cfg.fft_size)
    left = (cfg.fft_size - cfg.win_length) // 2
    window[left:left + cfg.win_length] = hann
    window.setflags(write=False)
    return window


def _frame(signal: np.ndarray, n_frames: int, cfg: SignalConfig) -> np.ndarray:
    idx = (np.arange(n_frames)[:, None] * cfg.hop_length
           + np.arange(cfg.fft_size)[None, :])
    return signal[idx]


def _stft_padded(padded: np.ndarray, n_frames: int, cfg: SignalConfig) -> np.ndarray:
    frames = _frame(padded, n_frames, cfg) * _analysis_window(cfg)
    return np.fft.rfft(frames, n=cfg.fft_size, axis=1)


def _center_pad(samples: np.ndarray, cfg: SignalConfig) -> np.ndarray:
    pad = cfg.fft_size // 2
    mode = "reflect" if len(samples) > pad else "constant"
    return np.pad(samples, (pad, pad), mode=mode)


def _reflect_source_index(length: int, cfg: SignalConfig) -> np.ndarray:
    """Map each center-padded sample position to the unpadded sample it copies.

    Positions filled with zeros (constant padding of short signals) map to -1.
    """
    pad = cfg.fft_size // 2
    j = np.arange(length + 2 * pad)
    src = j - pad
    if length > pad:
        src = np.where(src < 0, -src, src)
        src = np.where(src >= length, 2 * (length - 1) - src, src)
    else:
        src = np.where((src < 0) | (src >= length), -1, src)
    return src


def _istft_folded(spec: np.ndarray, length: int, cfg: SignalConfig) -> np.ndarray:
    """Least-squares signal of ``length`` samples whose center-padded STFT
    (first ``len(spec)`` frames) is closest to ``spec``.

    Every padded sample is a copy of exactly one source sample, so the normal
    equations stay diagonal: overlap-add, fold the padding back onto its
    sources, divide by the folded squared-window sum.
    """
    n_frames = spec.shape[0]
    window = _analysis_window(cfg)
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1) * window
    padded_len = length + cfg.fft_size
    acc = np.zeros(padded_len)
    norm = np.zeros(padded_len)
    wsq = window * window
    for t in range(n_frames):
        start = t * cfg.hop_length
        acc[start:start + cfg.fft_size] += frames[t]
        norm[start:start + cfg.fft_size] += wsq
    src = _reflect_source_index(length, cfg)
    keep = src >= 0
    out = np.bincount(src[keep], weights=acc[keep], minlength=length)
    weight = np.bincount(src[keep], weights=norm[keep], minlength=length)
    # samples no window touches do not affect the STFT; leave them at zero
    covered = weight > 1e-12
    out[covered] /= weight[covered]
    out[~covered] = 0.0
    return out


def stft_magnitude(wave_: Waveform, cfg: SignalConfig) -> np.ndarray:
    """|STFT| of ``wave_`` with shape (T, fft_size//2 + 1), T = len//hop + 1."""
    if wave_.sample_rate != cfg.sample_rate:
        raise SignalError(
            f"sample rate {wave_.sample_rate} does not match config {cfg.sample_rate}")
    samples = wave_.samples
    if len(samples) == 0:
        return np.zeros((0, cfg.n_freqs))
    n_frames = num_frames(len(samples), cfg)
    return np.abs(_stft_padded(_center_pad(samples, cfg), n_frames, cfg))


def hz_to_mel(freq):
    freq = np.asarray(freq, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(freq >= min_log_hz,
                    min_log_mel + np.log(np.maximum(freq, min_log_hz) / min_log_hz) / logstep,
                    freq / f_sp)


def mel_to_hz(mels):
    mels = np.asarray(mels, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(mels >= min_log_mel,
                    min_log_hz * np.exp(logstep * (mels - min_log_mel)),
                    f_sp * mels)


def mel_center_frequencies(cfg: SignalConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    return edges[1:-1]


@functools.lru_cache(maxsize=8)
def mel_filterbank(cfg: SignalConfig) -> np.ndarray:
    """Triangular mel filters, shape (n_mels, fft_size//2 + 1), unit peak."""
    fft_freqs = np.linspace(0.0, cfg.sample_rate / 2, cfg.n_freqs)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    lower = edges[:-2, None]
    center = edges[1:-1, None]
    upper = edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (center - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    if np.any(fb.sum(axis=1) <= 0):
        raise SignalError("mel filter with no FFT bin support; lower n_mels or raise fft_size")
    fb.setflags(write=False)
    return fb


@functools.lru_cache(maxsize=8)
def _filterbank_pinv(cfg: SignalConfig) -> np.ndarray:
    pinv = np.linalg.pinv(mel_filterbank(cfg))
    pinv.setflags(write=False)
    return pinv


def wave_to_mel(wave_: Waveform, cfg: SignalConfig) -> MelSpectrogram:
    mag = stft_magnitude(wave_, cfg)
    energies = mag @ mel_filterbank(cfg).T
    return MelSpectrogram(np.log(np.maximum(energies, cfg.log_floor)), cfg)


def mel_to_linear(mel: MelSpectrogram) -> np.ndarray:
    """Clipped pseudo-inverse of the filterbank applied to exp(mel)."""
    cfg = mel.config
    linear = np.exp(np.asarray(mel.frames, dtype=np.float64)) @ _filterbank_pinv(cfg).T
    return np.maximum(linear, 0.0)


def _spectral_distance(spec: np.ndarray, magnitude: np.ndarray) -> float:
    # norm of the full (two-sided) spectrum, in which the projections are orthogonal
    diff = np.abs(spec) - magnitude
    weights = np.full(diff.shape[1], 2.0)
    weights[0] = 1.0
    if diff.shape[1] % 2 == 1:
        weights[-1] = 1.0
    return float(np.sqrt(np.sum(weights * diff * diff)))


def _griffin_lim_iterates(magnitude: np.ndarray, cfg: SignalConfig, n_iters: int,
                          seed: int, length: int) -> Iterator[tuple]:
    """Yield (signal, consistency_error) for iterations 0..n_iters."""
    if n_iters < 0:
        raise SignalError("n_iters must be >= 0")
    n_frames = magnitude.shape[0]
    if length < (n_frames - 1) * cfg.hop_length or length <= 0:
        raise SignalError(f"length {length} too short for {n_frames} frames")
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(magnitude.shape))
    signal = _istft_folded(magnitude * phase, length, cfg)
    for it in range(n_iters + 1):
        spec = _stft_padded(_center_pad(signal, cfg), n_frames, cfg)
        yield signal, _spectral_distance(spec, magnitude)
        if it == n_iters:
            return
        signal = _istft_folded(magnitude * np.exp(1j * np.angle(spec)), length, cfg)


def _check_magnitude(magnitude, cfg: SignalConfig) -> np.ndarray:
    magnitude = np.asarray(magnitude, dtype=np.float64)
    if magnitude.ndim != 2 or magnitude.shape[1] != cfg.n_freqs:
        raise SignalError(f"magnitude must be T x {cfg.n_freqs}, got {magnitude.shape}")
    if np.any(magnitude < 0):
        raise SignalError("magnitudes must be nonnegative")
    return magnitude


def griffin_lim_errors(magnitude: np.ndarray, cfg: SignalConfig, n_iters: int = 60,
                       seed: int = 0, length: Optional[int] = None) -> List[float]:
    """Consistency error || |STFT(x_i)| - target || for i = 0..n_iters."""
    magnitude = _check_magnitude(magnitude, cfg)
    if length is None:
        length = magnitude.shape[0] * cfg.hop_length
    return [err for _, err in _griffin_lim_iterates(magnitude, cfg, n_iters, seed, length)]


def griffin_lim(magnitude: np.ndarray, cfg: SignalConfig, n_iters: int = 60, seed: int = 0,
                length: Optional[int] = None, peak: float = 0.95) -> Waveform:
    """Reconstruct a waveform of ``length`` samples (default T * hop) from magnitudes.

    The result is peak-normalized to ``peak`` unless it is silent.
    """
    magnitude = _check_magnitude(magnitude, cfg)
    n_frames = magnitude.shape[0]
    if length is None:
        length = n_frames * cfg.hop_length
    if n_frames == 0:
        return Waveform(np.zeros(length), cfg.sample_rate)
    signal = None
    for signal, _ in _griffin_lim_iterates(magnitude, cfg, n_iters, seed, length):
        pass
    top = np.max(np.abs(signal))
    if top > 0:
        signal = signal * (peak / top)
    return Waveform(signal, cfg.sample_rate)


# --- file formats -----------------------------------------------------------

def write_mel(path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    if frames.ndim != 2:
        raise SignalError("mel frames must be 2-D")
    with open(path, "wb") as f:
        f.write(MEL_MAGIC)
        f.write(struct.pack("<II", frames.shape[0], frames.shape[1]))
        f.write(frames.tobytes())


def read_mel_header(path) -> tuple:
    with open(path, "rb") as f:
        head = f.read(len(MEL_MAGIC) + 8)
    if len(head) < len(MEL_MAGIC) + 8 or head[:len(MEL_MAGIC)] != MEL_MAGIC:
        raise SignalError(f"{path}: not an ADMEL1 file")
    return struct.unpack("<II", head[len(MEL_MAGIC):])


def read_mel(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:len(MEL_MAGIC)] != MEL_MAGIC:
        raise SignalError(f"{path}: not an ADMEL1 file")
    n_frames, n_mels = struct.unpack("<II", data[len(MEL_MAGIC):len(MEL_MAGIC) + 8])
    body = data[len(MEL_MAGIC) + 8:]
    if len(body) != 4 * n_frames * n_mels:
        raise SignalError(f"{path}: truncated mel payload")
    return np.frombuffer(body, dtype="<f4").reshape(n_frames, n_mels).astype(np.float32)


def write_wav(path, wave_: Waveform) -> None:
    pcm = np.clip(np.round(wave_.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(wave_.sample_rate)
        w.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise SignalError(f"{path}: expected 16-bit mono PCM")
        rate = w.getframerate()
        pcm = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32767.0, rate)
