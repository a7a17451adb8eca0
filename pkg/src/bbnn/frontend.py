"""WAV decoding, log-mel features and the MELC corpus cache."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 22050
    n_fft: int = 2048
    hop: int = 1024
    n_mels: int = 128
    fmin: float = 0.0
    # kept at 22050 even though Nyquist is 11025; the top bands come out empty
    fmax: float = 22050.0
    target_frames: int = 647
    log_floor_db: float = -80.0

    def __post_init__(self):
        if self.fmax > self.sample_rate:
            raise ValueError(f"fmax {self.fmax} exceeds sample rate {self.sample_rate}")
        if self.n_fft < self.hop:
            raise ValueError(f"n_fft {self.n_fft} smaller than hop {self.hop}")
        if not 0 <= self.fmin < self.fmax:
            raise ValueError(f"need 0 <= fmin < fmax, got {self.fmin}, {self.fmax}")
        if self.log_floor_db >= 0:
            raise ValueError("log_floor_db must be negative")


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (target_frames, n_mels) float32 in [0, 1]
    source_id: str = ""


# --- WAV -----------------------------------------------------------------

class WavError(ValueError):
    pass


class MalformedWavError(WavError):
    pass


class UnsupportedWavError(WavError):
    pass


class TruncatedWavError(WavError):
    pass


WAVE_FORMAT_PCM = 1
WAVE_FORMAT_IEEE_FLOAT = 3
WAVE_FORMAT_EXTENSIBLE = 0xFFFE


def decode_wav(path) -> tuple[np.ndarray, int]:
    """Mono float samples in [-1, 1] and the sample rate.

    Accepts 16-bit PCM and 32-bit float, one or two channels.
    """
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedWavError(f"{path}: not a RIFF/WAVE file")
    pos, fmt, pcm = 12, None, None
    while pos + 8 <= len(data):
        cid, size = data[pos:pos + 4], struct.unpack_from("<I", data, pos + 4)[0]
        body = data[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise MalformedWavError(f"{path}: fmt chunk too short ({len(body)} bytes)")
            fmt = struct.unpack_from("<HHIIHH", body)
            if fmt[0] == WAVE_FORMAT_EXTENSIBLE and len(body) >= 26:
                fmt = (struct.unpack_from("<H", body, 24)[0],) + fmt[1:]
        elif cid == b"data":
            if len(body) < size:
                raise TruncatedWavError(f"{path}: data chunk declares {size} bytes, found {len(body)}")
            pcm = body
            break
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise MalformedWavError(f"{path}: missing fmt chunk")
    if pcm is None:
        raise MalformedWavError(f"{path}: missing data chunk")
    tag, channels, rate, _, align, bits = fmt
    if channels not in (1, 2):
        raise UnsupportedWavError(f"{path}: {channels} channels not supported")
    if tag == WAVE_FORMAT_PCM and bits == 16:
        dtype, scale = "<i2", 1 / 32768.0
    elif tag == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype, scale = "<f4", 1.0
    else:
        raise UnsupportedWavError(f"{path}: format tag {tag} with {bits} bits per sample not supported")
    if rate <= 0:
        raise MalformedWavError(f"{path}: sample rate {rate}")
    frame_bytes = channels * bits // 8
    if len(pcm) % frame_bytes:
        raise TruncatedWavError(f"{path}: data length {len(pcm)} is not a whole number of frames")
    x = np.frombuffer(pcm, dtype=dtype).astype(np.float64) * scale
    x = x.reshape(-1, channels).mean(axis=1)
    return np.clip(x, -1.0, 1.0).astype(np.float32), rate


def write_wav(path, samples, rate: int, channels: int = 1, float32=False):
    """Write samples shaped (n,) or (n, channels) as 16-bit PCM or 32-bit float."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    channels = x.shape[1]
    if float32:
        tag, bits, raw = WAVE_FORMAT_IEEE_FLOAT, 32, x.astype("<f4").tobytes()
    else:
        q = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
        tag, bits, raw = WAVE_FORMAT_PCM, 16, q.tobytes()
    align = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, rate, rate * align, align, bits)
    with open(path, "wb") as f:
        f.write(b"RIFF" + struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(raw)) + b"WAVE")
        f.write(b"fmt " + struct.pack("<I", len(fmt)) + fmt)
        f.write(b"data" + struct.pack("<I", len(raw)) + raw)


def resample_linear(x: np.ndarray, rate: int, target: int) -> np.ndarray:
    if rate == target:
        return x
    n_out = max(1, int(round(len(x) * target / rate)))
    t_out = np.arange(n_out) * (rate / target)
    return np.interp(t_out, np.arange(len(x)), x).astype(np.float32)


# --- spectral features -----------------------------------------------------

def n_frames(n_samples: int, hop: int) -> int:
    return 1 + n_samples // hop


def hann(n: int) -> np.ndarray:
    """Periodic Hann window, the usual choice for STFT analysis."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft_power(samples, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Centered STFT power, shape (frames, n_fft // 2 + 1)."""
    y = np.asarray(samples, dtype=np.float64)
    if y.ndim != 1 or y.size == 0:
        raise ValueError("stft_power needs a non-empty 1-D signal")
    pad = cfg.n_fft // 2
    # reflect needs more than `pad` samples; short clips fall back to zeros
    y = np.pad(y, pad, mode="reflect" if y.size > pad else "constant")
    count = n_frames(y.size - 2 * pad, cfg.hop)
    frames = np.lib.stride_tricks.sliding_window_view(y, cfg.n_fft)[::cfg.hop][:count]
    spec = np.fft.rfft(frames * hann(cfg.n_fft), axis=1)
    return (spec.real ** 2 + spec.imag ** 2)


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz, logstep = 1000.0, np.log(6.4) / 27.0
    lin = f / f_sp
    return np.where(f >= min_log_hz, min_log_hz / f_sp + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep, lin)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz, logstep = 1000.0, np.log(6.4) / 27.0
    min_log_mel = min_log_hz / f_sp
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_filterbank(cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Area-normalized triangular filters, shape (n_mels, n_fft // 2 + 1)."""
    fft_hz = np.linspace(0, cfg.sample_rate / 2, cfg.n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_hz[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return weights


def mel_power(power_spec: np.ndarray, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """(frames, n_mels) mel-band energies."""
    return power_spec @ mel_filterbank(cfg).T


def power_to_db(s: np.ndarray, ref=1.0, amin=1e-10) -> np.ndarray:
    return 10.0 * np.log10(np.maximum(s, amin)) - 10.0 * np.log10(max(ref, amin))


def normalize_db(mel: np.ndarray, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Max-referenced dB floored at ``log_floor_db``, mapped affinely onto [0, 1]."""
    peak = float(mel.max()) if mel.size else 0.0
    if peak <= 0:
        return np.zeros(mel.shape, dtype=np.float32)
    db = np.maximum(power_to_db(mel, ref=peak), cfg.log_floor_db)
    return ((db - cfg.log_floor_db) / -cfg.log_floor_db).astype(np.float32)


def fix_frames(m: np.ndarray, target: int) -> np.ndarray:
    """Truncate, or pad by repeating the last frame, to exactly ``target`` rows."""
    if m.shape[0] >= target:
        return m[:target]
    return np.concatenate([m, np.repeat(m[-1:], target - m.shape[0], axis=0)], axis=0)


def to_logmel(power_spec: np.ndarray, cfg: MelConfig = MelConfig(), source_id="") -> MelSpectrogram:
    frames = normalize_db(mel_power(power_spec, cfg), cfg)
    return MelSpectrogram(fix_frames(frames, cfg.target_frames), source_id)


def logmel_from_samples(samples, rate: int, cfg: MelConfig = MelConfig(), source_id="") -> MelSpectrogram:
    y = resample_linear(np.asarray(samples, dtype=np.float32), rate, cfg.sample_rate)
    return to_logmel(stft_power(y, cfg), cfg, source_id)


def logmel_from_file(path, cfg: MelConfig = MelConfig()) -> MelSpectrogram:
    y, rate = decode_wav(path)
    return logmel_from_samples(y, rate, cfg, str(path))


# --- corpus + MELC cache -------------------------------------------------

CACHE_MAGIC = b"MELC"
# version 1: fixed 647x128 clips; version 2 adds (frames u16, n_mels u16) after the count
CACHE_VERSION = 1
CACHE_VERSION_SIZED = 2
CANONICAL_SHAPE = (647, 128)


class CacheError(ValueError):
    pass


@dataclass
class Corpus:
    features: np.ndarray  # (n_clips, frames, n_mels) float32
    labels: np.ndarray  # (n_clips,) int
    genres: list[str]

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int]:
        return self.features.shape[1:3]

    def counts(self) -> dict[str, int]:
        return {g: int((self.labels == i).sum()) for i, g in enumerate(self.genres)}

    def as_tensor(self, idx=None) -> np.ndarray:
        x = self.features if idx is None else self.features[idx]
        return x[..., None]


def scan_corpus(root) -> tuple[list[str], list[tuple[Path, int]]]:
    """Genres are sub-directory names, sorted; clips are their *.wav files."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus root {root} is not a directory")
    genres = sorted(d.name for d in root.iterdir() if d.is_dir() and any(d.glob("*.wav")))
    files = [(f, i) for i, g in enumerate(genres) for f in sorted((root / g).glob("*.wav"))]
    return genres, files


def write_cache(path, corpus: Corpus):
    frames, n_mels = corpus.shape
    sized = (frames, n_mels) != CANONICAL_SHAPE
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<HI", CACHE_VERSION_SIZED if sized else CACHE_VERSION, len(corpus)))
        if sized:
            f.write(struct.pack("<HH", frames, n_mels))
        for feat, label in zip(corpus.features, corpus.labels):
            name = corpus.genres[label].encode("utf-8")
            f.write(struct.pack("<HH", int(label), len(name)) + name)
            f.write(np.ascontiguousarray(feat, dtype="<f4").tobytes())


def read_cache(path) -> Corpus:
    data = Path(path).read_bytes()
    if data[:4] != CACHE_MAGIC:
        raise CacheError(f"{path}: not a MELC cache (bad magic)")
    try:
        version, count = struct.unpack_from("<HI", data, 4)
        pos = 10
        if version == CACHE_VERSION:
            frames, n_mels = CANONICAL_SHAPE
        elif version == CACHE_VERSION_SIZED:
            frames, n_mels = struct.unpack_from("<HH", data, pos)
            pos += 4
        else:
            raise CacheError(f"{path}: unsupported cache version {version}")
        feats = np.empty((count, frames, n_mels), dtype=np.float32)
        labels = np.empty(count, dtype=np.int64)
        names: dict[int, str] = {}
        nbytes = 4 * frames * n_mels
        for i in range(count):
            label, n = struct.unpack_from("<HH", data, pos)
            names[label] = data[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            if pos + nbytes > len(data):
                raise CacheError(f"{path}: clip {i} truncated")
            feats[i] = np.frombuffer(data, dtype="<f4", count=frames * n_mels, offset=pos).reshape(frames, n_mels)
            labels[i] = label
            pos += nbytes
    except struct.error as e:
        raise CacheError(f"{path}: truncated cache") from e
    n_genres = max(names) + 1 if names else 0
    genres = [names.get(i, f"class{i}") for i in range(n_genres)]
    return Corpus(feats, labels, genres)


def preprocess_corpus(root, cfg: MelConfig = MelConfig()):
    """Decode and featurize every clip. Returns (corpus, skipped paths)."""
    genres, files = scan_corpus(root)
    feats, labels, skipped = [], [], []
    for path, label in files:
        try:
            feats.append(logmel_from_file(path, cfg).frames)
            labels.append(label)
        except WavError as e:
            log.warning("skipping %s: %s", path, e)
            skipped.append(path)
    shape = (0, cfg.target_frames, cfg.n_mels)
    corpus = Corpus(np.stack(feats) if feats else np.zeros(shape, np.float32), np.array(labels, dtype=np.int64), genres)
    return corpus, skipped
