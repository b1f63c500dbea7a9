"""Acoustic front end: mono PCM audio in, MFCC frame sequences out.

The default configuration produces 13 cepstral coefficients every 10 ms
from 25 ms Hamming-windowed frames: pre-emphasis, framing, windowing,
power spectrum, 26 triangular mel filters, log compression with a floor,
and an orthonormal DCT-II. All stages are pure functions, so utterances
can be processed concurrently without shared state.
"""

import struct
from dataclasses import dataclass

import numpy as np
from scipy.fftpack import dct
from scipy.io import wavfile

from .errors import FormatError, ValidationError

FEATURE_CACHE_MAGIC = b"A2VF"
FEATURE_CACHE_VERSION = 1


@dataclass
class Waveform:
    """Mono audio: dimensionless amplitudes in [-1, 1] plus a sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int


@dataclass
class MfccConfig:
    """Knobs for the MFCC pipeline; defaults are the conventional 16 kHz recipe."""

    frame_length: float = 0.025
    frame_hop: float = 0.010
    num_coefficients: int = 13
    num_mel_filters: int = 26
    pre_emphasis: float = 0.97
    fft_size: int | None = None  # None: next power of two >= frame samples
    log_floor: float = 1e-10

    def validate(self) -> None:
        if not 0 < self.num_coefficients <= self.num_mel_filters:
            raise ValidationError(
                f"need 0 < num_coefficients <= num_mel_filters, got "
                f"{self.num_coefficients} and {self.num_mel_filters}"
            )
        if self.frame_hop > self.frame_length:
            raise ValidationError("frame_hop must not exceed frame_length")
        if self.frame_hop <= 0 or self.frame_length <= 0:
            raise ValidationError("frame_length and frame_hop must be positive")
        if self.log_floor <= 0:
            raise ValidationError("log_floor must be positive")

    def frame_samples(self, sample_rate: int) -> int:
        return int(round(self.frame_length * sample_rate))

    def hop_samples(self, sample_rate: int) -> int:
        return int(round(self.frame_hop * sample_rate))

    def resolved_fft_size(self, sample_rate: int) -> int:
        frame = self.frame_samples(sample_rate)
        if self.fft_size is None:
            size = 1
            while size < frame:
                size *= 2
            return size
        if self.fft_size < frame:
            raise ValidationError(
                f"fft_size {self.fft_size} smaller than frame of {frame} samples"
            )
        return self.fft_size


def mel_from_hz(f):
    """Map frequency in Hz to the mel scale, 2595*log10(1 + f/700)."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise ValidationError("frequency must be non-negative")
    return 2595.0 * np.log10(1.0 + f / 700.0)


def hz_from_mel(m):
    """Inverse of mel_from_hz."""
    m = np.asarray(m, dtype=np.float64)
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def num_frames(num_samples: int, frame_samples: int, hop_samples: int) -> int:
    """Frame count for a signal: 1 + floor((len - frame_len) / hop)."""
    if num_samples < frame_samples:
        raise ValidationError(
            f"signal of {num_samples} samples shorter than one frame ({frame_samples})"
        )
    return 1 + (num_samples - frame_samples) // hop_samples


def mel_filterbank(config: MfccConfig, sample_rate: int) -> np.ndarray:
    """Triangular mel filter matrix of shape (num_mel_filters, fft_size//2 + 1).

    Centers are equally spaced on the mel scale between 0 Hz and the
    Nyquist frequency. Raises if the FFT resolution is too coarse to give
    every filter a positive entry.
    """
    config.validate()
    fft_size = config.resolved_fft_size(sample_rate)
    n_filters = config.num_mel_filters

    mel_points = np.linspace(0.0, mel_from_hz(sample_rate / 2.0), n_filters + 2)
    hz_points = hz_from_mel(mel_points)
    bins = np.floor((fft_size + 1) * hz_points / sample_rate).astype(int)

    bank = np.zeros((n_filters, fft_size // 2 + 1))
    for m in range(1, n_filters + 1):
        left, center, right = bins[m - 1], bins[m], bins[m + 1]
        for k in range(left, center):
            bank[m - 1, k] = (k - left) / (center - left)
        for k in range(center, right):
            bank[m - 1, k] = (right - k) / (right - center)
        if not np.any(bank[m - 1] > 0):
            raise ValidationError(
                f"mel filter {m - 1} has zero width: {n_filters} filters is too "
                f"many for fft_size {fft_size} at {sample_rate} Hz"
            )
    return bank


def extract_mfcc(waveform: Waveform, config: MfccConfig | None = None) -> np.ndarray:
    """Extract a (T, num_coefficients) MFCC matrix from a mono waveform."""
    if config is None:
        config = MfccConfig()
    config.validate()

    samples = np.asarray(waveform.samples, dtype=np.float64)
    if samples.ndim != 1 or samples.size == 0:
        raise ValidationError("waveform must be a non-empty 1-D sample array")
    if not np.all(np.isfinite(samples)):
        raise ValidationError("waveform contains non-finite samples")

    rate = waveform.sample_rate
    frame_len = config.frame_samples(rate)
    hop = config.hop_samples(rate)
    fft_size = config.resolved_fft_size(rate)
    n_frames = num_frames(samples.size, frame_len, hop)

    emphasized = np.append(samples[0], samples[1:] - config.pre_emphasis * samples[:-1])
    frames = np.lib.stride_tricks.sliding_window_view(emphasized, frame_len)[::hop]
    frames = frames[:n_frames] * np.hamming(frame_len)

    spectrum = np.fft.rfft(frames, n=fft_size)
    power = (np.abs(spectrum) ** 2) / fft_size

    bank = mel_filterbank(config, rate)
    energies = power @ bank.T
    log_energies = np.log(np.maximum(energies, config.log_floor))

    return dct(log_energies, type=2, norm="ortho", axis=1)[:, : config.num_coefficients]


def read_wav(path) -> Waveform:
    """Load a RIFF WAV file; only mono PCM16 or IEEE float32 is accepted."""
    try:
        rate, data = wavfile.read(path)
    except Exception as exc:
        raise FormatError(f"{path}: not a readable WAV file ({exc})") from exc
    if data.ndim != 1:
        raise ValidationError(f"{path}: expected mono audio, got {data.ndim} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise ValidationError(
            f"{path}: unsupported sample format {data.dtype}; use PCM16 or float32"
        )
    return Waveform(samples=samples, sample_rate=int(rate))


def write_feature_cache(path, frames: np.ndarray) -> None:
    """Write a feature matrix as magic 'A2VF', version, T, d, then float32 rows."""
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise ValidationError("feature cache expects a 2-D (T, d) matrix")
    header = struct.pack(
        "<4sIII", FEATURE_CACHE_MAGIC, FEATURE_CACHE_VERSION, frames.shape[0], frames.shape[1]
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(frames.astype("<f4").tobytes(order="C"))


def read_feature_cache(path) -> np.ndarray:
    """Read a feature cache written by write_feature_cache; returns float32 (T, d)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header_size = struct.calcsize("<4sIII")
    if len(blob) < header_size:
        raise FormatError(f"{path}: truncated feature cache header")
    magic, version, n_rows, n_cols = struct.unpack("<4sIII", blob[:header_size])
    if magic != FEATURE_CACHE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_CACHE_VERSION:
        raise FormatError(f"{path}: unsupported cache version {version}")
    expected = header_size + 4 * n_rows * n_cols
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=header_size)
    return data.reshape(n_rows, n_cols).copy()


def read_feature_cache_shape(path) -> tuple[int, int]:
    """Read only (T, d) from a cache header, without loading the payload."""
    header_size = struct.calcsize("<4sIII")
    with open(path, "rb") as fh:
        head = fh.read(header_size)
    if len(head) < header_size:
        raise FormatError(f"{path}: truncated feature cache header")
    magic, version, n_rows, n_cols = struct.unpack("<4sIII", head)
    if magic != FEATURE_CACHE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_CACHE_VERSION:
        raise FormatError(f"{path}: unsupported cache version {version}")
    return n_rows, n_cols
