"""Time-frequency representations and their conversion to model inputs.

STFT power spectrograms, MFCC matrices and framewise wavelet scalograms are
returned as :class:`Spectrogram` objects (rows = frequency / coefficient /
scale, columns = time).  :func:`to_model_input` resizes any of them to the
fixed 128x128 intensity image the classifiers consume.
"""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .signal import DegenerateInputError, frame_params_ms

MODEL_SIZE = 128
MAX_INTENSITY = 255.0
LOG_FLOOR = 1e-10


class Kind(enum.IntEnum):
    STFT = 0
    MFCC = 1
    DWT = 2


class Mother(str, enum.Enum):
    HAAR = "haar"
    MEXICAN_HAT = "mexican_hat"
    MORLET = "morlet"


def _fingerprint(cfg) -> str:
    payload = json.dumps({"type": type(cfg).__name__, **asdict(cfg)}, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 2048
    win_length: int | None = None
    hop: int = 512
    window: str = "hann"
    sample_rate_hz: int = 22050

    def __post_init__(self):
        if self.win_length is None:
            object.__setattr__(self, "win_length", self.n_fft)
        if not 1 <= self.win_length <= self.n_fft:
            raise ValueError("win_length must be in [1, n_fft]")
        if self.hop < 1:
            raise ValueError("hop must be >= 1")
        if self.window not in ("hann", "rect"):
            raise ValueError(f"unsupported window {self.window!r}")


@dataclass(frozen=True)
class MfccConfig:
    sample_rate_hz: int = 22050
    n_mfcc: int = 20
    hop: int = 1024
    n_mels: int = 128
    n_fft: int = 2048
    ortho_dct: bool = True
    lifter_cf: float = 0.0

    def __post_init__(self):
        if not 1 <= self.n_mfcc <= self.n_mels:
            raise ValueError("n_mfcc must be in [1, n_mels]")
        if self.lifter_cf < 0:
            raise ValueError("lifter_cf must be non-negative")


@dataclass(frozen=True)
class DwtConfig:
    mother: Mother = Mother.MORLET
    sample_rate_hz: int = 8000
    frame_len_s: float = 0.050
    overlap_fraction: float = 0.5
    n_scales: int = 64
    log_magnitude: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mother", Mother(self.mother))
        if not 0 <= self.overlap_fraction < 1:
            raise ValueError("overlap_fraction must be in [0, 1)")
        if self.n_scales < 2:
            raise ValueError("n_scales must be >= 2")

    @property
    def frame_len(self) -> int:
        return frame_params_ms(self.sample_rate_hz, self.frame_len_s * 1000.0, self.overlap_fraction)[0]

    @property
    def hop(self) -> int:
        return frame_params_ms(self.sample_rate_hz, self.frame_len_s * 1000.0, self.overlap_fraction)[1]


@dataclass(frozen=True, eq=False)
class Spectrogram:
    values: np.ndarray
    kind: Kind
    time_step_s: float
    axis_meta: np.ndarray
    config_fingerprint: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("spectrogram values must be 2D")
        if not np.all(np.isfinite(v)):
            raise ValueError("spectrogram contains NaN/Inf")
        kind = Kind(self.kind)
        if kind in (Kind.STFT, Kind.DWT) and v.size and v.min() < 0:
            raise ValueError(f"{kind.name} spectrogram must be non-negative")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "axis_meta", np.asarray(self.axis_meta, dtype=np.float64))

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True, eq=False)
class ModelInput:
    pixels: np.ndarray
    source_fingerprint: str = ""

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.shape != (MODEL_SIZE, MODEL_SIZE):
            raise ValueError(f"model input must be {MODEL_SIZE}x{MODEL_SIZE}, got {p.shape}")
        object.__setattr__(self, "pixels", np.clip(p, 0.0, MAX_INTENSITY))


# ---------------------------------------------------------------------------
# STFT


def window(name: str, win_length: int, n_fft: int) -> np.ndarray:
    """Periodic window of ``win_length`` zero-padded centrally to ``n_fft``."""
    if name == "hann":
        n = np.arange(win_length)
        w = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / win_length)
    else:
        w = np.ones(win_length)
    left = (n_fft - win_length) // 2
    return np.pad(w, (left, n_fft - win_length - left))


def _frames(signal: np.ndarray, n_fft: int, hop: int, win_length: int) -> np.ndarray:
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1 or x.size < win_length:
        raise DegenerateInputError(f"signal of {x.size} samples is shorter than the {win_length}-sample window")
    if x.size < n_fft:
        x = np.pad(x, (0, n_fft - x.size))
    n = (x.size - n_fft) // hop + 1
    return np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop][:n]


def stft(signal, cfg: StftConfig) -> np.ndarray:
    """One-sided STFT, shape (n_fft // 2 + 1, n_frames), frame-local phase."""
    frames = _frames(signal, cfg.n_fft, cfg.hop, cfg.win_length)
    w = window(cfg.window, cfg.win_length, cfg.n_fft)
    return np.fft.rfft(frames * w, n=cfg.n_fft, axis=1).T


def fft_frequencies(sample_rate_hz: float, n_fft: int) -> np.ndarray:
    return np.arange(n_fft // 2 + 1) * sample_rate_hz / n_fft


def stft_spectrogram(signal, cfg: StftConfig) -> Spectrogram:
    power = np.abs(stft(signal, cfg)) ** 2
    return Spectrogram(
        power,
        Kind.STFT,
        cfg.hop / cfg.sample_rate_hz,
        fft_frequencies(cfg.sample_rate_hz, cfg.n_fft),
        _fingerprint(cfg),
    )


# ---------------------------------------------------------------------------
# MFCC


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_frequencies(n_mels: int, sample_rate_hz: float) -> np.ndarray:
    """The n_mels + 2 band edges (Hz) equally spaced in mel over [0, sr/2]."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate_hz / 2.0), n_mels + 2))


def mel_filterbank(n_mels: int, n_fft: int, sample_rate_hz: float) -> np.ndarray:
    """Area-normalized triangular filters, shape (n_mels, n_fft // 2 + 1)."""
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    edges = mel_frequencies(n_mels, sample_rate_hz)
    freqs = fft_frequencies(sample_rate_hz, n_fft)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - left) / (center - left)
    falling = (right - freqs) / (right - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    return fb * (2.0 / (right - left))


def dct_matrix(n: int, ortho: bool = True) -> np.ndarray:
    """DCT-II as an (n, n) matrix acting on column vectors."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    d = 2.0 * np.cos(np.pi * k * (2 * i + 1) / (2.0 * n))
    if ortho:
        d[0] *= np.sqrt(1.0 / (4.0 * n))
        d[1:] *= np.sqrt(1.0 / (2.0 * n))
    return d


def lifter(m, cf: float) -> np.ndarray:
    """Sinusoidal cepstral liftering; row n scaled by (1 + sin(pi (n+1) / cf)) cf / 2."""
    m = np.asarray(m, dtype=np.float64)
    if cf < 0:
        raise ValueError("cf must be non-negative")
    if cf == 0:
        return m.copy()
    n = np.arange(m.shape[0])
    gain = (1.0 + np.sin(np.pi * (n + 1) / cf)) * cf / 2.0
    return m * gain.reshape((-1,) + (1,) * (m.ndim - 1))


def mfcc(signal, cfg: MfccConfig) -> Spectrogram:
    stft_cfg = StftConfig(n_fft=cfg.n_fft, hop=cfg.hop, sample_rate_hz=cfg.sample_rate_hz)
    power = np.abs(stft(signal, stft_cfg)) ** 2
    mel = mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate_hz) @ power
    ceps = dct_matrix(cfg.n_mels, cfg.ortho_dct)[: cfg.n_mfcc] @ np.log(mel + LOG_FLOOR)
    ceps = lifter(ceps, cfg.lifter_cf)
    return Spectrogram(ceps, Kind.MFCC, cfg.hop / cfg.sample_rate_hz, np.arange(cfg.n_mfcc), _fingerprint(cfg))


# ---------------------------------------------------------------------------
# wavelets

# peak angular frequency (rad per unit time) of each undilated mother
CENTER_OMEGA = {
    Mother.MORLET: 6.0,
    Mother.MEXICAN_HAT: np.sqrt(2.0),
    Mother.HAAR: 4.0 * 1.1655611852072114,  # 4 x root of tan(u) = 2u
}
_HALF_SUPPORT = 8.0  # in mother time units; Gaussian tail beyond is < 1e-13


def mother_function(mother, t):
    mother = Mother(mother)
    t = np.asarray(t, dtype=np.float64)
    if mother is Mother.MORLET:
        return np.exp(-1j * CENTER_OMEGA[Mother.MORLET] * t) * np.exp(-t * t / 2.0) / np.sqrt(2.0 * np.pi)
    if mother is Mother.MEXICAN_HAT:
        return 2.0 / (np.sqrt(3.0) * np.pi ** 0.25) * (1.0 - t * t) * np.exp(-t * t / 2.0)
    return np.where((t >= 0) & (t < 0.5), 1.0, np.where((t >= 0.5) & (t < 1.0), -1.0, 0.0))


def wavelet_kernel(mother, scale: float, sample_rate_hz: float):
    """Sampled ψ(t/s)/√s at t = k/sr; returns (offsets k, kernel values).

    The kernel is applied as an inner product: coefficient at sample c is
    sum_k a[c + k] * kernel[k].  Haar is sampled with an even number of
    taps so its two halves cancel exactly.
    """
    mother = Mother(mother)
    if not scale > 0:
        raise ValueError("scale must be positive")
    per_unit = scale * sample_rate_hz  # samples per mother time unit
    if mother is Mother.HAAR:
        half = max(1, int(round(per_unit / 2.0)))
        k = np.arange(2 * half)
        values = np.concatenate([np.ones(half), -np.ones(half)]) / np.sqrt(scale)
        return k, values
    K = int(np.ceil(_HALF_SUPPORT * per_unit))
    k = np.arange(-K, K + 1)
    return k, mother_function(mother, k / per_unit) / np.sqrt(scale)


def wavelet_scales(cfg: DwtConfig):
    """Log-spaced scales (s) and their center frequencies (Hz), ascending in frequency."""
    f_lo = cfg.sample_rate_hz / cfg.frame_len
    f_hi = 0.45 * cfg.sample_rate_hz
    freqs = np.geomspace(f_lo, f_hi, cfg.n_scales)
    return CENTER_OMEGA[cfg.mother] / (2.0 * np.pi * freqs), freqs


def frame_centers(n_samples: int, cfg: DwtConfig) -> np.ndarray:
    L, hop = cfg.frame_len, cfg.hop
    if n_samples < L:
        raise DegenerateInputError(f"signal of {n_samples} samples is shorter than one {L}-sample frame")
    n = (n_samples - L) // hop + 1
    return np.arange(n) * hop + L // 2


def cwt_coefficients(signal, cfg: DwtConfig) -> np.ndarray:
    """Complex wavelet coefficients at frame centers, shape (n_scales, n_frames)."""
    x = np.asarray(signal, dtype=np.float64)
    centers = frame_centers(x.size, cfg)
    scales, _ = wavelet_scales(cfg)
    out = np.empty((scales.size, centers.size), dtype=np.complex128)
    for r, s in enumerate(scales):
        k, h = wavelet_kernel(cfg.mother, s, cfg.sample_rate_hz)
        # correlation via convolution with the reversed kernel; full output index j ↔ c = j - (k[-1])
        full = fftconvolve(x, h[::-1])
        out[r] = full[centers + k[-1]]
    return out


def cwt_spectrogram(signal, cfg: DwtConfig) -> Spectrogram:
    mag = np.abs(cwt_coefficients(signal, cfg))
    if cfg.log_magnitude:
        mag = np.log1p(mag)
    scales, freqs = wavelet_scales(cfg)
    return Spectrogram(
        mag, Kind.DWT, cfg.hop / cfg.sample_rate_hz, scales, _fingerprint(cfg), meta={"center_hz": freqs.tolist()}
    )


# ---------------------------------------------------------------------------
# model inputs


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Linear interpolation weights with corner-aligned sampling grids."""
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def bilinear_resize(values, shape=(MODEL_SIZE, MODEL_SIZE)) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.shape == tuple(shape):
        return v.copy()
    return _interp_matrix(shape[0], v.shape[0]) @ v @ _interp_matrix(shape[1], v.shape[1]).T


def to_model_input(spec) -> ModelInput:
    """Bilinear resize to 128x128 then min-max rescale to [0, 255]."""
    values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec, dtype=np.float64)
    if values.ndim != 2 or min(values.shape) < 2:
        raise DegenerateInputError(f"need at least 2 rows and 2 columns, got {values.shape}")
    r = bilinear_resize(values)
    lo, hi = r.min(), r.max()
    if hi - lo <= 0:
        pixels = np.zeros_like(r)
    else:
        pixels = (r - lo) * (MAX_INTENSITY / (hi - lo))
    fp = spec.config_fingerprint if isinstance(spec, Spectrogram) else ""
    return ModelInput(pixels, fp)


# ---------------------------------------------------------------------------
# SPG1 container

SPG_MAGIC = b"SPG1"


def spectrogram_to_bytes(spec: Spectrogram) -> bytes:
    rows, cols = spec.values.shape
    header = SPG_MAGIC + struct.pack("<IIB", rows, cols, int(spec.kind))
    payload = spec.values.astype("<f4").tobytes()
    trailer = json.dumps(
        {
            "axis_meta": spec.axis_meta.tolist(),
            "config_fingerprint": spec.config_fingerprint,
            "time_step_s": spec.time_step_s,
            "meta": spec.meta,
        },
        sort_keys=True,
    ).encode("utf-8")
    return header + payload + trailer


def spectrogram_from_bytes(data: bytes) -> Spectrogram:
    if data[:4] != SPG_MAGIC:
        raise ValueError("not an SPG1 file")
    rows, cols, kind = struct.unpack("<IIB", data[4:13])
    end = 13 + 4 * rows * cols
    values = np.frombuffer(data[13:end], dtype="<f4").astype(np.float64).reshape(rows, cols)
    trailer = json.loads(data[end:].decode("utf-8")) if len(data) > end else {}
    return Spectrogram(
        values,
        Kind(kind),
        trailer.get("time_step_s", 0.0),
        trailer.get("axis_meta", []),
        trailer.get("config_fingerprint", ""),
        meta=trailer.get("meta", {}),
    )


def save_spectrogram(path, spec: Spectrogram) -> None:
    Path(path).write_bytes(spectrogram_to_bytes(spec))


def load_spectrogram(path) -> Spectrogram:
    return spectrogram_from_bytes(Path(path).read_bytes())


def save_png(path, spec) -> None:
    """8-bit grayscale rendering for inspection; low frequencies at the bottom."""
    from PIL import Image

    pixels = to_model_input(spec).pixels if isinstance(spec, Spectrogram) else np.asarray(spec)
    img = np.clip(np.round(pixels), 0, 255).astype(np.uint8)[::-1]
    Image.fromarray(img, mode="L").save(path)


def transform(signal, cfg) -> Spectrogram:
    """Dispatch on config type."""
    if isinstance(cfg, StftConfig):
        return stft_spectrogram(signal, cfg)
    if isinstance(cfg, MfccConfig):
        return mfcc(signal, cfg)
    if isinstance(cfg, DwtConfig):
        return cwt_spectrogram(signal, cfg)
    raise TypeError(f"unknown transform config {type(cfg).__name__}")
