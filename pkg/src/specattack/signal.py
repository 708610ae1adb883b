"""Audio ingestion, resampling, pitch-shift augmentation, manifests, framing."""

from __future__ import annotations

import csv
import io
import os
import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

PITCH_FACTORS = (0.75, 0.9, 1.15, 1.5)


class AudioFormatError(ValueError):
    """Malformed WAV container or header."""


class UnsupportedCodecError(AudioFormatError):
    """WAV payload is not linear PCM / IEEE float."""


class DegenerateInputError(ValueError):
    """Input too short or too small for the requested operation."""


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int
    label: int = 0
    source_id: str = ""
    augmentation_tag: float | None = None

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1 or x.size == 0:
            raise DegenerateInputError("clip must be a non-empty 1D signal")
        if not np.all(np.isfinite(x)):
            raise ValueError("clip contains non-finite samples")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        x = np.clip(x, -1.0, 1.0)
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


# ---------------------------------------------------------------------------
# WAV I/O

_FMT_PCM = 1
_FMT_FLOAT = 3
_FMT_EXTENSIBLE = 0xFFFE


def _parse_chunks(data: bytes):
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise AudioFormatError("not a RIFF/WAVE file")
    pos = 12
    chunks = {}
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        chunks.setdefault(cid, body)
        pos += 8 + size + (size & 1)
    return chunks


def decode_wav(data: bytes, label: int = 0, source_id: str = "") -> AudioClip:
    chunks = _parse_chunks(data)
    if b"fmt " not in chunks or b"data" not in chunks:
        raise AudioFormatError("missing fmt or data chunk")
    fmt = chunks[b"fmt "]
    if len(fmt) < 16:
        raise AudioFormatError("fmt chunk too short")
    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == _FMT_EXTENSIBLE:
        if len(fmt) < 26:
            raise AudioFormatError("truncated WAVE_FORMAT_EXTENSIBLE header")
        (tag,) = struct.unpack("<H", fmt[24:26])
    if channels < 1 or rate <= 0 or block_align == 0:
        raise AudioFormatError("invalid channel count, rate or block alignment")
    raw = chunks[b"data"]
    n_frames = len(raw) // block_align
    raw = raw[: n_frames * block_align]

    if tag == _FMT_PCM and bits == 8:
        x = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif tag == _FMT_PCM and bits == 16:
        x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _FMT_PCM and bits == 24:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        x = v.astype(np.float64) / float(1 << 23)
    elif tag == _FMT_PCM and bits == 32:
        x = np.frombuffer(raw, dtype="<i4").astype(np.float64) / float(1 << 31)
    elif tag == _FMT_FLOAT and bits == 32:
        x = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    elif tag == _FMT_FLOAT and bits == 64:
        x = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    elif tag in (_FMT_PCM, _FMT_FLOAT):
        raise AudioFormatError(f"unsupported sample width {bits} bits")
    else:
        raise UnsupportedCodecError(f"unsupported WAV codec tag {tag:#x}")

    x = x.reshape(-1, channels).mean(axis=1)
    if x.size == 0:
        raise AudioFormatError("WAV file has no sample frames")
    return AudioClip(x, int(rate), label=label, source_id=source_id)


def load_wav(path, label: int = 0) -> AudioClip:
    """Read a PCM/float WAV file into a mono clip (channels averaged)."""
    path = Path(path)
    return decode_wav(path.read_bytes(), label=label, source_id=str(path))


def encode_wav(samples, sample_rate_hz: int, bits: int = 16, channels: int = 1) -> bytes:
    """Serialize an (n,) or (n, channels) float array in [-1, 1] as PCM WAV."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = np.repeat(x[:, None], channels, axis=1)
    channels = x.shape[1]
    x = np.clip(x, -1.0, 1.0)
    if bits == 16:
        payload = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
    elif bits == 8:
        payload = np.clip(np.round(x * 128.0 + 128.0), 0, 255).astype(np.uint8).tobytes()
    elif bits == 24:
        v = np.clip(np.round(x * (1 << 23)), -(1 << 23), (1 << 23) - 1).astype(np.int32).ravel()
        v = np.where(v < 0, v + (1 << 24), v)
        payload = np.stack([v & 0xFF, (v >> 8) & 0xFF, (v >> 16) & 0xFF], axis=1).astype(np.uint8).tobytes()
    else:
        raise ValueError("bits must be 8, 16 or 24")
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", _FMT_PCM, channels, sample_rate_hz, sample_rate_hz * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def write_wav(path, clip: AudioClip, bits: int = 16) -> None:
    Path(path).write_bytes(encode_wav(clip.samples, clip.sample_rate_hz, bits=bits))


# ---------------------------------------------------------------------------
# resampling and augmentation


def _resample_array(x: np.ndarray, ratio: Fraction) -> np.ndarray:
    # Kaiser-windowed sinc polyphase filter; beta 8.6 keeps stopband near -90 dB
    if ratio == 1:
        return x.copy()
    return resample_poly(x, ratio.numerator, ratio.denominator, window=("kaiser", 8.6), padtype="line")


def resample(clip: AudioClip, target_rate_hz: int) -> AudioClip:
    """Band-limited polyphase resampling to ``target_rate_hz``."""
    if target_rate_hz <= 0:
        raise ValueError("target_rate_hz must be positive")
    if target_rate_hz == clip.sample_rate_hz:
        return clip
    y = _resample_array(clip.samples, Fraction(target_rate_hz, clip.sample_rate_hz))
    return replace(clip, samples=y, sample_rate_hz=int(target_rate_hz))


def pitch_shift(clip: AudioClip, factor: float) -> AudioClip:
    """Raise pitch by ``factor`` via resampling; duration scales by 1/factor."""
    if not factor > 0:
        raise ValueError("factor must be positive")
    ratio = Fraction(factor).limit_denominator(1000)
    y = _resample_array(clip.samples, 1 / ratio)
    return replace(clip, samples=y, augmentation_tag=float(factor))


def frame(clip, frame_len_samples: int, hop_samples: int) -> np.ndarray:
    """Contiguous frames, shape (n_frames, frame_len); no padding."""
    x = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    if frame_len_samples < 1 or hop_samples < 1:
        raise ValueError("frame length and hop must be positive")
    if frame_len_samples > x.size:
        raise DegenerateInputError(f"frame of {frame_len_samples} samples exceeds clip of {x.size}")
    n = (x.size - frame_len_samples) // hop_samples + 1
    view = np.lib.stride_tricks.sliding_window_view(x, frame_len_samples)[::hop_samples]
    return view[:n].copy()


def frame_params_ms(sample_rate_hz: int, frame_ms: float, overlap: float) -> tuple[int, int]:
    """Frame length and hop in samples for a frame duration and overlap fraction."""
    n = int(round(sample_rate_hz * frame_ms / 1000.0))
    return n, max(1, int(round(n * (1.0 - overlap))))


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    fold: int
    aug: float | None = None


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple
    class_names: tuple
    root: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        folds = sorted({e.fold for e in self.entries})
        if folds and folds != list(range(len(folds))):
            raise ValueError(f"fold indices must be contiguous from 0, got {folds}")
        for e in self.entries:
            if not 0 <= e.label < len(self.class_names):
                raise ValueError(f"label {e.label} out of range for {len(self.class_names)} classes")

    def __len__(self):
        return len(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() or not self.root else Path(self.root) / p

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=int)


def _fmt_aug(aug):
    return "" if aug is None else repr(float(aug))


def manifest_to_csv(manifest: DatasetManifest) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path", "label", "fold", "aug"])
    for e in manifest.entries:
        w.writerow([e.path, manifest.class_names[e.label], e.fold, _fmt_aug(e.aug)])
    return buf.getvalue()


def manifest_from_csv(text: str, class_names=None, root: str = "") -> DatasetManifest:
    """Parse a ``path,label,fold[,aug]`` CSV; label may be a name or an index."""
    rows = list(csv.DictReader(io.StringIO(text)))
    missing = {"path", "label", "fold"} - set(rows[0].keys() if rows else ())
    if rows and missing:
        raise ValueError(f"manifest CSV missing columns: {sorted(missing)}")
    if class_names is None:
        names = []
        for r in rows:
            if r["label"] not in names:
                names.append(r["label"])
        if all(n.isdigit() for n in names):
            class_names = [str(i) for i in range(max(map(int, names)) + 1)] if names else []
        else:
            class_names = sorted(names)
    class_names = list(class_names)
    entries = []
    for r in rows:
        lab = r["label"]
        idx = class_names.index(lab) if lab in class_names else int(lab)
        aug = r.get("aug") or None
        entries.append(ManifestEntry(r["path"], idx, int(r["fold"]), None if aug is None else float(aug)))
    return DatasetManifest(entries, class_names, root=root)


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    return manifest_from_csv(path.read_text(encoding="utf-8"), root=str(path.parent))


def write_manifest(path, manifest: DatasetManifest) -> None:
    Path(path).write_text(manifest_to_csv(manifest), encoding="utf-8", newline="\n")


def augmented_name(path: str, factor: float) -> str:
    stem, ext = os.path.splitext(path)
    return f"{stem}__ps{factor:g}{ext or '.wav'}"


def augment_dataset(manifest: DatasetManifest, factors=PITCH_FACTORS, out_dir=None, workers: int = 1) -> DatasetManifest:
    """Append one pitch-shifted entry per (original, factor), same fold.

    Existing augmented entries are not re-augmented.  When ``out_dir`` is
    given the shifted clips are rendered there as 16-bit WAV files.
    """
    factors = list(factors)
    if not factors:
        raise ValueError("factors must be non-empty")
    originals = [e for e in manifest.entries if e.aug is None]
    new = []
    for e in originals:
        for f in factors:
            new.append(ManifestEntry(augmented_name(e.path, f), e.label, e.fold, float(f)))
    if out_dir is not None:
        out_dir = Path(out_dir)
        jobs = [(manifest.resolve(e), f, out_dir / augmented_name(e.path, f)) for e in originals for f in factors]
        _render_shifts(jobs, workers)
    root = str(out_dir) if out_dir is not None else manifest.root
    if out_dir is not None:
        # originals must stay resolvable from the new root
        originals_abs = [replace(e, path=str(manifest.resolve(e).resolve())) for e in manifest.entries]
        return DatasetManifest(originals_abs + new, manifest.class_names, root=root)
    return DatasetManifest(list(manifest.entries) + new, manifest.class_names, root=root)


def _render_one(job):
    src, factor, dst = job
    dst.parent.mkdir(parents=True, exist_ok=True)
    write_wav(dst, pitch_shift(load_wav(src), factor))


def _render_shifts(jobs, workers):
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(_render_one, jobs))
    else:
        for job in jobs:
            _render_one(job)
