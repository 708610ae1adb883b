"""Synthetic toy corpus: class-dependent tone / chirp / noise / pulse clips."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfilt

from .signal import AudioClip, DatasetManifest, ManifestEntry, write_manifest, write_wav

TOY_CLASSES = ("tone", "chirp", "noise", "pulses")


def _envelope(n, rng):
    env = np.ones(n)
    ramp = int(n * rng.uniform(0.02, 0.1))
    env[:ramp] = np.linspace(0.0, 1.0, ramp)
    env[n - ramp:] = np.linspace(1.0, 0.0, ramp)
    return env


def synth_clip(kind: str, rng, sample_rate_hz=8000, duration_s=1.0) -> np.ndarray:
    n = int(round(sample_rate_hz * duration_s))
    t = np.arange(n) / sample_rate_hz
    if kind == "tone":
        f = rng.uniform(300.0, 1500.0)
        x = np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) + 0.3 * np.sin(4 * np.pi * f * t)
    elif kind == "chirp":
        f0, f1 = rng.uniform(200.0, 600.0), rng.uniform(2000.0, 3500.0)
        phase = 2 * np.pi * (f0 * t + 0.5 * (f1 - f0) * t * t / duration_s)
        x = np.sin(phase)
    elif kind == "noise":
        lo = rng.uniform(300.0, 1000.0)
        hi = min(lo + rng.uniform(800.0, 2000.0), 0.45 * sample_rate_hz)
        sos = butter(4, [lo, hi], btype="band", fs=sample_rate_hz, output="sos")
        x = sosfilt(sos, rng.standard_normal(n))
    elif kind == "pulses":
        rate = rng.uniform(4.0, 10.0)
        f = rng.uniform(800.0, 2500.0)
        gate = (np.sin(2 * np.pi * rate * t) > 0.6).astype(float)
        x = gate * np.sin(2 * np.pi * f * t)
    else:
        raise ValueError(f"unknown toy class {kind!r}")
    x = x * _envelope(n, rng)
    x = x / (np.abs(x).max() + 1e-12) * rng.uniform(0.3, 0.9)
    x = x + 0.01 * rng.standard_normal(n)
    return np.clip(x, -1.0, 1.0)


def toy_corpus(n_per_class=40, n_classes=3, sample_rate_hz=8000, duration_s=1.0, seed=0):
    """Deterministic list of :class:`AudioClip` (class-interleaved) and class names."""
    if not 2 <= n_classes <= len(TOY_CLASSES):
        raise ValueError(f"toy corpus supports 2..{len(TOY_CLASSES)} classes")
    rng = np.random.default_rng(seed)
    names = TOY_CLASSES[:n_classes]
    clips = []
    for i in range(n_per_class):
        for label, kind in enumerate(names):
            x = synth_clip(kind, rng, sample_rate_hz, duration_s)
            clips.append(AudioClip(x, sample_rate_hz, label=label, source_id=f"toy/{kind}_{i:03d}"))
    return clips, names


def write_toy_corpus(out_dir, n_per_class=40, n_classes=3, sample_rate_hz=8000, seed=0, folds=5):
    """Render the toy corpus as 16-bit WAVs plus ``manifest.csv``; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clips, names = toy_corpus(n_per_class, n_classes, sample_rate_hz, seed=seed)
    entries = []
    for i, clip in enumerate(clips):
        rel = clip.source_id.split("/", 1)[1] + ".wav"
        write_wav(out_dir / rel, clip)
        entries.append(ManifestEntry(rel, clip.label, (i // n_classes) % folds))
    manifest = DatasetManifest(entries, names, root=str(out_dir))
    write_manifest(out_dir / "manifest.csv", manifest)
    return manifest
