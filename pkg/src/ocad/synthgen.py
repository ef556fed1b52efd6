"""Synthetic fixation slice generator.

Two classes with matched first-order statistics: a "pd" class whose gaze
trace carries a 4-7 Hz tremor component, and a "control" class with smooth
drift plus occasional small step displacements. Separability is spectral by
construction, so the downstream models have to learn structure rather than
brightness.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import (
    DatasetManifest,
    LABELS,
    ManifestRow,
    SliceImage,
    write_manifest,
    write_pgm,
)


@dataclass
class SynthConfig:
    fps: float = 60.0
    duration: float = 5.0
    space_extent: int = 210
    pupil_sigma: float = 6.0
    tremor_band: tuple = (4.0, 7.0)
    tremor_amp: tuple = (3.0, 6.0)
    drift_amp: float = 4.0
    jitter_sigma: float = 0.5
    noise_sigma: float = 4.0
    background: float = 30.0
    peak: float = 180.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.tremor_band
        if not (0.0 < lo <= hi < self.fps / 2.0):
            raise ValueError("tremor band must lie inside (0, fps/2)")
        if self.n_samples < 64:
            raise ValueError("duration * fps must be at least 64")

    @property
    def n_samples(self):
        return int(round(self.duration * self.fps))


def synth_trace(class_label, cfg: SynthConfig, rng):
    """Gaze position per frame, in pixels along the slice axis."""
    if class_label not in LABELS:
        raise ValueError(f"unknown class {class_label!r}")
    t_steps = cfg.n_samples
    t = np.arange(t_steps) / cfg.fps
    center = cfg.space_extent / 2.0
    drift_target = rng.uniform(-cfg.drift_amp, cfg.drift_amp)
    trace = center + drift_target * (t / t[-1] if t[-1] > 0 else t)
    if class_label == "pd":
        freq = rng.uniform(*cfg.tremor_band)
        amp = rng.uniform(*cfg.tremor_amp)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        trace = trace + amp * np.sin(2.0 * np.pi * freq * t + phase)
    else:
        n_steps = rng.integers(0, 3)
        for _ in range(n_steps):
            at = rng.integers(t_steps // 8, t_steps - t_steps // 8)
            size = rng.uniform(2.0, 5.0) * rng.choice([-1.0, 1.0])
            trace[at:] += size
    if cfg.jitter_sigma > 0:
        trace = trace + rng.normal(0.0, cfg.jitter_sigma, t_steps)
    return trace


def render_slice(trace, cfg: SynthConfig, rng, orientation="horizontal",
                 subject_id="synthetic", eye="left", class_label="pd",
                 sample_index=0):
    """Render a trace as a T x S slice: dark background with a Gaussian
    bright band centered at trace[t] per row, plus sensor noise."""
    trace = np.clip(np.asarray(trace, dtype=np.float64), 0, cfg.space_extent - 1)
    x = np.arange(cfg.space_extent)
    band = cfg.peak * np.exp(-((x[None, :] - trace[:, None]) ** 2)
                             / (2.0 * cfg.pupil_sigma ** 2))
    img = cfg.background + band
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return SliceImage(pixels=pixels, orientation=orientation,
                      subject_id=subject_id, eye=eye, class_label=class_label,
                      sample_index=sample_index)


@dataclass
class CorpusCounts:
    """Image counts per (label, role). Roles are free-form; the reference
    pipeline uses a single 'pool' role and plans folds by subject."""

    counts: dict = field(default_factory=dict)

    def items(self):
        return self.counts.items()


def _subject_ids(label, n):
    prefix = "pd" if label == "pd" else "ct"
    return [f"{prefix}{i:02d}" for i in range(n)]


def gen_dataset(cfg: SynthConfig, counts, out_dir, master_seed,
                n_subjects=13, train_subjects=10):
    """Generate a slice corpus on disk plus its manifest.

    `counts` maps (label, role) to an image count, e.g.
    {("pd", "train"): 800}. Images are distributed round-robin over the
    role's subjects; 'train' and 'val' roles draw from disjoint subject
    pools so patient-level separation holds by construction. Everything is
    reproducible from `master_seed`.
    """
    counts = dict(counts.items() if hasattr(counts, "items") else counts)
    if not counts:
        raise ValueError("no image counts requested")
    for key, n in counts.items():
        if n < 1:
            raise ValueError(f"count for {key} must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest()
    label_index = {lab: i for i, lab in enumerate(LABELS)}
    role_index = {}
    for (label, role), n in sorted(counts.items()):
        if label not in LABELS:
            raise ValueError(f"unknown label {label!r}")
        role_index.setdefault(role, len(role_index))
        subjects = _subject_ids(label, n_subjects)
        if role == "train":
            subjects = subjects[:train_subjects]
        elif role == "val":
            subjects = subjects[train_subjects:]
        for i in range(n):
            subject = subjects[i % len(subjects)]
            subject_num = int(subject[2:])
            rng = np.random.default_rng(
                (int(master_seed), label_index[label], subject_num, i))
            orientation = "horizontal" if i % 2 == 0 else "vertical"
            eye = "left" if (i // 2) % 2 == 0 else "right"
            trace = synth_trace(label, cfg, rng)
            img = render_slice(trace, cfg, rng, orientation=orientation,
                               subject_id=subject, eye=eye, class_label=label,
                               sample_index=i)
            name = f"{label}_{role}_{subject}_{i:04d}.pgm"
            try:
                write_pgm(out_dir / name, img.pixels)
            except OSError as exc:
                raise OSError(f"failed writing {out_dir / name}: {exc}") from exc
            manifest.rows.append(ManifestRow(
                path=name, subject_id=subject, eye=eye,
                orientation=orientation, label=label, role=role))
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest
