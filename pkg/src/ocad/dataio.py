"""Frame-sequence ingestion, center-slice extraction, augmentation, and
dataset manifests.

On-disk formats: binary P5 PGM (8-bit, maxval 255) for images, plain-text
key=value metadata per sequence directory, UTF-8 CSV manifests with header
``path,subject_id,eye,orientation,label,role``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

EYES = ("left", "right")
LABELS = ("pd", "control")
ORIENTATIONS = ("horizontal", "vertical")

META_FILENAME = "meta.txt"

# augmentation guard rails
MAX_ROTATION_DEG = 15.0
MAX_TRANSLATION_FRAC = 0.10
RESCALE_RANGE = (0.9, 1.1)
MAX_NOISE_SIGMA = 8.0


# ---------------------------------------------------------------------------
# PGM I/O

def read_pgm(path):
    """Read a binary (P5) 8-bit PGM into a uint8 array."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a P5 PGM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: expected maxval 255, got {maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    if pixels.size != width * height:
        raise ValueError(f"{path}: truncated pixel data")
    return pixels.reshape(height, width).copy()


def write_pgm(path, pixels):
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    pixels = pixels.astype(np.uint8)
    h, w = pixels.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())


# ---------------------------------------------------------------------------
# Domain types

@dataclass
class FrameSequence:
    frames: np.ndarray          # (T, H, W) uint8
    fps: float
    subject_id: str
    eye: str
    class_label: str

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if self.frames.ndim != 3 or self.frames.shape[0] < 2:
            raise ValueError("need at least two frames of identical size")
        if self.eye not in EYES:
            raise ValueError(f"eye must be one of {EYES}")
        if self.class_label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}")


@dataclass
class SliceImage:
    pixels: np.ndarray          # (T, S) uint8, time rows x space columns
    orientation: str
    subject_id: str
    eye: str
    class_label: str
    sample_index: int = 0
    augmentation: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise ValueError("slice pixels must be 2-D")
        if self.orientation not in ORIENTATIONS:
            raise ValueError(f"orientation must be one of {ORIENTATIONS}")


@dataclass
class ManifestRow:
    path: str
    subject_id: str
    eye: str
    orientation: str
    label: str
    role: str


@dataclass
class DatasetManifest:
    rows: list = field(default_factory=list)

    def counts_per_class(self):
        counts = {lab: 0 for lab in LABELS}
        for row in self.rows:
            counts[row.label] += 1
        return counts

    def subjects(self, label=None, role=None):
        out = []
        for row in self.rows:
            if label is not None and row.label != label:
                continue
            if role is not None and row.role != role:
                continue
            if row.subject_id not in out:
                out.append(row.subject_id)
        return out

    def select(self, label=None, role=None, subjects=None):
        out = []
        for row in self.rows:
            if label is not None and row.label != label:
                continue
            if role is not None and row.role != role:
                continue
            if subjects is not None and row.subject_id not in subjects:
                continue
            out.append(row)
        return out


MANIFEST_HEADER = ["path", "subject_id", "eye", "orientation", "label", "role"]


def write_manifest(manifest: DatasetManifest, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for row in manifest.rows:
            writer.writerow([row.path, row.subject_id, row.eye,
                             row.orientation, row.label, row.role])


def read_manifest(path, validate=False):
    manifest = DatasetManifest()
    base = Path(path).parent
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != MANIFEST_HEADER:
            raise ValueError(f"{path}: bad manifest header {header}")
        for rec in reader:
            manifest.rows.append(ManifestRow(*rec))
    if validate:
        for row in manifest.rows:
            p = base / row.path
            if not p.exists():
                raise ValueError(f"manifest path missing: {p}")
            read_pgm(p)
    return manifest


# ---------------------------------------------------------------------------
# Loading frame sequences

def load_frames(directory):
    """Load a sequence directory: lexicographically ordered P5 PGM frames of
    equal size plus a `meta.txt` with subject_id, eye, fps, label."""
    directory = Path(directory)
    meta_path = directory / META_FILENAME
    if not meta_path.exists():
        raise ValueError(f"{directory}: missing {META_FILENAME}")
    meta = {}
    for line in meta_path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{meta_path}: malformed line {line!r}")
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    for key in ("subject_id", "eye", "fps", "label"):
        if key not in meta:
            raise ValueError(f"{meta_path}: missing key {key!r}")
    frame_paths = sorted(directory.glob("*.pgm"))
    if len(frame_paths) < 2:
        raise ValueError(f"{directory}: need at least two frames")
    frames = []
    shape = None
    for i, p in enumerate(frame_paths):
        img = read_pgm(p)
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise ValueError(
                f"{directory}: frame {i} ({p.name}) has size {img.shape}, "
                f"expected {shape}")
        frames.append(img)
    return FrameSequence(frames=np.stack(frames), fps=float(meta["fps"]),
                         subject_id=meta["subject_id"], eye=meta["eye"],
                         class_label=meta["label"])


# ---------------------------------------------------------------------------
# Slice extraction

def extract_center_slices(seq: FrameSequence):
    """Center horizontal and vertical spatiotemporal slices.

    horizontal[t, x] = frame_t[H//2, x]; vertical[t, y] = frame_t[y, W//2]
    (lower-median center for even dimensions).
    """
    _, h, w = seq.frames.shape
    horizontal = seq.frames[:, h // 2, :].copy()
    vertical = seq.frames[:, :, w // 2].copy()
    common = dict(subject_id=seq.subject_id, eye=seq.eye,
                  class_label=seq.class_label)
    return (SliceImage(pixels=horizontal, orientation="horizontal", **common),
            SliceImage(pixels=vertical, orientation="vertical", **common))


# ---------------------------------------------------------------------------
# Augmentation

@dataclass(frozen=True)
class AugmentOp:
    """One augmentation draw. Params left None are drawn from the default
    (guard-rail) ranges using the rng."""

    kind: str                   # translate | rotate | mirror | rescale | noise
    dt: float | None = None     # translate: pixels along time axis
    dx: float | None = None     # translate: pixels along space axis
    angle: float | None = None  # rotate: degrees
    factor: float | None = None  # rescale
    sigma: float | None = None  # noise: intensity std


def _bilinear(img, rows, cols, fill):
    """Sample `img` at float coordinates with out-of-frame fill."""
    h, w = img.shape
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    fr = rows - r0
    fc = cols - c0
    out = np.zeros(rows.shape)
    for dr in (0, 1):
        for dc in (0, 1):
            rr = r0 + dr
            cc = c0 + dc
            weight = ((fr if dr else 1 - fr) * (fc if dc else 1 - fc))
            inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            vals = np.where(inside, img[np.clip(rr, 0, h - 1),
                                        np.clip(cc, 0, w - 1)], fill)
            out += weight * vals
    return out


def _affine_resample(pixels, matrix, offset, fill):
    """Inverse-mapped affine warp: src = matrix @ dst + offset."""
    h, w = pixels.shape
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    src_r = matrix[0, 0] * rr + matrix[0, 1] * cc + offset[0]
    src_c = matrix[1, 0] * rr + matrix[1, 1] * cc + offset[1]
    return _bilinear(pixels.astype(np.float64), src_r, src_c, fill)


def _apply_op(img: SliceImage, op: AugmentOp, rng):
    px = img.pixels.astype(np.float64)
    h, w = px.shape
    fill = float(np.median(px))
    if op.kind == "mirror":
        out = px[:, ::-1]
        tag = "mirror"
    elif op.kind == "translate":
        dt = op.dt if op.dt is not None else rng.uniform(-0.1, 0.1) * h
        dx = op.dx if op.dx is not None else rng.uniform(-0.1, 0.1) * w
        if abs(dt) > MAX_TRANSLATION_FRAC * h or abs(dx) > MAX_TRANSLATION_FRAC * w:
            raise ValueError(f"translation ({dt}, {dx}) outside +-10% of extent")
        if dt == 0.0 and dx == 0.0:
            out = px
        else:
            out = _affine_resample(px, np.eye(2), np.array([-dt, -dx]), fill)
        tag = f"translate{dt:+.2f},{dx:+.2f}"
    elif op.kind == "rotate":
        angle = op.angle if op.angle is not None else rng.uniform(-15.0, 15.0)
        if abs(angle) > MAX_ROTATION_DEG:
            raise ValueError(f"rotation angle {angle} outside +-15 degrees")
        if angle == 0.0:
            out = px
        else:
            th = np.deg2rad(angle)
            rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
            center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
            out = _affine_resample(px, rot, center - rot @ center, fill)
        tag = f"rotate{angle:+.2f}"
    elif op.kind == "rescale":
        factor = op.factor if op.factor is not None else rng.uniform(*RESCALE_RANGE)
        if not (RESCALE_RANGE[0] <= factor <= RESCALE_RANGE[1]):
            raise ValueError(f"rescale factor {factor} outside {RESCALE_RANGE}")
        if factor == 1.0:
            out = px
        else:
            mat = np.eye(2) / factor
            center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
            out = _affine_resample(px, mat, center - mat @ center, fill)
        tag = f"rescale{factor:.3f}"
    elif op.kind == "noise":
        sigma = op.sigma if op.sigma is not None else rng.uniform(1.0, MAX_NOISE_SIGMA)
        if not (0.0 <= sigma <= MAX_NOISE_SIGMA):
            raise ValueError(f"noise sigma {sigma} outside [0, {MAX_NOISE_SIGMA}]")
        out = px + rng.normal(0.0, sigma, px.shape)
        tag = f"noise{sigma:.2f}"
    else:
        raise ValueError(f"unknown augmentation kind {op.kind!r}")
    out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    new_tag = f"{img.augmentation}+{tag}" if img.augmentation else tag
    return replace(img, pixels=out, augmentation=new_tag)


def augment(img: SliceImage, ops, seed=0):
    """Apply each augmentation op independently to `img`; one output per op,
    reproducible from the seed."""
    rng = np.random.default_rng(seed)
    return [_apply_op(img, op, rng) for op in ops]


# ---------------------------------------------------------------------------
# Network input conversion

def resize_bilinear(pixels, out_h, out_w):
    """Half-pixel-centered bilinear resize; identity when sizes match."""
    pixels = np.asarray(pixels, dtype=np.float64)
    h, w = pixels.shape
    if h < 1 or w < 1:
        raise ValueError("degenerate image")
    if (h, w) == (out_h, out_w):
        return pixels.copy()
    rr = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    cc = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    rr = np.clip(rr, 0, h - 1)
    cc = np.clip(cc, 0, w - 1)
    rows, cols = np.meshgrid(rr, cc, indexing="ij")
    return _bilinear(pixels, rows, cols, fill=0.0)


def to_net_input(img: SliceImage, size=64):
    """Bilinear resize to size x size, then map intensities 0..255 to [-1, 1].
    Returns a (1, size, size) float64 tensor."""
    h, w = img.pixels.shape
    if h < 8 or w < 8:
        raise ValueError("slice image must be at least 8x8")
    resized = resize_bilinear(img.pixels, size, size)
    scaled = resized / 127.5 - 1.0
    return scaled[None, :, :]
