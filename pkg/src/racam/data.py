"""Synthetic scratch-defect images, PGM files and the on-disk dataset layout.

Layout of a dataset directory::

    labels.csv      header ``id,label``; label 1 = defective
    images/<id>.pgm
    masks/<id>.pgm  optional; 255 marks defect pixels
"""

from __future__ import annotations

import csv
import hashlib
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import make_rng


class PGMError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class SampleRecord:
    image: np.ndarray  # [1,H,W] float32 in [0,1]
    mask: np.ndarray | None  # [1,H,W] uint8 in {0,1}; None when unannotated
    label: int
    id: str

    def __post_init__(self):
        if self.mask is not None:
            if self.mask.shape != self.image.shape:
                raise DatasetError(f"{self.id}: mask shape {self.mask.shape} != image shape {self.image.shape}")
            if int(self.mask.any()) != self.label:
                raise DatasetError(f"{self.id}: label {self.label} contradicts mask "
                                   f"with {int(self.mask.sum())} defect pixels")


@dataclass(frozen=True)
class GenParams:
    seed: int = 0
    count: int = 100
    defect_rate: float = 0.5
    size: tuple[int, int] = (96, 288)
    scratch_width: tuple[int, int] = (1, 3)
    intensity: tuple[float, float] = (0.2, 0.5)
    scratches: tuple[int, int] = (1, 2)
    segment_length: tuple[float, float] = (15.0, 50.0)
    texture_amplitude: float = 0.12

    def validate(self) -> None:
        H, W = self.size
        if self.count < 0:
            raise ValueError(f"count must be >= 0, got {self.count}")
        if not 0.0 < self.defect_rate < 1.0:
            raise ValueError(f"defect_rate must lie in (0, 1), got {self.defect_rate}")
        if H <= 0 or W <= 0 or H % 4 or W % 4:
            raise ValueError(f"size must be positive multiples of 4, got {self.size}")
        lo, hi = self.scratch_width
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid scratch width range {self.scratch_width}")
        a, b = self.intensity
        if not 0.0 < a <= b <= 1.0:
            raise ValueError(f"invalid intensity range {self.intensity}")


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------


def _upsample(grid: np.ndarray, H: int, W: int) -> np.ndarray:
    gy = np.linspace(0, grid.shape[0] - 1, H)
    gx = np.linspace(0, grid.shape[1] - 1, W)
    y0 = np.minimum(np.floor(gy).astype(int), grid.shape[0] - 2)
    x0 = np.minimum(np.floor(gx).astype(int), grid.shape[1] - 2)
    fy = (gy - y0)[:, None]
    fx = (gx - x0)[None, :]
    a = grid[y0][:, x0]
    b = grid[y0][:, x0 + 1]
    c = grid[y0 + 1][:, x0]
    d = grid[y0 + 1][:, x0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def value_noise(rng: np.random.Generator, H: int, W: int, amplitude: float) -> np.ndarray:
    """Sum of bilinearly smoothed random grids at halving cell sizes."""
    tex = np.zeros((H, W))
    total = 0.0
    for octave, cell in enumerate((32, 16, 8, 4)):
        grid = rng.random((H // cell + 2, W // cell + 2))
        weight = 0.5 ** octave
        tex += weight * _upsample(grid, H, W)
        total += weight
    tex = tex / total - 0.5
    base = 0.45 + 0.1 * rng.random()
    return base + 2.0 * amplitude * tex


def _segment_distance(py, px, a, b) -> np.ndarray:
    (ay, ax), (by, bx) = a, b
    dy, dx = by - ay, bx - ax
    L2 = dy * dy + dx * dx
    if L2 == 0:
        return np.hypot(py - ay, px - ax)
    t = np.clip(((py - ay) * dy + (px - ax) * dx) / L2, 0.0, 1.0)
    return np.hypot(py - (ay + t * dy), px - (ax + t * dx))


def scratch_mask(rng: np.random.Generator, H: int, W: int, p: GenParams) -> np.ndarray:
    """Rasterise one random polyline; pixels whose centre lies within width/2."""
    n_vertices = int(rng.integers(2, 5))
    width = int(rng.integers(p.scratch_width[0], p.scratch_width[1] + 1))
    pts = [(rng.uniform(4, H - 5), rng.uniform(4, W - 5))]
    angle = rng.uniform(0, 2 * math.pi)
    for _ in range(n_vertices - 1):
        angle += rng.normal(0.0, 0.6)
        length = rng.uniform(*p.segment_length)
        y = float(np.clip(pts[-1][0] + length * math.sin(angle), 0, H - 1))
        x = float(np.clip(pts[-1][1] + length * math.cos(angle), 0, W - 1))
        pts.append((y, x))
    py, px = np.mgrid[0:H, 0:W].astype(np.float64)
    mask = np.zeros((H, W), dtype=bool)
    for a, b in zip(pts[:-1], pts[1:]):
        mask |= _segment_distance(py, px, a, b) <= width / 2.0
    return mask


def defective_indices(p: GenParams) -> np.ndarray:
    n_def = int(math.floor(p.count * p.defect_rate + 0.5))
    order = make_rng(p.seed, stream=0xDEFEC7).permutation(p.count)
    return np.sort(order[:n_def])


def make_sample(p: GenParams, index: int, defective: bool) -> SampleRecord:
    H, W = p.size
    rng = make_rng(p.seed, stream=index)
    img = value_noise(rng, H, W, p.texture_amplitude)
    mask = np.zeros((H, W), dtype=bool)
    if defective:
        for _ in range(int(rng.integers(p.scratches[0], p.scratches[1] + 1))):
            m = scratch_mask(rng, H, W, p)
            sign = 1.0 if rng.random() < 0.5 else -1.0
            img = img + sign * rng.uniform(*p.intensity) * m
            mask |= m
    # 8-bit grid, as a camera would deliver, so PGM round trips are exact
    img = (to_bytes(img).astype(np.float32) / np.float32(255.0))[None]
    return SampleRecord(img, mask.astype(np.uint8)[None], int(defective), f"{index:05d}")


def generate(params: GenParams) -> list[SampleRecord]:
    """Deterministic synthetic dataset; each sample has its own PRNG stream."""
    params.validate()
    defective = set(defective_indices(params).tolist())
    return [make_sample(params, i, i in defective) for i in range(params.count)]


def split_of(sample_id: str) -> str:
    """70/15/15 train/val/test bucket from a SHA-256 of the id."""
    bucket = int.from_bytes(hashlib.sha256(sample_id.encode("utf-8")).digest()[:8], "little") % 100
    if bucket < 70:
        return "train"
    return "val" if bucket < 85 else "test"


def split(samples: list[SampleRecord]) -> dict[str, list[SampleRecord]]:
    out: dict[str, list[SampleRecord]] = {"train": [], "val": [], "test": []}
    for s in samples:
        out[split_of(s.id)].append(s)
    return out


# --------------------------------------------------------------------------
# PGM
# --------------------------------------------------------------------------

_WS = b" \t\r\n\v\f"


def _header_token(buf: bytes, pos: int) -> tuple[bytes, int, int]:
    """Next header token, skipping whitespace and ``#`` comments."""
    while pos < len(buf):
        c = buf[pos : pos + 1]
        if c in _WS and c:
            pos += 1
        elif c == b"#":
            nl = buf.find(b"\n", pos)
            pos = len(buf) if nl < 0 else nl + 1
        else:
            break
    start = pos
    while pos < len(buf) and buf[pos : pos + 1] not in _WS and buf[pos : pos + 1] != b"#":
        pos += 1
    return buf[start:pos], start, pos


def decode_pgm(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    """Parse a binary P5 image with 8-bit samples into ``uint8 [H,W]``."""
    if buf[:2] != b"P5":
        raise PGMError(f"{source}: bad magic {buf[:2]!r} at offset 0, expected b'P5'")
    pos = 2
    vals, starts = [], []
    for what in ("width", "height", "maxval"):
        tok, at, pos = _header_token(buf, pos)
        if not tok:
            raise PGMError(f"{source}: missing {what} at offset {at}")
        if not re.fullmatch(rb"[0-9]+", tok):
            raise PGMError(f"{source}: malformed {what} {tok!r} at offset {at}")
        vals.append(int(tok))
        starts.append(at)
    w, h, maxval = vals
    if w <= 0 or h <= 0:
        raise PGMError(f"{source}: non-positive size {w}x{h} at offset {starts[0]}")
    if not 0 < maxval < 256:
        raise PGMError(f"{source}: unsupported maxval {maxval} (8-bit only) at offset {starts[2]}")
    if pos >= len(buf) or buf[pos : pos + 1] not in _WS:
        raise PGMError(f"{source}: missing whitespace after header at offset {pos}")
    pos += 1
    need = w * h
    if len(buf) - pos < need:
        raise PGMError(f"{source}: short payload, {len(buf) - pos} of {need} bytes at offset {pos}")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w)
    if maxval != 255:
        data = np.round(data.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return data


def encode_pgm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    return b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def to_bytes(values: np.ndarray) -> np.ndarray:
    """Quantise ``[0,1]`` floats to ``round(255 v)``."""
    v = np.asarray(values, dtype=np.float64)
    return np.clip(np.round(v * 255.0), 0, 255).astype(np.uint8)


def write_pgm(values: np.ndarray, path) -> None:
    """Write a ``[H,W]`` or ``[1,H,W]`` array of values in ``[0,1]``."""
    v = np.asarray(values)
    if v.ndim == 3:
        if v.shape[0] != 1:
            raise ValueError(f"write_pgm: expected a single channel, got shape {v.shape}")
        v = v[0]
    Path(path).write_bytes(encode_pgm(to_bytes(v)))


def read_pgm(path) -> np.ndarray:
    """Read a P5 file as ``float32 [1,H,W]`` scaled to ``[0,1]``."""
    raw = decode_pgm(Path(path).read_bytes(), str(path))
    return (raw.astype(np.float32) / np.float32(255.0))[None]


def write_mask(mask: np.ndarray, path) -> None:
    write_pgm(np.asarray(mask, dtype=np.float32), path)


def read_mask(path) -> np.ndarray:
    raw = decode_pgm(Path(path).read_bytes(), str(path))
    return (raw >= 128).astype(np.uint8)[None]


# --------------------------------------------------------------------------
# dataset directories
# --------------------------------------------------------------------------


def save_dataset(samples: list[SampleRecord], root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if any(s.mask is not None for s in samples):
        (root / "masks").mkdir(exist_ok=True)
    with open(root / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"])
        for s in samples:
            w.writerow([s.id, s.label])
            write_pgm(s.image, root / "images" / f"{s.id}.pgm")
            if s.mask is not None:
                write_mask(s.mask, root / "masks" / f"{s.id}.pgm")


def load_dataset(root) -> list[SampleRecord]:
    """Load ``labels.csv`` + ``images/`` (+ ``masks/``), sorted by id.

    A missing mask file for a listed id means an empty mask when ``masks/``
    exists; without ``masks/`` the samples carry image-level labels only.
    """
    root = Path(root)
    manifest = root / "labels.csv"
    if not manifest.is_file():
        raise DatasetError(f"{root}: missing manifest labels.csv")
    labels: dict[str, int] = {}
    with open(manifest, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["id", "label"]:
        raise DatasetError(f"{manifest}: expected header 'id,label'")
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2 or row[1].strip() not in ("0", "1"):
            raise DatasetError(f"{manifest}:{lineno}: malformed row {row!r}")
        sid = row[0].strip()
        if sid in labels:
            raise DatasetError(f"{manifest}:{lineno}: duplicate id {sid!r}")
        labels[sid] = int(row[1])
    mask_dir = root / "masks"
    if mask_dir.is_dir():
        dangling = sorted(p.stem for p in mask_dir.glob("*.pgm") if p.stem not in labels)
        if dangling:
            raise DatasetError(f"{root}: mask without manifest entry for id {dangling[0]!r}")
    samples = []
    for sid in sorted(labels):
        img_path = root / "images" / f"{sid}.pgm"
        if not img_path.is_file():
            raise DatasetError(f"{root}: missing image for id {sid!r}")
        image = read_pgm(img_path)
        mask = None
        if mask_dir.is_dir():
            mp = mask_dir / f"{sid}.pgm"
            mask = read_mask(mp) if mp.is_file() else np.zeros(image.shape, dtype=np.uint8)
            if mask.shape != image.shape:
                raise DatasetError(f"{root}: mask of id {sid!r} has shape {mask.shape}, image {image.shape}")
            if int(mask.any()) != labels[sid]:
                raise DatasetError(f"{root}: id {sid!r} labelled {labels[sid]} but mask has "
                                   f"{int(mask.sum())} defect pixels")
        samples.append(SampleRecord(image, mask, labels[sid], sid))
    return samples


def stack_images(samples: list[SampleRecord]) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float32)


def stack_masks(samples: list[SampleRecord]) -> np.ndarray:
    return np.stack([s.mask for s in samples]).astype(np.uint8)
