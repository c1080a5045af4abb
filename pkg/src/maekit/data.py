"""Image ingestion, dataset manifests, splits, and synthetic generators.

The canonical on-disk image format is the binary 8-bit graymap (P5 with
maxval 255): bit-exact, dependency-free, and trivially round-trippable.
Pixel byte v maps to the float v/255; writing inverts with round-to-nearest.
Segmentation masks are P5 files holding {0, 255}, thresholded at 128 on load.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# P5 graymap I/O
# ---------------------------------------------------------------------------

def _next_header_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise DataError("truncated graymap header")
    return data[start:pos], pos


def load_image_bytes(path) -> np.ndarray:
    """Raw pixel bytes of a binary P5 graymap as a uint8 [H, W] array."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    data = path.read_bytes()
    if data[:2] != b"P5" or not data[2:3].isspace():
        raise DataError(f"{path}: not a binary graymap (magic {data[:2]!r})")
    pos = 2
    try:
        width_tok, pos = _next_header_token(data, pos)
        height_tok, pos = _next_header_token(data, pos)
        maxval_tok, pos = _next_header_token(data, pos)
        width, height, maxval = int(width_tok), int(height_tok), int(maxval_tok)
    except (DataError, ValueError) as exc:
        raise DataError(f"{path}: malformed graymap header ({exc})") from None
    if width <= 0 or height <= 0:
        raise DataError(f"{path}: non-positive dimensions {width}x{height}")
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}, expected 255")
    pos += 1  # single whitespace byte separates header from raster
    raster = data[pos:]
    if len(raster) < width * height:
        raise DataError(
            f"{path}: truncated pixel data ({len(raster)} of {width * height} bytes)"
        )
    if len(raster) > width * height:
        raise DataError(f"{path}: trailing bytes after pixel data")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width)


def load_image(path) -> np.ndarray:
    """Load a P5 graymap as float32 [1, H, W] with values in [0, 1]."""
    pixels = load_image_bytes(path)
    return (pixels.astype(np.float32) / np.float32(255.0))[None, :, :]


def write_image(path, image: np.ndarray) -> None:
    """Write [1, H, W] or [H, W] floats in [0, 1] as a binary P5 graymap."""
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[0]
    quantized = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    write_image_bytes(path, quantized)


def write_image_bytes(path, pixels: np.ndarray) -> None:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def resize_bilinear(image: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resample to target x target using half-pixel centers.

    Source coordinate of output cell i is (i + 0.5) * (S / T) - 0.5, clamped
    to the valid range; an identity resize copies bit-exactly.
    """
    img = np.asarray(image)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    c, h, w = img.shape
    if h == target and w == target:
        out = img.copy()
        return out[0] if squeeze else out

    def axis_weights(src: int):
        coords = (np.arange(target, dtype=np.float64) + 0.5) * (src / target) - 0.5
        coords = np.clip(coords, 0.0, src - 1.0)
        lo = np.floor(coords).astype(np.int64)
        hi = np.minimum(lo + 1, src - 1)
        frac = coords - lo
        return lo, hi, frac

    y0, y1, fy = axis_weights(h)
    x0, x1, fx = axis_weights(w)
    imgf = img.astype(np.float64)
    top = imgf[:, y0][:, :, x0] * (1 - fx) + imgf[:, y0][:, :, x1] * fx
    bot = imgf[:, y1][:, :, x0] * (1 - fx) + imgf[:, y1][:, :, x1] * fx
    out = (top * (1 - fy[:, None]) + bot * fy[:, None]).astype(img.dtype)
    return out[0] if squeeze else out


def load_mask(path, target: int | None = None) -> np.ndarray:
    """Load a binary mask: byte >= 128 is foreground. Returns float32
    [1, H, W] of {0, 1}; resizing re-thresholds at 0.5."""
    binary = (load_image_bytes(path) >= 128).astype(np.float32)[None]
    if target is not None and binary.shape[-1] != target:
        binary = (resize_bilinear(binary, target) >= 0.5).astype(np.float32)
    return binary


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

TASKS = ("pretrain", "classify", "segment")


@dataclass(frozen=True)
class ManifestEntry:
    image: str
    label: int | None = None
    mask: str | None = None


@dataclass
class DatasetManifest:
    root: Path
    task: str
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        seen = set()
        for e in self.entries:
            if e.image in seen:
                raise ConfigError(f"duplicate image path in manifest: {e.image}")
            seen.add(e.image)
            if self.task == "classify" and e.label is None:
                raise ConfigError(f"classify entry {e.image} is missing a label")
            if self.task == "segment" and e.mask is None:
                raise ConfigError(f"segment entry {e.image} is missing a mask path")
            if self.task == "pretrain" and (e.label is not None or e.mask is not None):
                raise ConfigError(f"pretrain entry {e.image} must carry no annotation")

    def __len__(self):
        return len(self.entries)

    def image_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.image

    def mask_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.mask


def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = []
    for e in manifest.entries:
        if manifest.task == "classify":
            lines.append(f"{e.image}\t{e.label}")
        elif manifest.task == "segment":
            lines.append(f"{e.image}\t{e.mask}")
        else:
            lines.append(e.image)
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_manifest(path, task: str, root=None) -> DatasetManifest:
    path = Path(path)
    root = Path(root) if root is not None else path.parent
    entries = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        parts = line.split("\t")
        if task == "classify":
            entries.append(ManifestEntry(parts[0], label=int(parts[1])))
        elif task == "segment":
            entries.append(ManifestEntry(parts[0], mask=parts[1]))
        else:
            entries.append(ManifestEntry(parts[0]))
    return DatasetManifest(root, task, entries)


def write_rejection_report(rejections: list[tuple[str, str]], path) -> None:
    lines = [f"{p}\t{reason}" for p, reason in rejections]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def _try_load(path: Path) -> str | None:
    """Return a rejection reason, or None if the file parses."""
    try:
        load_image_bytes(path)
        return None
    except DataError as exc:
        return str(exc)


def scan_and_validate(root, task: str) -> tuple[DatasetManifest, list[tuple[str, str]]]:
    """Deterministic lexicographic scan; unparseable files go to the
    rejection report instead of crashing the run."""
    root = Path(root)
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a readable directory")
    entries: list[ManifestEntry] = []
    rejections: list[tuple[str, str]] = []

    def consider(path: Path, **kwargs) -> None:
        reason = _try_load(path)
        if reason is None:
            entries.append(ManifestEntry(str(path.relative_to(root)), **kwargs))
        else:
            rejections.append((str(path.relative_to(root)), reason))

    if task == "pretrain":
        for path in sorted(p for p in root.rglob("*") if p.is_file()):
            consider(path)
    elif task == "classify":
        class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
        for label, class_dir in enumerate(class_dirs):
            for path in sorted(p for p in class_dir.rglob("*") if p.is_file()):
                consider(path, label=label)
    else:
        image_dir = root / "images"
        mask_dir = root / "masks"
        if not image_dir.is_dir() or not mask_dir.is_dir():
            raise DataError(
                f"segment dataset {root} must contain images/ and masks/ directories"
            )
        for path in sorted(p for p in image_dir.iterdir() if p.is_file()):
            mask = mask_dir / path.name
            rel = str(path.relative_to(root))
            if not mask.is_file():
                rejections.append((rel, f"missing mask {mask.relative_to(root)}"))
                continue
            reason = _try_load(path) or _try_load(mask)
            if reason is None:
                entries.append(ManifestEntry(rel, mask=str(mask.relative_to(root))))
            else:
                rejections.append((rel, reason))

    if not entries:
        logger.warning("no valid %s images under %s", task, root)
    return DatasetManifest(root, task, entries), rejections


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise ConfigError(f"split ratios must be three positive values, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must sum to 1, got {sum(self.ratios)}")


def split(manifest: DatasetManifest, spec: SplitSpec
          ) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Seeded permutation cut into contiguous train/val/test slices.

    Slice boundaries sit at ceil(n * cumulative_ratio): each fractional
    remainder is absorbed by the earliest split whose cumulative quota it
    completes, which keeps the slices disjoint and exhaustive.
    """
    n = len(manifest.entries)
    if n == 0:
        raise ConfigError("cannot split an empty manifest")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed)))
    order = rng.permutation(n)
    cum = 0.0
    bounds = []
    for ratio in spec.ratios[:-1]:
        cum += ratio
        bounds.append(min(n, math.ceil(n * cum)))
    bounds.append(n)
    names = ("train", "val", "test")
    out = []
    start = 0
    for name, stop in zip(names, bounds):
        picked = [manifest.entries[i] for i in order[start:stop]]
        if not picked:
            logger.warning("split %r is empty (%d entries at %s)", name, n, spec.ratios)
        out.append(DatasetManifest(manifest.root, manifest.task, picked))
        start = stop
    return tuple(out)


# ---------------------------------------------------------------------------
# loading into arrays
# ---------------------------------------------------------------------------

def load_images(manifest: DatasetManifest, target: int) -> np.ndarray:
    """Stack every manifest image as float32 [n, 1, target, target]."""
    if not manifest.entries:
        raise ConfigError("manifest has no entries to load")
    stack = [resize_bilinear(load_image(manifest.image_path(e)), target)
             for e in manifest.entries]
    return np.stack(stack)


def load_labels(manifest: DatasetManifest) -> np.ndarray:
    return np.array([e.label for e in manifest.entries], dtype=np.int64)


def load_masks(manifest: DatasetManifest, target: int) -> np.ndarray:
    return np.stack([load_mask(manifest.mask_path(e), target) for e in manifest.entries])


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------

def _blob_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth random field: a sum of Gaussians scaled to [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    fieldsum = np.zeros((size, size))
    for _ in range(int(rng.integers(2, 6))):
        cy, cx = rng.uniform(0, size, size=2)
        sigma = rng.uniform(size / 8, size / 3)
        amp = rng.uniform(0.4, 1.0)
        fieldsum += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    lo, hi = fieldsum.min(), fieldsum.max()
    if hi - lo < 1e-12:
        return np.zeros((size, size), dtype=np.float32)
    return ((fieldsum - lo) / (hi - lo)).astype(np.float32)


# Intensity/area parameters are chosen so the per-image mean intensity of
# rectangles and rings cannot overlap: rectangles fill >= 20% of the frame,
# rings < 13%, on a 0.15 background with 0.85 foreground.
_BG, _FG = 0.15, 0.85
_NOISE_STD = 0.03


def _shape_image(rng: np.random.Generator, size: int, kind: str
                 ) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = rng.uniform(0.38 * size, 0.62 * size)
    cx = rng.uniform(0.38 * size, 0.62 * size)
    if kind == "rect":
        hh = rng.uniform(0.225 * size, 0.31 * size)
        hw = rng.uniform(0.225 * size, 0.31 * size)
        mask = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    else:
        outer = rng.uniform(0.22 * size, 0.30 * size)
        inner = 0.75 * outer
        dist = np.hypot(yy - cy, xx - cx)
        mask = (dist <= outer) & (dist >= inner)
    noise = rng.normal(0.0, _NOISE_STD, size=(size, size))
    image = np.clip(np.where(mask, _FG, _BG) + noise, 0.0, 1.0).astype(np.float32)
    return image, mask.astype(np.uint8)


def gen_synthetic(kind: str, n: int, size: int, seed: int, out_dir
                  ) -> DatasetManifest:
    """Materialize a synthetic dataset on disk plus its manifest.tsv.

    pretrain: smooth Gaussian blobs. classify: class 0 = filled rectangle,
    class 1 = ring. segment: the same shapes with exact binary masks.
    Fully determined by the seed.
    """
    if kind not in TASKS:
        raise ConfigError(f"unknown synthetic dataset kind {kind!r}")
    if n <= 0:
        raise ConfigError(f"sample count must be positive, got {n}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    entries: list[ManifestEntry] = []

    if kind == "pretrain":
        for i in range(n):
            name = f"img_{i:05d}.pgm"
            write_image(out_dir / name, _blob_image(rng, size))
            entries.append(ManifestEntry(name))
    elif kind == "classify":
        for label in (0, 1):
            (out_dir / f"class_{label}").mkdir(exist_ok=True)
        for i in range(n):
            label = i % 2
            image, _ = _shape_image(rng, size, "rect" if label == 0 else "ring")
            name = f"class_{label}/img_{i:05d}.pgm"
            write_image(out_dir / name, image)
            entries.append(ManifestEntry(name, label=label))
    else:
        (out_dir / "images").mkdir(exist_ok=True)
        (out_dir / "masks").mkdir(exist_ok=True)
        for i in range(n):
            image, mask = _shape_image(rng, size, "rect" if i % 2 == 0 else "ring")
            name = f"img_{i:05d}.pgm"
            write_image(out_dir / "images" / name, image)
            write_image_bytes(out_dir / "masks" / name, mask * np.uint8(255))
            entries.append(ManifestEntry(f"images/{name}", mask=f"masks/{name}"))

    manifest = DatasetManifest(out_dir, kind, entries)
    write_manifest(manifest, out_dir / "manifest.tsv")
    return manifest
