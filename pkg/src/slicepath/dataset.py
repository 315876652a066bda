"""Dataset construction: per-layer normalization to [-1, 1] with exact
round-trips, fixed-length padding with validity masks, photo-to-silhouette
preprocessing, and JSONL + binary-blob persistence.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .gcode import Keypoint, LayerToolpath
from .geometry import FRAME_FILL, IMAGE_SIZE, SliceImage, read_pgm, write_pgm

SCHEMA_VERSION = 1
DEGENERATE_E_EPS = 1e-9
DEFAULT_N_MAX = 512


class DatasetError(Exception):
    """Base class for dataset failures."""


class MaskEmpty(DatasetError):
    """Denormalization got a mask with no valid positions."""


class NoContourFound(DatasetError):
    """Photo preprocessing found no connected region above minimum area."""


class SchemaVersionMismatch(DatasetError):
    """Manifest was written by an incompatible schema version."""


class ChecksumMismatch(DatasetError):
    """Stored blob does not match its recorded checksum."""


@dataclass(frozen=True)
class NormalizationParams:
    """Cached per-layer transform: XY shares one scale, E is min-max."""

    xy_mid: tuple[float, float]
    xy_scale: float  # half of the larger bounding-box dimension
    e_min: float
    e_max: float
    degenerate_e: bool = False

    def __post_init__(self):
        if self.xy_scale <= 0:
            raise ValueError("xy_scale must be positive")
        if self.e_max < self.e_min:
            raise ValueError("e_max must be >= e_min")

    def to_json(self) -> dict:
        return {
            "xy_mid": [self.xy_mid[0], self.xy_mid[1]],
            "xy_scale": self.xy_scale,
            "e_min": self.e_min,
            "e_max": self.e_max,
            "degenerate_e": self.degenerate_e,
        }

    @classmethod
    def from_json(cls, data: dict) -> "NormalizationParams":
        return cls(
            xy_mid=(data["xy_mid"][0], data["xy_mid"][1]),
            xy_scale=data["xy_scale"],
            e_min=data["e_min"],
            e_max=data["e_max"],
            degenerate_e=data["degenerate_e"],
        )


@dataclass(frozen=True)
class TrainingRecord:
    """One fixed-length training sample; ``image`` is attached separately."""

    x0: np.ndarray  # (n_max, 3) float32 in [-1, 1], zero on padding
    mask: np.ndarray  # (n_max,) float32, 1 on the first true_len positions
    norm: NormalizationParams
    true_len: int
    image: SliceImage | None = None

    def with_image(self, image: SliceImage) -> "TrainingRecord":
        return replace(self, image=image)


def normalize_arrays(points: np.ndarray) -> tuple[np.ndarray, NormalizationParams]:
    """Normalize an (n, 3) float64 keypoint array; exact inverse of denormalize.

    XY is centered on the bounding-box midpoint and divided by half the larger
    dimension (shared scale preserves aspect ratio); E is min-max mapped to
    [-1, 1], or zeroed with ``degenerate_e`` when the layer barely extrudes.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
        raise ValueError(f"expected non-empty (n, 3) array, got {points.shape}")
    xy = points[:, :2]
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    mid = (lo + hi) / 2
    scale = float(max(hi[0] - lo[0], hi[1] - lo[1]) / 2)
    if scale <= 0:
        scale = 1.0  # single-point layer; maps onto the origin
    e = points[:, 2]
    e_min, e_max = float(e.min()), float(e.max())
    degenerate = (e_max - e_min) < DEGENERATE_E_EPS
    out = np.empty_like(points)
    out[:, :2] = (xy - mid) / scale
    out[:, 2] = 0.0 if degenerate else 2 * (e - e_min) / (e_max - e_min) - 1
    params = NormalizationParams((float(mid[0]), float(mid[1])), scale, e_min, e_max, degenerate)
    return out, params


def normalize(layer: LayerToolpath, n_max: int = DEFAULT_N_MAX) -> TrainingRecord:
    """Build a fixed-length record: truncate to n_max, normalize, zero-pad."""
    points = np.array([(p.x, p.y, p.e) for p in layer.keypoints], dtype=float)
    points = points[:n_max]
    normalized, params = normalize_arrays(points)
    true_len = len(normalized)
    x0 = np.zeros((n_max, 3), dtype=np.float32)
    x0[:true_len] = normalized.astype(np.float32)
    mask = np.zeros(n_max, dtype=np.float32)
    mask[:true_len] = 1.0
    return TrainingRecord(x0=x0, mask=mask, norm=params, true_len=true_len)


def denormalize(
    x0: np.ndarray,
    mask: np.ndarray,
    norm: NormalizationParams,
    target_scale_mm: float | None = None,
    extrusion_multiplier: float = 1.0,
) -> list[Keypoint]:
    """Invert normalization on mask-valid positions.

    ``target_scale_mm`` replaces the stored larger bounding dimension (the
    geometry is similar, uniformly rescaled); ``extrusion_multiplier`` scales
    E deltas anchored at the first valid keypoint.
    """
    x0 = np.asarray(x0, dtype=float)
    mask = np.asarray(mask, dtype=float)
    valid = x0[mask > 0.5]
    if len(valid) == 0:
        raise MaskEmpty("no valid positions under mask")
    scale = norm.xy_scale if target_scale_mm is None else target_scale_mm / 2
    xy = valid[:, :2] * scale + np.asarray(norm.xy_mid)
    if norm.degenerate_e:
        e = np.full(len(valid), norm.e_min)
    else:
        e = (valid[:, 2] + 1) / 2 * (norm.e_max - norm.e_min) + norm.e_min
    if extrusion_multiplier != 1.0:
        deltas = np.diff(e, prepend=e[0])
        e = e[0] + np.cumsum(extrusion_multiplier * deltas)
    return [Keypoint(float(x), float(y), float(ev)) for (x, y), ev in zip(xy, e)]


# ---------------------------------------------------------------------------
# Photo / sketch preprocessing

def silhouette_from_photo(image: np.ndarray) -> SliceImage:
    """Extract the dominant closed region of a grayscale photo or sketch.

    Pipeline: Gaussian blur, Sobel gradient magnitude, Otsu threshold, largest
    connected edge component, hole fill, then reframe to the standard 224x224
    layout (bounding box centered, 90% fill).
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ValueError(f"expected single-channel image, got shape {image.shape}")
    if image.max() > 1.5:
        image = image / 255.0
    sigma = max(1.5, min(image.shape) / 150)
    smoothed = ndimage.gaussian_filter(image, sigma=sigma)
    gx = ndimage.sobel(smoothed, axis=1)
    gy = ndimage.sobel(smoothed, axis=0)
    magnitude = np.hypot(gx, gy)
    if magnitude.max() - magnitude.min() < 1e-6:
        raise NoContourFound("image has no gradient structure")
    edges = magnitude > _otsu_threshold(magnitude)
    labels, count = ndimage.label(edges, structure=np.ones((3, 3), dtype=int))
    if count == 0:
        raise NoContourFound("no edge components above threshold")
    sizes = ndimage.sum_labels(edges, labels, index=np.arange(1, count + 1))
    band = labels == (1 + int(np.argmax(sizes)))
    filled = ndimage.binary_fill_holes(band)
    min_area = max(64, int(1e-4 * image.size))
    if filled.sum() < min_area:
        raise NoContourFound(f"largest region below minimum area {min_area}px")
    # the fill extends to the outer side of the edge band; shrink back to its
    # ridge so repeated application does not inflate the region
    boundary = filled & ~ndimage.binary_erosion(filled)
    half_thickness = int(round(band.sum() / max(boundary.sum(), 1) / 2))
    if half_thickness > 0:
        eroded = ndimage.binary_erosion(filled, iterations=half_thickness)
        if eroded.sum() >= min_area:
            filled = eroded
    return _reframe_mask(filled)


def _otsu_threshold(values: np.ndarray) -> float:
    hist, edges = np.histogram(values.ravel(), bins=256)
    centers = (edges[:-1] + edges[1:]) / 2
    weight = hist.astype(float)
    total = weight.sum()
    w0 = np.cumsum(weight)
    w1 = total - w0
    m0 = np.cumsum(weight * centers)
    mean_total = m0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m0 / w0
        mu1 = (mean_total - m0) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between[~np.isfinite(between)] = 0.0
    return float(centers[int(np.argmax(between))])


def _reframe_mask(mask: np.ndarray) -> SliceImage:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    crop = mask[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1].astype(float)
    target = FRAME_FILL * IMAGE_SIZE
    factor = target / max(crop.shape)
    scaled = ndimage.zoom(crop, factor, order=1, grid_mode=True, mode="grid-constant")
    scaled = scaled >= 0.5
    pixels = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    h, w = scaled.shape
    top = (IMAGE_SIZE - h) // 2
    left = (IMAGE_SIZE - w) // 2
    pixels[top : top + h, left : left + w] = scaled
    return SliceImage(pixels, pixel_pitch=1.0, origin=(-IMAGE_SIZE / 2, -IMAGE_SIZE / 2))


# ---------------------------------------------------------------------------
# Persistence: JSONL manifest + PGM images + f32 LE blobs

def write_records(records, out_dir) -> Path:
    """Write records under ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = list(records)
    n_max = len(records[0].x0) if records else DEFAULT_N_MAX
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as fh:
        header = {"schema_version": SCHEMA_VERSION, "n_max": n_max, "count": len(records)}
        fh.write(json.dumps(header) + "\n")
        for index, record in enumerate(records):
            rid = f"r{index:05d}"
            x0_bytes = record.x0.astype("<f4").tobytes()
            mask_bytes = record.mask.astype("<f4").tobytes()
            (out_dir / f"{rid}_x0.f32").write_bytes(x0_bytes)
            (out_dir / f"{rid}_mask.f32").write_bytes(mask_bytes)
            entry = {
                "id": rid,
                "true_len": record.true_len,
                "norm": record.norm.to_json(),
                "x0": f"{rid}_x0.f32",
                "mask": f"{rid}_mask.f32",
                "image": None,
                "crc32": {
                    "x0": zlib.crc32(x0_bytes),
                    "mask": zlib.crc32(mask_bytes),
                },
            }
            if record.image is not None:
                image_name = f"{rid}.pgm"
                write_pgm(record.image, out_dir / image_name)
                entry["image"] = image_name
                entry["crc32"]["image"] = zlib.crc32((out_dir / image_name).read_bytes())
            fh.write(json.dumps(entry) + "\n")
    return manifest


def read_records(path) -> list[TrainingRecord]:
    """Read records back; exact inverse of write_records."""
    path = Path(path)
    manifest = path if path.is_file() else path / "manifest.jsonl"
    base = manifest.parent
    with open(manifest) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise SchemaVersionMismatch("manifest is empty")
    header = json.loads(lines[0])
    if header.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionMismatch(
            f"expected schema_version {SCHEMA_VERSION}, got {header.get('schema_version')}"
        )
    n_max = header["n_max"]
    records = []
    for line in lines[1:]:
        entry = json.loads(line)
        x0_bytes = (base / entry["x0"]).read_bytes()
        mask_bytes = (base / entry["mask"]).read_bytes()
        if zlib.crc32(x0_bytes) != entry["crc32"]["x0"]:
            raise ChecksumMismatch(f"{entry['id']}: x0 blob corrupted")
        if zlib.crc32(mask_bytes) != entry["crc32"]["mask"]:
            raise ChecksumMismatch(f"{entry['id']}: mask blob corrupted")
        x0 = np.frombuffer(x0_bytes, dtype="<f4").reshape(n_max, 3).copy()
        mask = np.frombuffer(mask_bytes, dtype="<f4").copy()
        image = None
        if entry["image"] is not None:
            image_bytes = (base / entry["image"]).read_bytes()
            if zlib.crc32(image_bytes) != entry["crc32"]["image"]:
                raise ChecksumMismatch(f"{entry['id']}: image corrupted")
            image = read_pgm(base / entry["image"])
        records.append(
            TrainingRecord(
                x0=x0,
                mask=mask,
                norm=NormalizationParams.from_json(entry["norm"]),
                true_len=entry["true_len"],
                image=image,
            )
        )
    return records
