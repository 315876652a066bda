"""Geometry front end: minimal STL slicing, contour rasterization to 224x224
slice images, and a parametric synthetic generator producing aligned
(slice image, toolpath) pairs at desk scale.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .gcode import Keypoint, LayerToolpath

IMAGE_SIZE = 224
FRAME_FILL = 0.9  # fraction of the image the larger bbox dimension occupies
CHAIN_EPS = 1e-6  # mm; STL vertices repeat exactly in well-formed files
EXTRUSION_PER_MM = 0.05  # mm filament per mm of deposited path


class GeometryError(Exception):
    """Base class for geometry failures."""


class TruncatedFile(GeometryError):
    """Binary STL payload shorter than its declared record count."""


class BadMagic(GeometryError):
    """Input is neither parseable ASCII STL nor a plausible binary STL."""


class OpenContour(GeometryError):
    """Slice segments could not be chained into closed loops."""


class EmptyContour(GeometryError):
    """No loops to rasterize."""


class UnknownShape(GeometryError):
    """ShapeSpec names a shape or infill the generator does not know."""


@dataclass(frozen=True)
class TriangleMesh:
    """Triangle soup in mm; ``triangles`` has shape (n, 3, 3)."""

    triangles: np.ndarray
    degenerate_dropped: int = 0

    def __post_init__(self):
        if self.triangles.ndim != 3 or self.triangles.shape[1:] != (3, 3):
            raise ValueError(f"triangles must be (n, 3, 3), got {self.triangles.shape}")
        if len(self.triangles) < 1:
            raise ValueError("mesh needs at least one triangle")
        if not np.isfinite(self.triangles).all():
            raise ValueError("mesh has non-finite coordinates")

    @property
    def z_range(self) -> tuple[float, float]:
        zs = self.triangles[:, :, 2]
        return float(zs.min()), float(zs.max())


@dataclass(frozen=True)
class SliceContour:
    """Closed 2D loops (each (m, 2) with first == last vertex), in mm."""

    loops: tuple[np.ndarray, ...]

    def __post_init__(self):
        for loop in self.loops:
            if len(loop) < 4 or not np.allclose(loop[0], loop[-1]):
                raise ValueError("each loop needs >= 3 vertices and first == last")

    def perimeter(self) -> float:
        return float(sum(polyline_length(loop) for loop in self.loops))

    def bounds(self) -> tuple[float, float, float, float]:
        points = np.vstack(self.loops)
        return (
            float(points[:, 0].min()),
            float(points[:, 1].min()),
            float(points[:, 0].max()),
            float(points[:, 1].max()),
        )


@dataclass(frozen=True)
class SliceImage:
    """224x224 grayscale raster of a layer cross-section, values in [0, 1].

    ``pixels[i, j]`` samples the point ``origin + ((j + 0.5), (i + 0.5)) * pitch``
    (row index increases with y).
    """

    pixels: np.ndarray
    pixel_pitch: float
    origin: tuple[float, float]

    def __post_init__(self):
        if self.pixels.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"slice image must be {IMAGE_SIZE}x{IMAGE_SIZE}")


def polyline_length(points: np.ndarray) -> float:
    deltas = np.diff(np.asarray(points, dtype=float), axis=0)
    return float(np.hypot(deltas[:, 0], deltas[:, 1]).sum())


def polygon_signed_area(loop: np.ndarray) -> float:
    x, y = loop[:-1, 0], loop[:-1, 1]
    xn, yn = loop[1:, 0], loop[1:, 1]
    return float(0.5 * np.sum(x * yn - xn * y))


def point_in_loop(point, loop: np.ndarray) -> bool:
    """Even-odd crossing test against one closed loop."""
    x, y = point
    p, q = loop[:-1], loop[1:]
    y1, y2 = p[:, 1], q[:, 1]
    crosses = (y1 <= y) != (y2 <= y)
    if not crosses.any():
        return False
    t = (y - y1[crosses]) / (y2[crosses] - y1[crosses])
    xs = p[crosses, 0] + t * (q[crosses, 0] - p[crosses, 0])
    return bool(np.count_nonzero(xs > x) % 2)


# ---------------------------------------------------------------------------
# STL parsing

def parse_stl(data: bytes) -> TriangleMesh:
    """Load a binary or ASCII STL; zero-area triangles are dropped and counted."""
    if _looks_ascii(data):
        triangles = _parse_ascii_stl(data)
    else:
        triangles = _parse_binary_stl(data)
    areas = _triangle_areas(triangles)
    keep = areas > 0.0
    dropped = int((~keep).sum())
    kept = triangles[keep]
    if len(kept) == 0:
        raise BadMagic("no non-degenerate triangles in file")
    return TriangleMesh(kept, degenerate_dropped=dropped)


def _looks_ascii(data: bytes) -> bool:
    head = data[:512].lstrip()
    if not head.lower().startswith(b"solid"):
        return False
    # binary files sometimes start with "solid" too; require a facet keyword
    return b"facet" in data[:4096].lower() or data.lower().rstrip().endswith(b"endsolid")


def _parse_ascii_stl(data: bytes) -> np.ndarray:
    triangles = []
    current: list[list[float]] = []
    for lineno, raw in enumerate(data.decode("utf-8", errors="replace").splitlines(), 1):
        parts = raw.split()
        if not parts:
            continue
        if parts[0] == "vertex":
            if len(parts) != 4:
                raise BadMagic(f"line {lineno}: vertex needs 3 coordinates")
            try:
                current.append([float(v) for v in parts[1:4]])
            except ValueError:
                raise BadMagic(f"line {lineno}: bad vertex number") from None
        elif parts[0] == "endfacet":
            if len(current) != 3:
                raise BadMagic(f"line {lineno}: facet with {len(current)} vertices")
            triangles.append(current)
            current = []
    if not triangles:
        raise BadMagic("ASCII STL contains no facets")
    return np.asarray(triangles, dtype=float)


def _parse_binary_stl(data: bytes) -> np.ndarray:
    if len(data) < 84:
        raise BadMagic(f"binary STL needs an 84-byte header, got {len(data)} bytes")
    (count,) = struct.unpack_from("<I", data, 80)
    need = 84 + 50 * count
    if len(data) < need:
        raise TruncatedFile(f"declared {count} triangles, file holds {(len(data) - 84) // 50}")
    records = np.frombuffer(data[84:need], dtype=np.uint8).reshape(count, 50)
    floats = records[:, :48].copy().view("<f4").reshape(count, 4, 3).astype(float)
    return floats[:, 1:4, :]  # skip per-record normal


def _triangle_areas(triangles: np.ndarray) -> np.ndarray:
    a = triangles[:, 1] - triangles[:, 0]
    b = triangles[:, 2] - triangles[:, 0]
    return 0.5 * np.linalg.norm(np.cross(a, b), axis=1)


def write_binary_stl(mesh: TriangleMesh) -> bytes:
    """Inverse of parse_stl for test fixtures and tooling."""
    out = bytearray(b"\0" * 80)
    out += struct.pack("<I", len(mesh.triangles))
    for tri in mesh.triangles:
        a, b = tri[1] - tri[0], tri[2] - tri[0]
        n = np.cross(a, b)
        norm = np.linalg.norm(n)
        n = n / norm if norm > 0 else n
        out += struct.pack("<12fH", *n.astype(np.float32), *tri.astype(np.float32).ravel(), 0)
    return bytes(out)


# ---------------------------------------------------------------------------
# Slicing

def slice_mesh(mesh: TriangleMesh, z: float) -> SliceContour:
    """Intersect the mesh with the plane z=const and chain closed loops.

    Outer loops are normalized to positive signed area, holes to negative.
    """
    z_min, z_max = mesh.z_range
    if not (z_min < z < z_max):
        raise ValueError(f"z={z} not strictly inside mesh range ({z_min}, {z_max})")
    segments = _plane_segments(mesh.triangles, z)
    if not segments:
        raise OpenContour(f"plane z={z} produced no intersection segments")
    loops = _chain_segments(segments)
    return SliceContour(tuple(_normalize_orientation(loops)))


def _plane_segments(triangles: np.ndarray, z: float) -> list[tuple]:
    d = triangles[:, :, 2] - z
    segments = []
    for tri, dist in zip(triangles, d):
        pts = []
        on_plane = [i for i in range(3) if dist[i] == 0.0]
        if len(on_plane) == 3:
            continue  # coplanar face; boundary comes from its neighbors
        if len(on_plane) == 2:
            i, j = on_plane
            k = 3 - i - j
            if dist[k] > 0:  # count shared in-plane edges once
                pts = [tri[i, :2], tri[j, :2]]
        else:
            for i in range(3):
                j = (i + 1) % 3
                di, dj = dist[i], dist[j]
                if di == 0.0:
                    pts.append(tri[i, :2])
                elif di * dj < 0:
                    t = di / (di - dj)
                    pts.append(tri[i, :2] + t * (tri[j, :2] - tri[i, :2]))
        unique = []
        for p in pts:
            if not any(np.hypot(*(p - q)) <= CHAIN_EPS for q in unique):
                unique.append(p)
        if len(unique) == 2:
            segments.append((np.asarray(unique[0]), np.asarray(unique[1])))
    return _dedupe_segments(segments)


def _key(point: np.ndarray) -> tuple[int, int]:
    return (int(round(point[0] / CHAIN_EPS)), int(round(point[1] / CHAIN_EPS)))


def _dedupe_segments(segments):
    seen = set()
    out = []
    for a, b in segments:
        ka, kb = _key(a), _key(b)
        if ka == kb:
            continue
        sig = (ka, kb) if ka <= kb else (kb, ka)
        if sig in seen:
            continue
        seen.add(sig)
        out.append((a, b))
    return out


def _chain_segments(segments) -> list[np.ndarray]:
    by_end: dict[tuple[int, int], list[int]] = {}
    for idx, (a, b) in enumerate(segments):
        by_end.setdefault(_key(a), []).append(idx)
        by_end.setdefault(_key(b), []).append(idx)

    used = [False] * len(segments)
    loops = []
    for start in range(len(segments)):
        if used[start]:
            continue
        used[start] = True
        a, b = segments[start]
        chain = [a, b]
        start_key = _key(a)
        while _key(chain[-1]) != start_key:
            tail_key = _key(chain[-1])
            candidates = [i for i in by_end.get(tail_key, []) if not used[i]]
            if not candidates:
                gap = _nearest_gap(chain[-1], segments, used)
                raise OpenContour(f"dangling endpoint {tuple(chain[-1])}, nearest gap {gap:.3g} mm")
            idx = candidates[0]
            used[idx] = True
            sa, sb = segments[idx]
            chain.append(sb if _key(sa) == tail_key else sa)
        chain[-1] = chain[0]  # close exactly
        if len(chain) >= 4:
            loops.append(np.asarray(chain))
    return loops


def _nearest_gap(point, segments, used) -> float:
    best = math.inf
    for idx, (a, b) in enumerate(segments):
        if used[idx]:
            continue
        best = min(best, float(np.hypot(*(a - point))), float(np.hypot(*(b - point))))
    if math.isinf(best):
        best = float("nan")
    return best


def _normalize_orientation(loops: list[np.ndarray]) -> list[np.ndarray]:
    out = []
    for i, loop in enumerate(loops):
        depth = sum(
            1
            for j, other in enumerate(loops)
            if j != i and point_in_loop(loop[0], other)
        )
        area = polygon_signed_area(loop)
        want_positive = depth % 2 == 0
        if (area > 0) != want_positive:
            loop = loop[::-1].copy()
        out.append(loop)
    return out


# ---------------------------------------------------------------------------
# Rasterization

def rasterize(contour: SliceContour) -> SliceImage:
    """Even-odd fill onto a 224x224 grid, bbox centered, 90% framing."""
    if not contour.loops:
        raise EmptyContour("contour has no loops")
    min_x, min_y, max_x, max_y = contour.bounds()
    width, height = max_x - min_x, max_y - min_y
    larger = max(width, height)
    if larger <= 0:
        raise EmptyContour("contour bounding box is degenerate")
    pitch = larger / (FRAME_FILL * IMAGE_SIZE)
    center = ((min_x + max_x) / 2, (min_y + max_y) / 2)
    origin = (center[0] - pitch * IMAGE_SIZE / 2, center[1] - pitch * IMAGE_SIZE / 2)

    p = np.vstack([loop[:-1] for loop in contour.loops])
    q = np.vstack([loop[1:] for loop in contour.loops])
    pixels = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    xs = origin[0] + (np.arange(IMAGE_SIZE) + 0.5) * pitch
    for i in range(IMAGE_SIZE):
        y = origin[1] + (i + 0.5) * pitch
        inside = _scanline_crossings(p, q, y)
        if inside.size == 0:
            continue
        parity = np.searchsorted(inside, xs, side="right") % 2
        pixels[i] = parity
    return SliceImage(pixels, pitch, origin)


def _scanline_crossings(p: np.ndarray, q: np.ndarray, y: float) -> np.ndarray:
    y1, y2 = p[:, 1], q[:, 1]
    crosses = (y1 <= y) != (y2 <= y)
    if not crosses.any():
        return np.empty(0)
    t = (y - y1[crosses]) / (y2[crosses] - y1[crosses])
    xs = p[crosses, 0] + t * (q[crosses, 0] - p[crosses, 0])
    xs.sort()
    return xs


# ---------------------------------------------------------------------------
# PGM serialization (P5, maxval 255)

def write_pgm(image: SliceImage, path) -> None:
    levels = np.clip(np.rint(image.pixels * 255), 0, 255).astype(np.uint8)
    header = (
        f"P5\n# pitch={image.pixel_pitch!r} origin={image.origin[0]!r},{image.origin[1]!r}\n"
        f"{IMAGE_SIZE} {IMAGE_SIZE}\n255\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(levels[::-1].tobytes())  # top row first


def _read_pgm_raw(path) -> tuple[np.ndarray, float, tuple[float, float]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise GeometryError(f"{path}: not a P5 PGM")
    pitch, origin = 1.0, (0.0, 0.0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            end = data.index(b"\n", pos)
            comment = data[pos + 1 : end].decode("ascii", errors="replace").strip()
            if comment.startswith("pitch="):
                head, _, tail = comment.partition(" origin=")
                pitch = float(head.removeprefix("pitch="))
                ox, _, oy = tail.partition(",")
                origin = (float(ox), float(oy))
            pos = end + 1
            continue
        end = pos
        while end < len(data) and not data[end : end + 1].isspace():
            end += 1
        fields.append(int(data[pos:end]))
        pos = end
    width, height, maxval = fields
    pos += 1  # single whitespace after maxval
    raw = np.frombuffer(data[pos : pos + width * height], dtype=np.uint8)
    if raw.size != width * height:
        raise TruncatedFile(f"{path}: pixel payload truncated")
    pixels = raw.reshape(height, width)[::-1].astype(float) / maxval
    return pixels, pitch, origin


def read_pgm(path) -> SliceImage:
    pixels, pitch, origin = _read_pgm_raw(path)
    if pixels.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise GeometryError(
            f"{path}: expected {IMAGE_SIZE}x{IMAGE_SIZE}, got {pixels.shape[1]}x{pixels.shape[0]}"
        )
    return SliceImage(pixels, pitch, origin)


def read_grayscale_pgm(path) -> np.ndarray:
    """Load any P5 PGM as a float [0, 1] array, rows bottom-first."""
    pixels, _, _ = _read_pgm_raw(path)
    return pixels


def write_grayscale_pgm(pixels: np.ndarray, path) -> None:
    """Write any float [0, 1] array (rows bottom-first) as a P5 PGM."""
    levels = np.clip(np.rint(np.asarray(pixels, dtype=float) * 255), 0, 255).astype(np.uint8)
    height, width = levels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(levels[::-1].tobytes())


# ---------------------------------------------------------------------------
# Synthetic samples

SHAPES = ("square", "rectangle", "circle", "annulus", "c_shape")
INFILLS = ("rectilinear", "concentric")
CIRCLE_SEGMENTS = 256


@dataclass(frozen=True)
class ShapeSpec:
    """Parametric shape + infill recipe for one synthetic layer."""

    shape: str
    infill: str = "rectilinear"
    density: float = 0.5
    angle_deg: float = 0.0
    size: float | None = None  # larger dimension in mm; None draws from rng
    line_width: float = 0.4

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise UnknownShape(f"shape {self.shape!r} not in {SHAPES}")
        if self.infill not in INFILLS:
            raise UnknownShape(f"infill {self.infill!r} not in {INFILLS}")
        if not (0 < self.density <= 1):
            raise ValueError("density must be in (0, 1]")

    @property
    def spacing(self) -> float:
        return self.line_width / self.density


def synth_sample(spec: ShapeSpec, rng_seed: int) -> tuple[SliceContour, LayerToolpath]:
    """Deterministically generate one (contour, toolpath) pair from a seed."""
    rng = np.random.default_rng(rng_seed)
    size = spec.size if spec.size is not None else float(rng.uniform(20.0, 60.0))
    loops, infill_paths = _build_shape(spec, size, rng)
    contour = SliceContour(tuple(loops))
    toolpath = _loops_to_toolpath(loops, infill_paths, z=0.2)
    return contour, toolpath


def _build_shape(spec: ShapeSpec, size: float, rng) -> tuple[list, list]:
    s = spec.spacing
    if spec.shape == "square":
        loops = [_rect_loop(0, 0, size, size)]
        region = loops
        shells = _rect_shells(0, 0, size, size, s)
    elif spec.shape == "rectangle":
        aspect = float(rng.uniform(0.4, 0.8))
        loops = [_rect_loop(0, 0, size, size * aspect)]
        region = loops
        shells = _rect_shells(0, 0, size, size * aspect, s)
    elif spec.shape == "circle":
        r = size / 2
        loops = [_circle_loop(0, 0, r)]
        region = loops
        shells = [_circle_loop(0, 0, ri) for ri in _radii(r - s, 0.0, s)]
    elif spec.shape == "annulus":
        r_out = size / 2
        r_in = r_out * float(rng.uniform(0.35, 0.6))
        loops = [_circle_loop(0, 0, r_out), _circle_loop(0, 0, r_in)[::-1].copy()]
        region = loops
        shells = [_circle_loop(0, 0, ri) for ri in _radii(r_out - s, r_in + s / 2, s)]
    elif spec.shape == "c_shape":
        r_out = size / 2
        r_in = r_out * float(rng.uniform(0.4, 0.6))
        gap = float(rng.uniform(math.pi / 6, math.pi / 2))
        loops = [_c_loop(r_out, r_in, gap)]
        region = loops
        # alternate arc direction so shell-to-shell travels stay short
        shells = [
            _arc_path(ri, gap) if k % 2 == 0 else _arc_path(ri, gap)[::-1].copy()
            for k, ri in enumerate(_radii(r_out - s, r_in + s / 2, s))
        ]
    else:  # pragma: no cover - guarded by ShapeSpec
        raise UnknownShape(spec.shape)

    if spec.infill == "concentric":
        infill = [sh for sh in shells if len(sh) >= 2]
    else:
        infill = _rectilinear_infill(region, s, spec.angle_deg)
    return loops, infill


def _radii(start: float, stop: float, step: float):
    radii = []
    r = start
    while r > stop + 1e-12:
        radii.append(r)
        r -= step
    return radii


def _rect_loop(cx, cy, width, height) -> np.ndarray:
    hw, hh = width / 2, height / 2
    return np.array(
        [
            [cx - hw, cy - hh],
            [cx + hw, cy - hh],
            [cx + hw, cy + hh],
            [cx - hw, cy + hh],
            [cx - hw, cy - hh],
        ]
    )


def _rect_shells(cx, cy, width, height, spacing):
    shells = []
    k = 1
    while width - 2 * k * spacing > spacing and height - 2 * k * spacing > spacing:
        shells.append(_rect_loop(cx, cy, width - 2 * k * spacing, height - 2 * k * spacing))
        k += 1
    return shells


def _circle_loop(cx, cy, r, segments=CIRCLE_SEGMENTS) -> np.ndarray:
    theta = np.linspace(0.0, 2 * math.pi, segments + 1)
    return np.column_stack([cx + r * np.cos(theta), cy + r * np.sin(theta)])


def _arc_path(r, gap, segments=CIRCLE_SEGMENTS) -> np.ndarray:
    theta = np.linspace(gap / 2, 2 * math.pi - gap / 2, segments + 1)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


def _c_loop(r_out, r_in, gap, segments=CIRCLE_SEGMENTS) -> np.ndarray:
    outer = _arc_path(r_out, gap, segments)
    inner = _arc_path(r_in, gap, segments)[::-1]
    loop = np.vstack([outer, inner, outer[:1]])
    return loop


def _rectilinear_infill(loops, spacing, angle_deg) -> list[np.ndarray]:
    """Serpentine hatch of the even-odd region at the given angle."""
    angle = math.radians(angle_deg)
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, s], [-s, c]])  # rotate by -angle into hatch frame
    unrot = rot.T
    pts = np.vstack(loops)
    frame = pts @ rot.T
    p = np.vstack([loop[:-1] for loop in loops]) @ rot.T
    q = np.vstack([loop[1:] for loop in loops]) @ rot.T
    y_min, y_max = frame[:, 1].min(), frame[:, 1].max()
    nudge = 1e-9 * max(1.0, y_max - y_min)
    count = int(math.floor((y_max - y_min) / spacing + 1e-9)) + 1
    paths = []
    for i in range(count):
        y = min(max(y_min + i * spacing, y_min + nudge), y_max - nudge)
        xs = _scanline_crossings(p, q, y)
        if xs.size < 2:
            continue
        intervals = [(xs[k], xs[k + 1]) for k in range(0, xs.size - 1, 2)]
        if i % 2 == 1:
            intervals = [(b, a) for a, b in reversed(intervals)]
        for a, b in intervals:
            segment = np.array([[a, y], [b, y]]) @ unrot.T
            paths.append(segment)
    return paths


def _loops_to_toolpath(perimeters, infill_paths, z: float) -> LayerToolpath:
    """Perimeters first, then infill; e grows with deposited length only."""
    keypoints: list[Keypoint] = []
    e = 0.0
    position = None
    for path in list(perimeters) + list(infill_paths):
        path = np.asarray(path, dtype=float)
        if position is None or not np.allclose(path[0], position):
            keypoints.append(Keypoint(path[0, 0], path[0, 1], e))  # travel
        for a, b in zip(path[:-1], path[1:]):
            e += EXTRUSION_PER_MM * math.hypot(b[0] - a[0], b[1] - a[1])
            keypoints.append(Keypoint(b[0], b[1], e))
        position = path[-1]
    return LayerToolpath(z, tuple(keypoints))
