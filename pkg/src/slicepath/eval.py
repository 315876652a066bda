"""Evaluation harness: travel-distance distributions (Gaussian KDE with
Silverman bandwidth, percentile bootstrap CIs), deposition-overlap metrics on
stroked rasters, and deterministic SVG/CSV artifact emission.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gcode import travel_length


class EvalError(Exception):
    """Base class for evaluation failures."""


class DegenerateSample(EvalError):
    """KDE input has zero variance."""


class ZeroTruthMean(EvalError):
    """Reduction percentage is undefined for a zero truth mean."""


class EmptyPath(EvalError):
    """Overlap rasterization got an empty path."""


class IoFailure(EvalError):
    """Plot or CSV artifact could not be written."""


@dataclass(frozen=True)
class DensityCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))


@dataclass(frozen=True)
class OverlapResult:
    iou: float
    truth_coverage: float
    gen_coverage: float

    def __post_init__(self):
        if self.iou > min(self.truth_coverage, self.gen_coverage) + 1e-12:
            raise ValueError("iou cannot exceed either coverage")


@dataclass(frozen=True)
class DistanceSample:
    """Per-layer travel distances for the truth and >= 1 generation runs."""

    truth: np.ndarray
    runs: tuple

    def __post_init__(self):
        object.__setattr__(self, "truth", np.asarray(self.truth, dtype=float))
        object.__setattr__(self, "runs", tuple(np.asarray(r, dtype=float) for r in self.runs))
        if np.any(self.truth < 0) or any(np.any(r < 0) for r in self.runs):
            raise ValueError("travel distances must be non-negative")
        for run in self.runs:
            if len(run) != len(self.truth):
                raise ValueError("every run needs one distance per truth layer")

    def generated_mean(self) -> np.ndarray:
        """Per-layer distance averaged across runs."""
        if not self.runs:
            raise ValueError("no generation runs")
        return np.mean(np.stack(self.runs), axis=0)


def layer_distances(layers) -> np.ndarray:
    return np.array([travel_length(layer.keypoints) for layer in layers], dtype=float)


# ---------------------------------------------------------------------------
# statistics

def silverman_bandwidth(samples: np.ndarray) -> float:
    sigma = float(np.std(samples, ddof=1))
    return 1.06 * sigma * len(samples) ** (-1 / 5)


def kde(samples, bandwidth: float | None = None, grid_points: int = 512) -> DensityCurve:
    """Gaussian kernel density estimate over an automatically padded grid."""
    samples = np.asarray(samples, dtype=float)
    if samples.size < 2:
        raise ValueError("kde needs at least 2 samples")
    if np.std(samples) == 0.0:
        raise DegenerateSample("all samples identical")
    if bandwidth is None:
        bandwidth = silverman_bandwidth(samples)
    # 4 bandwidths of padding keep the trapezoid integral within 1e-3 of 1
    grid = np.linspace(
        samples.min() - 4 * bandwidth, samples.max() + 4 * bandwidth, grid_points
    )
    z = (grid[:, None] - samples[None, :]) / bandwidth
    density = np.exp(-0.5 * z**2).sum(axis=1) / (
        samples.size * bandwidth * np.sqrt(2 * np.pi)
    )
    return DensityCurve(grid, density, bandwidth)


def bootstrap_ci(samples, statistic=None, level: float = 0.95, n_boot: int = 1000, seed: int = 0):
    """Percentile bootstrap interval for a statistic (default: mean)."""
    samples = np.asarray(samples, dtype=float)
    if samples.size < 2:
        raise ValueError("bootstrap needs at least 2 samples")
    rng = np.random.default_rng(seed)
    indices = rng.integers(0, samples.size, (n_boot, samples.size))
    if statistic is None or statistic is np.mean:
        stats = samples[indices].mean(axis=1)
    else:
        stats = np.array([statistic(samples[row]) for row in indices])
    alpha = 1.0 - level
    lo, hi = np.quantile(stats, [alpha / 2, 1 - alpha / 2])
    return float(lo), float(hi)


def mean_reduction(truth, generated) -> float:
    """Percent reduction of the generated mean relative to the truth mean."""
    truth = np.asarray(truth, dtype=float)
    generated = np.asarray(generated, dtype=float)
    if truth.size == 0 or generated.size == 0:
        raise ValueError("mean_reduction needs non-empty inputs")
    t_mean = truth.mean()
    if t_mean == 0.0:
        raise ZeroTruthMean("truth mean is zero")
    return float(100.0 * (t_mean - generated.mean()) / t_mean)


# ---------------------------------------------------------------------------
# deposition overlap

def _path_points(path) -> np.ndarray:
    points = np.asarray(
        [(p.x, p.y) if hasattr(p, "x") else (p[0], p[1]) for p in path], dtype=float
    )
    if len(points) == 0:
        raise EmptyPath("path has no keypoints")
    return points


def _shared_grid(paths, line_width, pitch):
    stacked = np.vstack(paths)
    margin = line_width / 2 + pitch
    x0 = stacked[:, 0].min() - margin
    y0 = stacked[:, 1].min() - margin
    nx = int(np.ceil((stacked[:, 0].max() + margin - x0) / pitch)) + 1
    ny = int(np.ceil((stacked[:, 1].max() + margin - y0) / pitch)) + 1
    return x0, y0, nx, ny


def _stroke_mask(points, grid, line_width, pitch) -> np.ndarray:
    x0, y0, nx, ny = grid
    mask = np.zeros((ny, nx), dtype=bool)
    radius = line_width / 2
    xs = x0 + (np.arange(nx) + 0.5) * pitch
    ys = y0 + (np.arange(ny) + 0.5) * pitch
    segments = list(zip(points[:-1], points[1:])) or [(points[0], points[0])]
    for p, q in segments:
        lo_x = np.searchsorted(xs, min(p[0], q[0]) - radius - pitch)
        hi_x = np.searchsorted(xs, max(p[0], q[0]) + radius + pitch)
        lo_y = np.searchsorted(ys, min(p[1], q[1]) - radius - pitch)
        hi_y = np.searchsorted(ys, max(p[1], q[1]) + radius + pitch)
        wx = xs[lo_x:hi_x]
        wy = ys[lo_y:hi_y]
        if wx.size == 0 or wy.size == 0:
            continue
        dx, dy = q[0] - p[0], q[1] - p[1]
        len_sq = dx * dx + dy * dy
        cx = wx[None, :] - p[0]
        cy = wy[:, None] - p[1]
        if len_sq == 0.0:
            dist_sq = cx**2 + cy**2
        else:
            t = np.clip((cx * dx + cy * dy) / len_sq, 0.0, 1.0)
            dist_sq = (cx - t * dx) ** 2 + (cy - t * dy) ** 2
        mask[lo_y:hi_y, lo_x:hi_x] |= dist_sq <= radius**2
    return mask


def deposition_overlap(truth_path, gen_path, line_width: float = 0.4, grid_pitch: float = 0.1):
    """IoU and mutual coverage of two toolpaths stroked onto a shared grid."""
    truth_points = _path_points(truth_path)
    gen_points = _path_points(gen_path)
    grid = _shared_grid([truth_points, gen_points], line_width, grid_pitch)
    truth_mask = _stroke_mask(truth_points, grid, line_width, grid_pitch)
    gen_mask = _stroke_mask(gen_points, grid, line_width, grid_pitch)
    inter = float(np.logical_and(truth_mask, gen_mask).sum())
    union = float(np.logical_or(truth_mask, gen_mask).sum())
    t_area = float(truth_mask.sum())
    g_area = float(gen_mask.sum())
    return OverlapResult(
        iou=inter / union if union else 0.0,
        truth_coverage=inter / t_area if t_area else 0.0,
        gen_coverage=inter / g_area if g_area else 0.0,
    )


# ---------------------------------------------------------------------------
# artifact emission

@dataclass
class EvalResults:
    distances: DistanceSample | None = None
    kde_truth: DensityCurve | None = None
    kde_generated: DensityCurve | None = None
    ci: tuple | None = None
    reduction_pct: float | None = None
    scatter: np.ndarray | None = None  # (n, 3) normalized keypoints (x, y, e)
    overlap_truth: np.ndarray | None = None
    overlap_generated: np.ndarray | None = None
    overlap: OverlapResult | None = None


def compute_results(
    truth_layers,
    generated_runs,
    seed: int = 0,
    line_width: float = 0.4,
    grid_pitch: float = 0.1,
    scatter: np.ndarray | None = None,
) -> EvalResults:
    """Assemble the full evaluation from raw layers: distances, KDEs, CI,
    mean reduction, and overlap of the first run against the truth."""
    if not generated_runs:
        return EvalResults(scatter=scatter)
    sample = DistanceSample(
        layer_distances(truth_layers),
        tuple(layer_distances(run) for run in generated_runs),
    )
    gen_mean = sample.generated_mean()
    results = EvalResults(
        distances=sample,
        kde_truth=kde(sample.truth) if np.std(sample.truth) > 0 else None,
        kde_generated=kde(gen_mean) if np.std(gen_mean) > 0 else None,
        ci=bootstrap_ci(gen_mean, seed=seed),
        reduction_pct=mean_reduction(sample.truth, gen_mean),
        scatter=scatter,
    )
    truth_points = _path_points(truth_layers[0].keypoints)
    gen_points = _path_points(generated_runs[0][0].keypoints)
    results.overlap_truth = truth_points
    results.overlap_generated = gen_points
    results.overlap = deposition_overlap(
        truth_points, gen_points, line_width=line_width, grid_pitch=grid_pitch
    )
    return results


def _fmt(value: float) -> str:
    return f"{value:.17g}"


def emit_plots(results: EvalResults, out_dir) -> list:
    """Write KDE overlay, keypoint scatter, and overlap SVGs plus CSV tables.

    With no generation runs only the CSV headers are written. Every number in
    an SVG is duplicated in a CSV at full precision.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        return _emit_plots_inner(results, out_dir)
    except OSError as err:
        raise IoFailure(f"cannot write artifacts under {out_dir}: {err}") from err


def _emit_plots_inner(results: EvalResults, out_dir: Path) -> list:
    written = []

    summary = out_dir / "summary.csv"
    with open(summary, "w") as fh:
        fh.write("metric,value\n")
        if results.distances is not None:
            fh.write(f"truth_mean,{_fmt(results.distances.truth.mean())}\n")
            fh.write(f"generated_mean,{_fmt(results.distances.generated_mean().mean())}\n")
            fh.write(f"ci_lo,{_fmt(results.ci[0])}\n")
            fh.write(f"ci_hi,{_fmt(results.ci[1])}\n")
            fh.write(f"mean_reduction_pct,{_fmt(results.reduction_pct)}\n")
        if results.overlap is not None:
            fh.write(f"overlap_iou,{_fmt(results.overlap.iou)}\n")
            fh.write(f"overlap_truth_coverage,{_fmt(results.overlap.truth_coverage)}\n")
            fh.write(f"overlap_gen_coverage,{_fmt(results.overlap.gen_coverage)}\n")
    written.append(summary)

    curves = out_dir / "kde.csv"
    with open(curves, "w") as fh:
        fh.write("x,truth_density,generated_density\n")
        if results.kde_truth is not None and results.kde_generated is not None:
            for x, d in zip(results.kde_truth.grid, results.kde_truth.density):
                fh.write(f"{_fmt(x)},{_fmt(d)},\n")
            for x, d in zip(results.kde_generated.grid, results.kde_generated.density):
                fh.write(f"{_fmt(x)},,{_fmt(d)}\n")
    written.append(curves)

    if results.kde_truth is not None and results.kde_generated is not None:
        written.append(_kde_svg(results, out_dir / "kde.svg"))
    if results.scatter is not None and len(results.scatter):
        written.append(_scatter_svg(results.scatter, out_dir / "keypoints.svg"))
        scatter_csv = out_dir / "keypoints.csv"
        with open(scatter_csv, "w") as fh:
            fh.write("x,y,e\n")
            for x, y, e in results.scatter:
                fh.write(f"{_fmt(x)},{_fmt(y)},{_fmt(e)}\n")
        written.append(scatter_csv)
    if results.overlap_truth is not None and results.overlap_generated is not None:
        written.append(
            _overlap_svg(results.overlap_truth, results.overlap_generated, out_dir / "overlap.svg")
        )
    return written


def _svg_header(width=640, height=480):
    return (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n'
        f'<rect width="{width}" height="{height}" fill="white"/>\n'
    )


def _to_pixels(xs, ys, width, height, margin=40):
    x_min, x_max = float(np.min(xs)), float(np.max(xs))
    y_min, y_max = float(np.min(ys)), float(np.max(ys))
    x_span = (x_max - x_min) or 1.0
    y_span = (y_max - y_min) or 1.0
    px = margin + (np.asarray(xs) - x_min) / x_span * (width - 2 * margin)
    py = height - margin - (np.asarray(ys) - y_min) / y_span * (height - 2 * margin)
    return px, py


def _polyline(px, py, color, dash=None, width=2.0):
    points = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(px, py))
    dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
    return (
        f'<polyline fill="none" stroke="{color}" stroke-width="{width}"{dash_attr} '
        f'points="{points}"/>\n'
    )


def _kde_svg(results: EvalResults, path: Path) -> Path:
    width = height = 480
    t, g = results.kde_truth, results.kde_generated
    all_x = np.concatenate([t.grid, g.grid])
    all_y = np.concatenate([t.density, g.density, [0.0]])
    parts = [_svg_header(width, height)]
    if results.ci is not None:
        lo_px = 40 + (results.ci[0] - all_x.min()) / (all_x.max() - all_x.min()) * (width - 80)
        hi_px = 40 + (results.ci[1] - all_x.min()) / (all_x.max() - all_x.min()) * (width - 80)
        parts.append(
            f'<rect x="{lo_px:.2f}" y="40" width="{max(hi_px - lo_px, 1.0):.2f}" '
            f'height="{height - 80}" fill="#9ecae1" fill-opacity="0.4"/>\n'
        )
    for curve, color, dash in ((t, "black", "6,4"), (g, "#1f77b4", None)):
        px = 40 + (curve.grid - all_x.min()) / (all_x.max() - all_x.min()) * (width - 80)
        py = height - 40 - (curve.density - 0.0) / (all_y.max() or 1.0) * (height - 80)
        parts.append(_polyline(px, py, color, dash))
    parts.append("</svg>\n")
    path.write_text("".join(parts))
    return path


def _e_color(e: float) -> str:
    """Map normalized extrusion [-1, 1] to a light-to-dark blue ramp."""
    u = float(np.clip((e + 1) / 2, 0, 1))
    start = np.array([198, 219, 239])
    end = np.array([8, 48, 107])
    r, g, b = (start + u * (end - start)).astype(int)
    return f"#{r:02x}{g:02x}{b:02x}"


def _scatter_svg(points: np.ndarray, path: Path) -> Path:
    width = height = 480
    px, py = _to_pixels(points[:, 0], points[:, 1], width, height)
    parts = [_svg_header(width, height)]
    for (x, y), e in zip(zip(px, py), points[:, 2]):
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2.5" fill="{_e_color(e)}"/>\n')
    parts.append("</svg>\n")
    path.write_text("".join(parts))
    return path


def _overlap_svg(truth: np.ndarray, generated: np.ndarray, path: Path) -> Path:
    width = height = 480
    all_pts = np.vstack([truth, generated])
    tx, ty = _to_pixels(truth[:, 0], truth[:, 1], width, height)
    # use the shared frame for both paths
    x_min, x_max = all_pts[:, 0].min(), all_pts[:, 0].max()
    y_min, y_max = all_pts[:, 1].min(), all_pts[:, 1].max()
    x_span = (x_max - x_min) or 1.0
    y_span = (y_max - y_min) or 1.0

    def project(pts):
        px = 40 + (pts[:, 0] - x_min) / x_span * (width - 80)
        py = height - 40 - (pts[:, 1] - y_min) / y_span * (height - 80)
        return px, py

    parts = [_svg_header(width, height)]
    parts.append(_polyline(*project(truth), "red", width=1.5))
    parts.append(_polyline(*project(generated), "green", width=1.5))
    parts.append("</svg>\n")
    path.write_text("".join(parts))
    return path
