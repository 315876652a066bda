"""G-code front end: parse programs into layer-segmented keypoint sequences,
emit printer-ready G-code from keypoints, and validate toolpaths against a
printer profile.

Supported commands: G0/G1 (linear moves), G90/G91 (absolute/relative
positioning), M82/M83 (absolute/relative extrusion), G92 (set position /
extruder reset), G28 (home), M104/M140 (temperatures). Comments use ``;`` or
``(...)``. Arc moves (G2/G3) are rejected; everything else is skipped.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path


class GCodeError(Exception):
    """Base class for G-code parsing/emission failures."""


class MalformedNumber(GCodeError):
    """A coordinate or parameter value could not be parsed as a number."""


class NegativeLayerHeight(GCodeError):
    """Z decreased on a motion command; non-planar programs are unsupported."""


class ArcCommandUnsupported(GCodeError):
    """G2/G3 arc moves are not part of the supported linear-move dialect."""


class ProfileError(GCodeError):
    """Printer profile file is malformed or violates its invariants."""


class Mode(Enum):
    ABSOLUTE = "absolute"
    RELATIVE = "relative"


@dataclass(frozen=True)
class Keypoint:
    """One toolpath vertex: XY position plus cumulative absolute extrusion."""

    x: float
    y: float
    e: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.e)):
            raise ValueError(f"non-finite keypoint ({self.x}, {self.y}, {self.e})")


@dataclass(frozen=True)
class LayerToolpath:
    """All keypoints deposited at a single layer height."""

    z: float
    keypoints: tuple[Keypoint, ...]

    def __post_init__(self):
        if len(self.keypoints) < 1:
            raise ValueError("a layer needs at least one keypoint")


@dataclass
class MachineState:
    """Interpreter state while walking a program.

    ``e_cumulative`` tracks physical filament advanced since program start;
    G92 resets shift ``e_offset`` so it stays continuous across resets.
    """

    position_mode: Mode = Mode.ABSOLUTE
    extrusion_mode: Mode = Mode.ABSOLUTE
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    e_axis: float = 0.0
    e_offset: float = 0.0

    @property
    def e_cumulative(self) -> float:
        return self.e_axis + self.e_offset

    @property
    def current(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.z, self.e_cumulative)


@dataclass(frozen=True)
class PrinterProfile:
    """Build-volume limits and emission parameters for a target printer."""

    build_min: tuple[float, float] = (0.0, 0.0)
    build_max: tuple[float, float] = (220.0, 220.0)
    feedrate: float = 1200.0  # mm/min; config default, not a calibrated value
    extrusion_multiplier: float = 1.0
    nozzle_temp: float = 200.0
    bed_temp: float = 60.0

    def __post_init__(self):
        if not (self.build_min[0] < self.build_max[0] and self.build_min[1] < self.build_max[1]):
            raise ProfileError("build_min must be componentwise below build_max")
        if self.feedrate <= 0:
            raise ProfileError("feedrate must be positive")
        if self.extrusion_multiplier <= 0:
            raise ProfileError("extrusion_multiplier must be positive")

    @classmethod
    def from_file(cls, path) -> "PrinterProfile":
        """Read a plain ``key = value`` profile file (``#`` comments)."""
        scalars = {
            "feedrate": "feedrate",
            "extrusion_multiplier": "extrusion_multiplier",
            "nozzle_temp": "nozzle_temp",
            "bed_temp": "bed_temp",
        }
        bounds = {"build_min_x", "build_min_y", "build_max_x", "build_max_y"}
        values: dict[str, float] = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ProfileError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip().lower()
            if key not in scalars and key not in bounds:
                raise ProfileError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                values[key] = float(value.strip())
            except ValueError:
                raise ProfileError(f"{path}:{lineno}: bad number {value.strip()!r}") from None
        kwargs = {}
        defaults = cls()
        kwargs["build_min"] = (
            values.get("build_min_x", defaults.build_min[0]),
            values.get("build_min_y", defaults.build_min[1]),
        )
        kwargs["build_max"] = (
            values.get("build_max_x", defaults.build_max[0]),
            values.get("build_max_y", defaults.build_max[1]),
        )
        for key, attr in scalars.items():
            if key in values:
                kwargs[attr] = values[key]
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# Parsing

_PAREN_COMMENT = re.compile(r"\([^)]*\)")
_WORD = re.compile(r"([A-Za-z])\s*([-+]?[0-9.]*)")


def _strip_comments(line: str) -> str:
    line = line.split(";", 1)[0]
    line = line.split("*", 1)[0]  # checksum tail
    return _PAREN_COMMENT.sub(" ", line)


def _words(line: str, lineno: int) -> list[tuple[str, str]]:
    out = []
    for match in _WORD.finditer(line):
        out.append((match.group(1).upper(), match.group(2)))
    return out


def _number(letter: str, text: str, lineno: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise MalformedNumber(f"line {lineno}: cannot parse {letter}{text!r}") from None
    if not math.isfinite(value):
        raise MalformedNumber(f"line {lineno}: non-finite {letter}{text!r}")
    return value


class _LayerAccumulator:
    """Collects keypoints into layers, splitting on Z changes."""

    def __init__(self):
        self.layers: list[LayerToolpath] = []
        self._z = 0.0
        self._points: list[Keypoint] = []

    def set_z(self, z: float):
        if z == self._z:
            return
        self.flush()
        self._z = z

    def add(self, point: Keypoint):
        self._points.append(point)

    def flush(self):
        if self._points:
            self.layers.append(LayerToolpath(self._z, tuple(self._points)))
            self._points = []


def parse_program(text: str) -> list[LayerToolpath]:
    """Parse a G-code program into per-layer keypoint sequences.

    Every G0/G1 carrying an X or Y word appends one keypoint at the post-move
    position with the cumulative extrusion at arrival. A Z change on a motion
    command closes the current layer. Unknown commands are skipped.
    """
    state = MachineState()
    acc = _LayerAccumulator()

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comments(raw).strip()
        if not line:
            continue
        words = _words(line, lineno)
        if not words:
            continue
        letter, digits = words[0]
        if letter == "N" and len(words) > 1:  # line number prefix
            words = words[1:]
            letter, digits = words[0]
        if letter not in ("G", "M"):
            continue
        code = int(_number(letter, digits, lineno))
        params = words[1:]

        if letter == "G":
            if code in (0, 1):
                _apply_move(state, acc, params, lineno)
            elif code in (2, 3):
                raise ArcCommandUnsupported(f"line {lineno}: G{code} arcs unsupported")
            elif code == 28:
                state.x, state.y, state.z = 0.0, 0.0, 0.0
            elif code == 90:
                # RepRap semantics: also resets E mode; M82/M83 override it
                state.position_mode = Mode.ABSOLUTE
                state.extrusion_mode = Mode.ABSOLUTE
            elif code == 91:
                state.position_mode = Mode.RELATIVE
                state.extrusion_mode = Mode.RELATIVE
            elif code == 92:
                _apply_set_position(state, params, lineno)
            # other G-codes tolerated
        else:  # M
            if code == 82:
                state.extrusion_mode = Mode.ABSOLUTE
            elif code == 83:
                state.extrusion_mode = Mode.RELATIVE
            # M104/M140 and other M-codes have no interpreter effect

    acc.flush()
    return acc.layers


def _apply_move(state: MachineState, acc: _LayerAccumulator, params, lineno: int):
    values = {}
    for letter, digits in params:
        if letter in ("X", "Y", "Z", "E", "F"):
            values[letter] = _number(letter, digits, lineno)

    relative = state.position_mode is Mode.RELATIVE
    if "Z" in values:
        new_z = state.z + values["Z"] if relative else values["Z"]
        if new_z < state.z:
            raise NegativeLayerHeight(
                f"line {lineno}: Z moved down from {state.z} to {new_z}"
            )
        state.z = new_z
        acc.set_z(new_z)
    if "X" in values:
        state.x = state.x + values["X"] if relative else values["X"]
    if "Y" in values:
        state.y = state.y + values["Y"] if relative else values["Y"]
    if "E" in values:
        if state.extrusion_mode is Mode.RELATIVE:
            state.e_axis += values["E"]
        else:
            state.e_axis = values["E"]

    if "X" in values or "Y" in values:
        acc.add(Keypoint(state.x, state.y, state.e_cumulative))


def _apply_set_position(state: MachineState, params, lineno: int):
    values = {}
    for letter, digits in params:
        if letter in ("X", "Y", "Z", "E"):
            values[letter] = _number(letter, digits, lineno)
    if not values:  # bare G92 zeroes all axes
        values = {"X": 0.0, "Y": 0.0, "Z": 0.0, "E": 0.0}
    if "E" in values:
        cumulative = state.e_cumulative
        state.e_axis = values["E"]
        state.e_offset = cumulative - state.e_axis
    if "X" in values:
        state.x = values["X"]
    if "Y" in values:
        state.y = values["Y"]
    if "Z" in values:
        state.z = values["Z"]


# ---------------------------------------------------------------------------
# Emission

def emit_layer(keypoints, profile: PrinterProfile, z: float) -> str:
    """Render one layer as a complete printable G-code program.

    Keypoints must already be denormalized to physical millimetres; coordinates
    are printed with 5 decimal places and each move carries the profile
    feedrate.
    """
    lines = [
        "G90",
        "M82",
        f"M104 S{profile.nozzle_temp:g}",
        f"M140 S{profile.bed_temp:g}",
        "G28",
        "G92 E0",
        f"G1 Z{z:.5f} F{profile.feedrate:g}",
    ]
    for point in keypoints:
        lines.append(
            f"G1 X{point.x:.5f} Y{point.y:.5f} E{point.e:.5f} F{profile.feedrate:g}"
        )
    lines += [
        "G92 E0",
        "G1 E-2.00000 F2400",
        "M104 S0",
        "M140 S0",
        "M84",
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Validation

@dataclass(frozen=True)
class OutOfBounds:
    index: int
    x: float
    y: float


@dataclass(frozen=True)
class NonMonotonicExtrusion:
    index: int
    previous_e: float
    e: float


@dataclass
class ValidationReport:
    out_of_bounds: list[OutOfBounds] = field(default_factory=list)
    non_monotonic: list[NonMonotonicExtrusion] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.out_of_bounds and not self.non_monotonic

    def summary(self) -> str:
        if self.ok:
            return "valid"
        parts = []
        if self.out_of_bounds:
            parts.append(f"{len(self.out_of_bounds)} keypoint(s) outside build volume")
        if self.non_monotonic:
            parts.append(f"{len(self.non_monotonic)} extrusion decrease(s)")
        return "; ".join(parts)


def validate_layer(keypoints, profile: PrinterProfile) -> ValidationReport:
    """Report build-volume violations and extrusion decreases; never raises."""
    report = ValidationReport()
    (min_x, min_y), (max_x, max_y) = profile.build_min, profile.build_max
    previous_e = None
    for index, point in enumerate(keypoints):
        if not (min_x <= point.x <= max_x and min_y <= point.y <= max_y):
            report.out_of_bounds.append(OutOfBounds(index, point.x, point.y))
        if previous_e is not None and point.e < previous_e:
            report.non_monotonic.append(NonMonotonicExtrusion(index, previous_e, point.e))
        previous_e = point.e
    return report


def travel_length(keypoints) -> float:
    """Total Euclidean XY path length over consecutive keypoints."""
    points = list(keypoints)
    if not points:
        raise ValueError("travel_length needs at least one keypoint")
    total = 0.0
    for a, b in zip(points, points[1:]):
        total += math.hypot(b.x - a.x, b.y - a.y)
    return total
