"""Grid carbon-intensity series and the low-carbon window scheduler.

The series is a piecewise-constant trace replayed from a file; it doubles
as its own forecast, so scheduling decisions are deterministic and
testable. All operations are pure reads over an immutable series.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Optional

from .core import CaggError, format_rfc3339, parse_rfc3339


class OutOfCoverage(CaggError):
    pass


class InfeasibleWindow(CaggError):
    pass


class InvalidSeries(CaggError):
    pass


@dataclass(frozen=True)
class IntensitySeries:
    start: datetime
    step: float  # seconds per value
    values: tuple[float, ...]  # gCO2e/kWh

    def __post_init__(self) -> None:
        if not self.values:
            raise InvalidSeries("intensity series must be non-empty")
        if self.step <= 0:
            raise InvalidSeries(f"step must be > 0, got {self.step}")
        if any(v <= 0 for v in self.values):
            raise InvalidSeries("intensity values must be strictly positive")
        if self.start.tzinfo is None:
            raise InvalidSeries("series start must be timezone-aware UTC")

    @property
    def coverage(self) -> float:
        """Covered span in seconds from `start`."""
        return len(self.values) * self.step

    @property
    def end(self) -> datetime:
        return self.start + timedelta(seconds=self.coverage)

    def offset_of(self, t: datetime) -> float:
        return (t - self.start).total_seconds()

    def value_at_offset(self, offset: float) -> float:
        if offset < 0 or offset >= self.coverage:
            raise OutOfCoverage(
                f"offset {offset}s outside series coverage [0, {self.coverage}s)"
            )
        return self.values[int(offset // self.step)]

    def intensity_at(self, t: datetime) -> float:
        """Value of the step containing t (piecewise-constant)."""
        return self.value_at_offset(self.offset_of(t))

    def mean_over(self, offset: float, duration: float) -> float:
        """Time-weighted mean intensity over [offset, offset + duration)."""
        if duration <= 0:
            raise InfeasibleWindow(f"duration must be > 0, got {duration}")
        if offset < 0 or offset + duration > self.coverage + 1e-9:
            raise OutOfCoverage(
                f"window [{offset}, {offset + duration}) outside coverage"
            )
        first = int(offset // self.step)
        weighted = 0.0
        k = first
        while k * self.step < offset + duration and k < len(self.values):
            lo = max(offset, k * self.step)
            hi = min(offset + duration, (k + 1) * self.step)
            weighted += (hi - lo) * self.values[k]
            k += 1
        return weighted / duration

    def below_threshold_now(self, threshold: float, now: datetime) -> bool:
        return self.intensity_at(now) <= threshold


@dataclass(frozen=True)
class WindowChoice:
    start_offset: float  # seconds from series start
    mean_intensity: float


def best_window(
    series: IntensitySeries,
    duration: float,
    deadline: float,
    earliest: float = 0.0,
) -> WindowChoice:
    """Step-aligned window of `duration` minimizing mean intensity, finishing
    by `deadline` (seconds from series start). Ties go to the earliest start.

    `earliest` restricts candidates to start at or after that offset, so a
    gate can schedule from "now" into the remainder of the trace.
    """
    if duration <= 0:
        raise InfeasibleWindow(f"duration must be > 0, got {duration}")
    if duration > deadline:
        raise InfeasibleWindow(f"duration {duration}s exceeds deadline {deadline}s")
    if deadline > series.coverage + 1e-9:
        raise InfeasibleWindow(
            f"deadline {deadline}s exceeds series coverage {series.coverage}s"
        )
    first_index = max(0, math.ceil((earliest - 1e-9) / series.step))
    best: Optional[WindowChoice] = None
    k = first_index
    while k * series.step + duration <= deadline + 1e-9:
        offset = k * series.step
        mean = series.mean_over(offset, min(duration, series.coverage - offset))
        if best is None or mean < best.mean_intensity:
            best = WindowChoice(start_offset=offset, mean_intensity=mean)
        k += 1
    if best is None:
        raise InfeasibleWindow(
            f"no step-aligned start in [{earliest}, {deadline - duration}]"
        )
    return best


def load_trace(path: Path) -> IntensitySeries:
    """Read a trace file: a `<start rfc3339> <step seconds>` header line, then
    one intensity value per line. Blank lines and `#` comments are skipped."""
    lines = [
        line.strip()
        for line in Path(path).read_text().splitlines()
        if line.strip() and not line.strip().startswith("#")
    ]
    if not lines:
        raise InvalidSeries(f"empty intensity trace {path}")
    header = lines[0].split()
    if len(header) != 2:
        raise InvalidSeries(f"bad trace header {lines[0]!r}; want '<start> <step>'")
    try:
        start = parse_rfc3339(header[0])
        step = float(header[1])
        values = tuple(float(v) for v in lines[1:])
    except ValueError as exc:
        raise InvalidSeries(f"unreadable intensity trace {path}: {exc}") from exc
    return IntensitySeries(start=start, step=step, values=values)


def save_trace(series: IntensitySeries, path: Path) -> None:
    body = [f"{format_rfc3339(series.start)} {series.step:g}"]
    body.extend(repr(v) for v in series.values)
    Path(path).write_text("\n".join(body) + "\n")


def synthetic_series(start: datetime, hours: int, step: float = 3600.0) -> IntensitySeries:
    """Deterministic diurnal stand-in trace (100..500 g/kWh, trough at night)
    for desk runs without a real grid trace."""
    import math

    values = tuple(
        300.0 + 200.0 * math.sin(2.0 * math.pi * ((h % 24) - 10) / 24.0)
        for h in range(hours)
    )
    return IntensitySeries(start=start, step=step, values=values)
