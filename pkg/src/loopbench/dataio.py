"""Time-series files, resampling, splitting, and excitation-signal generation.

The on-disk format is plain CSV (UTF-8, LF, comma separator, '.' decimal)
with header `t,w,y,u,d` plus optional extra channel pairs y2,u2,...
Floats are written with repr() so a write/read round trip is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidSpec, MustResample, ParseError, TooShort

_BASE_COLUMNS = ("t", "w", "y", "u", "d")


@dataclass
class TimeSeries:
    """In-memory image of one data file."""

    t: np.ndarray
    w: np.ndarray
    y: np.ndarray
    u: np.ndarray
    d: np.ndarray
    extra: dict[str, np.ndarray] | None = None  # y2,u2,... in header order

    def __len__(self) -> int:
        return len(self.t)

    def columns(self) -> dict[str, np.ndarray]:
        cols = {name: getattr(self, name) for name in _BASE_COLUMNS}
        if self.extra:
            cols.update(self.extra)
        return cols

    def dt(self) -> float:
        """Grid spacing; raises MustResample when the series is not uniform."""
        if len(self.t) < 2:
            raise TooShort("need at least two samples")
        spacing = np.diff(self.t)
        step = float(spacing[0])
        if np.ptp(spacing) > 1e-9 * max(step, 1.0):
            raise MustResample("series is not uniformly sampled")
        return step

    def is_uniform(self) -> bool:
        try:
            self.dt()
            return True
        except MustResample:
            return False


def from_trajectory(traj, measured: bool = True) -> TimeSeries:
    """Build a file record from a simulation trajectory.

    The y column records the measured response (what an experimenter's data
    logger sees); pass measured=False for the raw plant output. Extra output
    channels, when present, become y2, y3, ...
    """
    extra = None
    if getattr(traj, "y_extra", None) is not None:
        extra = {f"y{i + 2}": traj.y_extra[:, i].copy() for i in range(traj.y_extra.shape[1])}
    return TimeSeries(
        t=traj.t.copy(), w=traj.w.copy(),
        y=(traj.y_meas if measured else traj.y).copy(),
        u=traj.u.copy(), d=traj.d.copy(), extra=extra,
    )


def _validate_header(fields: list[str]) -> list[str]:
    for i, name in enumerate(_BASE_COLUMNS):
        if i >= len(fields) or fields[i] != name:
            got = fields[i] if i < len(fields) else "<missing>"
            raise ParseError(f"expected column {name!r}, got {got!r}", line=1)
    for name in fields[len(_BASE_COLUMNS):]:
        if len(name) < 2 or name[0] not in "yu" or not name[1:].isdigit() or int(name[1:]) < 2:
            raise ParseError(f"unknown column {name!r}", line=1)
    return fields


def write_timeseries(series: TimeSeries, path) -> None:
    cols = series.columns()
    names = list(cols.keys())
    n = len(series)
    for name, arr in cols.items():
        if len(arr) != n:
            raise ValueError(f"column {name!r} length mismatch")
    lines = [",".join(names)]
    for k in range(n):
        lines.append(",".join(repr(float(cols[name][k])) for name in names))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_timeseries(path) -> TimeSeries:
    """Parse and validate a data file; every failure carries a 1-based line number."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty file", line=1)
    names = _validate_header([f.strip() for f in lines[0].split(",")])
    n_cols = len(names)

    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if line == "":
            continue
        fields = line.split(",")
        if len(fields) != n_cols:
            raise ParseError(f"expected {n_cols} cells, got {len(fields)}", line=lineno)
        try:
            row = [float(f) for f in fields]
        except ValueError:
            bad = next(f for f in fields if not _is_number(f))
            raise ParseError(f"non-numeric cell {bad!r}", line=lineno) from None
        if rows and row[0] <= rows[-1][0]:
            raise ParseError("t is not strictly increasing", line=lineno)
        rows.append(row)
    if not rows:
        raise ParseError("no data rows", line=2)

    data = np.array(rows)
    extra = {name: data[:, i] for i, name in enumerate(names) if i >= len(_BASE_COLUMNS)}
    return TimeSeries(t=data[:, 0], w=data[:, 1], y=data[:, 2], u=data[:, 3], d=data[:, 4],
                      extra=extra or None)


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


# ---------------------------------------------------------------------------
# Resampling and splitting
# ---------------------------------------------------------------------------

def resample_uniform(series: TimeSeries, target_dt: float) -> TimeSeries:
    """Linear interpolation onto the grid t0, t0+dt, ...; never extrapolates."""
    if target_dt <= 0.0:
        raise ValueError("target dt must be > 0")
    if len(series) < 2:
        raise TooShort("cannot resample fewer than two samples")
    t = series.t
    span = float(t[-1] - t[0])
    n = int(math.floor(span / target_dt + 1e-9)) + 1
    grid = t[0] + np.arange(n) * target_dt
    cols = series.columns()
    out = {name: np.interp(grid, t, arr) for name, arr in cols.items() if name != "t"}
    extra_names = [name for name in cols if name not in _BASE_COLUMNS]
    return TimeSeries(
        t=grid, w=out["w"], y=out["y"], u=out["u"], d=out["d"],
        extra={name: out[name] for name in extra_names} or None,
    )


def split_contiguous(series: TimeSeries, train_fraction: float) -> tuple[TimeSeries, TimeSeries]:
    """First floor(N * fraction) samples train, the rest validation. No shuffling."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train fraction must be in (0, 1)")
    n = len(series)
    n_train = int(math.floor(n * train_fraction))
    if n_train < 2 or n - n_train < 1:
        raise TooShort(f"split {n_train}/{n - n_train} leaves a block that is too short")

    def _take(sl):
        cols = series.columns()
        extra_names = [name for name in cols if name not in _BASE_COLUMNS]
        return TimeSeries(
            t=series.t[sl].copy(), w=series.w[sl].copy(), y=series.y[sl].copy(),
            u=series.u[sl].copy(), d=series.d[sl].copy(),
            extra={name: cols[name][sl].copy() for name in extra_names} or None,
        )

    return _take(slice(0, n_train)), _take(slice(n_train, n))


# ---------------------------------------------------------------------------
# Excitation signals
# ---------------------------------------------------------------------------

# Maximal-length LFSR tap positions (Fibonacci form, XOR feedback) for
# register orders 3..16; each yields the full 2^n - 1 period.
PRBS_TAPS = {
    3: (3, 2), 4: (4, 3), 5: (5, 3), 6: (6, 5), 7: (7, 6), 8: (8, 6, 5, 4),
    9: (9, 5), 10: (10, 7), 11: (11, 9), 12: (12, 6, 4, 1), 13: (13, 4, 3, 1),
    14: (14, 5, 3, 1), 15: (15, 14), 16: (16, 15, 13, 4),
}


@dataclass(frozen=True)
class ExcitationSpec:
    """System-identification input: step train, PRBS, or linear chirp."""

    variant: str  # step_train | prbs | chirp
    levels: tuple = ()
    dwell: float = 1.0
    order: int = 7
    amplitude: float = 1.0
    bit_period: float = 1.0
    seed: int = 1
    f0: float = 0.1
    f1: float = 1.0
    duration: float | None = None

    def __post_init__(self):
        if self.variant not in ("step_train", "prbs", "chirp"):
            raise InvalidSpec(f"unknown excitation variant {self.variant!r}")
        if self.variant == "step_train" and not self.levels:
            raise InvalidSpec("step_train needs at least one level")
        if self.variant == "prbs" and self.order not in PRBS_TAPS:
            raise InvalidSpec("PRBS order must be in 3..16")
        if self.variant == "chirp" and (self.f0 < 0.0 or self.f1 < 0.0):
            raise InvalidSpec("chirp frequencies must be >= 0")


def prbs_bits(order: int, seed: int = 1) -> np.ndarray:
    """One full period (2^order - 1 bits) of the maximal-length sequence.

    Fibonacci LFSR, shift-left convention: the new bit entering at the bottom
    is the XOR of the tapped stages; the emitted bit is the one leaving at
    the top. The seed selects the (nonzero) starting register state.
    """
    taps = PRBS_TAPS[order]
    period = (1 << order) - 1
    state = (seed % period) + 1  # any nonzero register state
    bits = np.empty(period, dtype=np.int64)
    for i in range(period):
        bits[i] = (state >> (order - 1)) & 1
        fb = 0
        for tap in taps:
            fb ^= (state >> (tap - 1)) & 1
        state = ((state << 1) | fb) & period
    return bits


def generate_excitation(spec: ExcitationSpec, cfg, limits: tuple[float, float] | None = None) -> np.ndarray:
    """Sample the excitation onto the simulation grid.

    `cfg` is a SimConfig (dt/horizon/n_steps). When actuator limits are
    given, amplitudes outside them are rejected up front.
    """
    n = cfg.n_steps
    dt = cfg.dt
    t = np.arange(n) * dt

    if spec.variant == "step_train":
        peak = max(abs(float(v)) for v in spec.levels)
        _check_amplitude(peak, limits)
        if spec.dwell <= 0.0:
            raise InvalidSpec("dwell must be > 0")
        per_level = max(int(round(spec.dwell / dt)), 1)
        idx = (np.arange(n) // per_level) % len(spec.levels)
        return np.array([float(spec.levels[i]) for i in idx])

    if spec.variant == "prbs":
        _check_amplitude(abs(spec.amplitude), limits)
        if spec.bit_period < dt:
            raise InvalidSpec("bit period must be >= dt")
        bits = prbs_bits(spec.order, spec.seed)
        per_bit = max(int(round(spec.bit_period / dt)), 1)
        idx = (np.arange(n) // per_bit) % len(bits)
        return np.where(bits[idx] == 1, spec.amplitude, -spec.amplitude).astype(float)

    # chirp
    _check_amplitude(abs(spec.amplitude), limits)
    duration = spec.duration if spec.duration is not None else cfg.horizon
    if duration > cfg.horizon + 1e-12:
        raise InvalidSpec("chirp duration exceeds the horizon")
    sweep_rate = (spec.f1 - spec.f0) / (2.0 * duration)
    phase = 2.0 * math.pi * (spec.f0 * t + sweep_rate * t * t)
    u = spec.amplitude * np.sin(phase)
    u[t > duration] = 0.0
    return u


def _check_amplitude(peak: float, limits: tuple[float, float] | None) -> None:
    if limits is not None and (-peak < limits[0] or peak > limits[1]):
        raise InvalidSpec(f"excitation amplitude {peak:.6g} exceeds actuator limits {limits}")
