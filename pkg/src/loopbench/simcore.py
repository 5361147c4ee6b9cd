"""Deterministic fixed-step closed-loop simulation.

Plants are integrated with classical RK4 on a uniform grid. Dead time is
realized as a sample-quantized delay buffer, disturbances and sensor noise
come from a single seeded generator, so equal configs give bit-identical
trajectories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence, Union

import numpy as np

from .errors import ControllerFault, SimulationDiverged

DIVERGENCE_FACTOR = 1e9


def _round_half_away(x: float) -> int:
    """Round half away from zero (3.5 -> 4, 2.5 -> 3), unlike banker's round()."""
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


# ---------------------------------------------------------------------------
# Configuration and domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    """Grid definition plus the seed for every stochastic element of a run."""

    dt: float
    horizon: float
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("dt must be > 0")
        if self.horizon <= 0.0:
            raise ValueError("horizon must be > 0")
        if self.n_steps < 1:
            raise ValueError("horizon too short for one step")

    @property
    def n_steps(self) -> int:
        return _round_half_away(self.horizon / self.dt)

    def time_grid(self) -> np.ndarray:
        return np.arange(self.n_steps) * self.dt


@dataclass(frozen=True)
class LinearStateSpace:
    """x' = A x + B u, y = C x. SISO unless C has several rows."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a, dtype=float))
        b = np.asarray(self.b, dtype=float).reshape(-1)
        c = np.atleast_2d(np.asarray(self.c, dtype=float))
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        if a.shape[0] != a.shape[1]:
            raise ValueError("A must be square")
        if b.shape[0] != a.shape[0] or c.shape[1] != a.shape[0]:
            raise ValueError("B/C dimensions inconsistent with A")


@dataclass(frozen=True)
class Fopdt:
    """First order plus dead time: K e^(-L s) / (tau s + 1)."""

    gain: float
    tau: float
    dead_time: float = 0.0

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ValueError("tau must be > 0")
        if self.dead_time < 0.0:
            raise ValueError("dead_time must be >= 0")


@dataclass(frozen=True)
class SecondOrder:
    """K omega_n^2 / (s^2 + 2 zeta omega_n s + omega_n^2)."""

    gain: float
    omega_n: float
    zeta: float

    def __post_init__(self):
        if self.omega_n <= 0.0:
            raise ValueError("omega_n must be > 0")
        if self.zeta < 0.0:
            raise ValueError("zeta must be >= 0")


@dataclass(frozen=True)
class TankNonlinear:
    """Level tank: A h' = u - c sqrt(h). Output is the level h."""

    area: float
    outflow_coeff: float

    def __post_init__(self):
        if self.area <= 0.0:
            raise ValueError("area must be > 0")
        if self.outflow_coeff < 0.0:
            raise ValueError("outflow_coeff must be >= 0")


PlantVariant = Union[LinearStateSpace, Fopdt, SecondOrder, TankNonlinear]


@dataclass(frozen=True)
class PlantModel:
    """A plant variant plus its actuator limits."""

    variant: PlantVariant
    u_min: float = -math.inf
    u_max: float = math.inf
    x0: np.ndarray | None = None

    def __post_init__(self):
        if not self.u_min < self.u_max:
            raise ValueError("require u_min < u_max")
        if self.x0 is not None:
            x0 = np.asarray(self.x0, dtype=float).reshape(-1)
            if x0.shape[0] != self.state_dim:
                raise ValueError("x0 dimension does not match the plant variant")
            object.__setattr__(self, "x0", x0)

    @property
    def state_dim(self) -> int:
        v = self.variant
        if isinstance(v, LinearStateSpace):
            return v.a.shape[0]
        if isinstance(v, SecondOrder):
            return 2
        return 1

    @property
    def n_outputs(self) -> int:
        v = self.variant
        return v.c.shape[0] if isinstance(v, LinearStateSpace) else 1

    @property
    def dead_time(self) -> float:
        return self.variant.dead_time if isinstance(self.variant, Fopdt) else 0.0

    def initial_state(self) -> np.ndarray:
        if self.x0 is not None:
            return self.x0.copy()
        return np.zeros(self.state_dim)

    def derivative(self, x: np.ndarray, u: float) -> np.ndarray:
        v = self.variant
        if isinstance(v, LinearStateSpace):
            return v.a @ x + v.b * u
        if isinstance(v, Fopdt):
            return np.array([(v.gain * u - x[0]) / v.tau])
        if isinstance(v, SecondOrder):
            wn = v.omega_n
            return np.array([x[1], v.gain * wn * wn * u - 2.0 * v.zeta * wn * x[1] - wn * wn * x[0]])
        # tank: level cannot drain below zero
        h = max(x[0], 0.0)
        return np.array([(u - v.outflow_coeff * math.sqrt(h)) / v.area])

    def output(self, x: np.ndarray) -> np.ndarray:
        v = self.variant
        if isinstance(v, LinearStateSpace):
            return v.c @ x
        return x[:1]

    def clamp(self, u: float) -> float:
        return min(max(u, self.u_min), self.u_max)


@dataclass(frozen=True)
class DisturbanceSpec:
    """Additive disturbance D(t); injected at the plant input or output."""

    variant: str = "none"  # none | step | gaussian | sinusoid
    injection: str = "input"  # input | output
    time: float = 0.0
    magnitude: float = 0.0
    std: float = 0.0
    amplitude: float = 0.0
    period: float = 1.0

    def __post_init__(self):
        if self.variant not in ("none", "step", "gaussian", "sinusoid"):
            raise ValueError(f"unknown disturbance variant {self.variant!r}")
        if self.injection not in ("input", "output"):
            raise ValueError(f"unknown injection point {self.injection!r}")
        if self.std < 0.0:
            raise ValueError("std must be >= 0")
        if self.variant == "sinusoid" and self.period <= 0.0:
            raise ValueError("period must be > 0")

    def series(self, cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
        t = cfg.time_grid()
        if self.variant == "none":
            return np.zeros(cfg.n_steps)
        if self.variant == "step":
            if not 0.0 <= self.time <= cfg.horizon:
                raise ValueError("step time outside the horizon")
            return np.where(t >= self.time, self.magnitude, 0.0)
        if self.variant == "gaussian":
            return rng.normal(0.0, self.std, size=cfg.n_steps)
        return self.amplitude * np.sin(2.0 * math.pi * t / self.period)


NO_DISTURBANCE = DisturbanceSpec()


@dataclass(frozen=True)
class SensorSpec:
    """Zero-order-hold sampling with additive gaussian noise and quantization."""

    noise_std: float = 0.0
    sample_period: float | None = None  # None -> every step
    quantization: float = 0.0

    def __post_init__(self):
        if self.noise_std < 0.0 or self.quantization < 0.0:
            raise ValueError("noise_std and quantization must be >= 0")

    def steps_per_sample(self, dt: float) -> int:
        if self.sample_period is None:
            return 1
        ratio = self.sample_period / dt
        m = _round_half_away(ratio)
        if m < 1 or abs(ratio - m) > 1e-9 * max(1.0, ratio):
            raise ValueError("sample_period must be a positive multiple of dt")
        return m


IDEAL_SENSOR = SensorSpec()


def apply_sensor(y, sensor: SensorSpec, rng: np.random.Generator):
    """One fresh sensor reading: additive noise, then optional quantization.

    Holding between samples is the simulation loop's job; this is the
    per-sample measurement map.
    """
    y = np.asarray(y, dtype=float)
    meas = y + rng.normal(0.0, sensor.noise_std, size=y.shape) if sensor.noise_std > 0.0 else y.copy()
    if sensor.quantization > 0.0:
        meas = np.round(meas / sensor.quantization) * sensor.quantization
    return float(meas[0]) if meas.shape == (1,) else meas


class _SensorSampler:
    """Stateful wrapper: fresh reading every m-th step, held value in between."""

    def __init__(self, sensor: SensorSpec, dt: float, rng: np.random.Generator):
        self.sensor = sensor
        self.every = sensor.steps_per_sample(dt)
        self.rng = rng
        self.held = None

    def sample(self, y, k: int):
        if self.held is None or k % self.every == 0:
            self.held = apply_sensor(y, self.sensor, self.rng)
        return self.held


class DelayLine:
    """Pure transport delay quantized to round(L/dt) samples (half away from zero)."""

    def __init__(self, dead_time: float, dt: float):
        if dead_time < 0.0 or dt <= 0.0:
            raise ValueError("require dead_time >= 0 and dt > 0")
        self.n_samples = _round_half_away(dead_time / dt)
        self._buf = np.zeros(max(self.n_samples, 1))
        self._idx = 0

    def push_pop(self, x: float) -> float:
        if self.n_samples == 0:
            return x
        out = self._buf[self._idx]
        self._buf[self._idx] = x
        self._idx = (self._idx + 1) % self.n_samples
        return float(out)


def delay_push_pop(delay: DelayLine, x: float) -> float:
    """Feed one sample in, read the sample from round(L/dt) steps ago (zeros before warm-up)."""
    return delay.push_pop(x)


# ---------------------------------------------------------------------------
# Integrator
# ---------------------------------------------------------------------------

def rk4_step(state: np.ndarray, u, dt: float, dynamics: Callable) -> np.ndarray:
    """Classical 4th-order Runge-Kutta update with input held over the step."""
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    x = np.asarray(state, dtype=float)
    k1 = np.asarray(dynamics(x, u), dtype=float)
    k2 = np.asarray(dynamics(x + 0.5 * dt * k1, u), dtype=float)
    k3 = np.asarray(dynamics(x + 0.5 * dt * k2, u), dtype=float)
    k4 = np.asarray(dynamics(x + dt * k3, u), dtype=float)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise SimulationDiverged("non-finite state after RK4 stage", step=-1)
    return out


# ---------------------------------------------------------------------------
# Controllers usable by the loop
# ---------------------------------------------------------------------------

class Controller(Protocol):
    def reset(self) -> None: ...

    def step(self, w: float, y, dt: float) -> float: ...


class ConstantController:
    """Emits a fixed value; the canonical adversarial 'AI' stand-in."""

    def __init__(self, value: float):
        self.value = value

    def reset(self) -> None:
        pass

    def step(self, w, y, dt) -> float:
        return self.value


class SignalController:
    """Plays back a precomputed input sequence (open-loop excitation runs)."""

    def __init__(self, u: Sequence[float] | Callable[[float], float]):
        self._u = u
        self._k = 0

    def reset(self) -> None:
        self._k = 0

    def step(self, w, y, dt) -> float:
        if callable(self._u):
            value = float(self._u(self._k * dt))
        else:
            seq = self._u
            value = float(seq[self._k]) if self._k < len(seq) else float(seq[-1])
        self._k += 1
        return value


# ---------------------------------------------------------------------------
# Trajectory record and the main loop
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """Uniformly sampled record of one closed- or open-loop run.

    `y` is the primary plant response channel; `y_extra` holds further output
    channels when the plant has more than one (cascade setups).
    """

    t: np.ndarray
    w: np.ndarray
    y: np.ndarray
    y_meas: np.ndarray
    u: np.ndarray
    d: np.ndarray
    dt: float
    y_extra: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.t)
        for name in ("w", "y", "y_meas", "u", "d"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"array {name!r} length mismatch")
        spacing = np.diff(self.t)
        if n > 1 and (np.any(spacing <= 0) or np.ptp(spacing) > 1e-9 * self.dt):
            raise ValueError("t must be strictly increasing with constant spacing")

    def __len__(self) -> int:
        return len(self.t)


def _reference_array(reference, cfg: SimConfig) -> np.ndarray:
    if callable(reference):
        return np.array([float(reference(tk)) for tk in cfg.time_grid()])
    arr = np.asarray(reference, dtype=float)
    if arr.ndim == 0:
        return np.full(cfg.n_steps, float(arr))
    if arr.shape[0] != cfg.n_steps:
        raise ValueError("reference array length must equal the step count")
    return arr.copy()


def step_reference(level: float, time: float = 0.0, baseline: float = 0.0) -> Callable[[float], float]:
    return lambda t: level if t >= time else baseline


def simulate(
    plant: PlantModel,
    controller: Controller,
    reference,
    disturbance: DisturbanceSpec = NO_DISTURBANCE,
    sensor: SensorSpec = IDEAL_SENSOR,
    cfg: SimConfig = SimConfig(dt=0.01, horizon=10.0),
    gain_schedule: Callable[[float], float] | None = None,
) -> Trajectory:
    """Run one fixed-step loop and record every block-diagram signal.

    Per step: read the (possibly disturbed) output, sample the sensor,
    step the controller, clamp the command to the actuator limits, add any
    input disturbance, integrate the plant. `gain_schedule`, when given,
    scales the effective plant input by gain_schedule(t) — a parametric
    process change such as a mid-episode gain doubling.
    """
    n = cfg.n_steps
    rng = np.random.default_rng(cfg.seed)
    t = cfg.time_grid()
    w = _reference_array(reference, cfg)
    d = disturbance.series(cfg, rng)
    sampler = _SensorSampler(sensor, cfg.dt, rng)

    multi = plant.n_outputs > 1
    y_rec = np.zeros(n)
    y_meas_rec = np.zeros(n)
    u_rec = np.zeros(n)
    y_extra = np.zeros((n, plant.n_outputs - 1)) if multi else None

    delay = DelayLine(plant.dead_time, cfg.dt) if plant.dead_time > 0.0 else None
    ref_scale = max(1.0, float(np.max(np.abs(w))) if n else 1.0)
    guard = DIVERGENCE_FACTOR * ref_scale

    x = plant.initial_state()
    controller.reset()
    input_additive = disturbance.injection == "input"

    for k in range(n):
        y_vec = plant.output(x)
        if not input_additive:
            y_vec = y_vec + d[k]
        if not np.all(np.isfinite(y_vec)) or np.max(np.abs(y_vec)) > guard:
            raise SimulationDiverged("plant output exceeded the divergence guard", step=k)

        y_m = sampler.sample(y_vec, k)
        u_cmd = controller.step(w[k], y_m if multi else float(np.atleast_1d(y_m)[0]), cfg.dt)
        if not math.isfinite(u_cmd):
            raise ControllerFault(f"controller emitted a non-finite command at step {k}")
        u_k = plant.clamp(float(u_cmd))

        u_plant = u_k + d[k] if input_additive else u_k
        if gain_schedule is not None:
            u_plant = u_plant * float(gain_schedule(t[k]))
        u_eff = delay.push_pop(u_plant) if delay is not None else u_plant
        try:
            x = rk4_step(x, u_eff, cfg.dt, plant.derivative)
        except SimulationDiverged as exc:
            raise SimulationDiverged("non-finite state during integration", step=k) from exc

        y_rec[k] = y_vec[0]
        y_meas_rec[k] = float(np.atleast_1d(y_m)[0])
        u_rec[k] = u_k
        if multi:
            y_extra[k] = y_vec[1:]

    return Trajectory(
        t=t, w=w, y=y_rec, y_meas=y_meas_rec, u=u_rec, d=d, dt=cfg.dt,
        y_extra=y_extra, meta={"seed": cfg.seed},
    )
