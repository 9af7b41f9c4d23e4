"""Synthetic data sources: a noisy pendulum SDE, a two-timescale additive
generator with known ground truth, per-column normalization, and the CSV
dataset format.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import MalformedHeader, NonFiniteValue, NonUniformSpacing
from .model import Dataset
from .rng import RngStream


@dataclass
class PendulumConfig:
    """Defaults give a ~2 s swing period sampled at 2 ms, so a stride-1
    window of 50 points covers 5% of a cycle (nearly flat) while a stride-30
    window spans over a full cycle."""

    g_over_l: float = 9.81
    damping: float = 0.25
    diffusion: float = 0.1
    dt_sim: float = 1e-3
    subsample: int = 2
    T_out: int = 4000
    obs_noise: float = 0.05
    theta0: float = 1.5
    omega0: float = 0.0

    def __post_init__(self):
        if min(self.g_over_l, self.dt_sim) <= 0 or self.subsample < 1:
            raise ValueError("pendulum config values must be positive")
        if self.damping < 0 or self.diffusion < 0 or self.obs_noise < 0:
            raise ValueError("noise/damping must be non-negative")
        if self.T_out < 2:
            raise ValueError("need at least two output points")
        if self.dt_sim * self.g_over_l >= 0.1:
            raise ValueError("dt_sim too coarse for the given g_over_l")

    @classmethod
    def from_dict(cls, d: dict) -> "PendulumConfig":
        return cls(**d)


def pendulum_dense_path(cfg: PendulumConfig, rng: RngStream) -> np.ndarray:
    """Euler-Maruyama path of (angle, velocity), shape (n_dense, 2)."""
    n_dense = cfg.subsample * (cfg.T_out - 1) + 1
    path = np.empty((n_dense, 2))
    th, om = cfg.theta0, cfg.omega0
    path[0] = (th, om)
    dt = cfg.dt_sim
    sq = np.sqrt(dt)
    noise = rng.normal(n_dense - 1)
    for i in range(1, n_dense):
        dom = (-cfg.g_over_l * np.sin(th) - cfg.damping * om) * dt \
            + cfg.diffusion * sq * noise[i - 1]
        th = th + om * dt
        om = om + dom
        path[i] = (th, om)
    return path


def gen_pendulum(cfg: PendulumConfig, rng: RngStream) -> Dataset:
    """Noisy pendulum observations: angle plus Gaussian noise, no inputs.

    The dense simulation runs at dt_sim and is thinned by ``subsample``;
    the dataset grid spacing is dt_sim * subsample.
    """
    dense = pendulum_dense_path(cfg, rng.child(0))
    theta = dense[:: cfg.subsample, 0]
    y = theta + cfg.obs_noise * rng.child(1).normal(cfg.T_out)
    u = np.zeros((cfg.T_out, 0))
    return Dataset(y=y[:, None], u=u, dt=cfg.dt_sim * cfg.subsample)


@dataclass
class OscillatorSpec:
    period: float
    amplitude: float
    gain: float = 1.0

    def __post_init__(self):
        if self.period <= 0 or self.amplitude < 0:
            raise ValueError("period must be > 0 and amplitude >= 0")


@dataclass
class MultiScaleConfig:
    """Two input-driven damped oscillators on separated timescales.

    The fast channel is driven by the last input channel with the configured
    coupling gain; the slow channel by the first input channel. Setting an
    amplitude to zero removes that channel (fast-only / slow-only datasets).
    """

    T: int = 4000
    fast: OscillatorSpec = field(default_factory=lambda: OscillatorSpec(12.0, 1.0, 1.0))
    slow: OscillatorSpec = field(default_factory=lambda: OscillatorSpec(600.0, 1.0))
    obs_noise: float = 0.05
    input_dim: int = 2
    damping_ratio: float = 0.4
    seed: int | None = None

    def __post_init__(self):
        if self.T < 2 or self.input_dim < 1:
            raise ValueError("T must be >= 2 and input_dim >= 1")
        if self.fast.amplitude > 0 and self.slow.amplitude > 0 \
                and self.slow.period < 10 * self.fast.period:
            raise ValueError("slow period must be >= 10x the fast period")

    @classmethod
    def from_dict(cls, d: dict) -> "MultiScaleConfig":
        d = dict(d)
        if "fast" in d:
            d["fast"] = OscillatorSpec(**d["fast"])
        if "slow" in d:
            d["slow"] = OscillatorSpec(**d["slow"])
        return cls(**d)


@dataclass
class MultiScaleTruth:
    """Realized ground truth: one column per channel (fast, slow) plus the
    observation-noise draw, so components + noise reconstruct y exactly."""

    components: np.ndarray  # (T, 2)
    noise: np.ndarray  # (T,)


def _smooth_signal(T: int, periods: np.ndarray, rng: RngStream) -> np.ndarray:
    """Standardized random sum of sinusoids at the given periods.

    Line amplitudes are bounded away from zero so every listed period keeps
    a visible spectral line in the drive.
    """
    t = np.arange(T)
    out = np.zeros(T)
    amps = rng.uniform(0.7, 1.3, periods.size) * np.where(
        rng.uniform(size=periods.size) < 0.5, -1.0, 1.0)
    phases = rng.uniform(0.0, 2.0 * np.pi, periods.size)
    for a, p, ph in zip(amps, periods, phases):
        out += a * np.sin(2.0 * np.pi * t / p + ph)
    sd = out.std()
    return out / sd if sd > 0 else out


def _driven_oscillator(drive: np.ndarray, period: float, gain: float,
                       damping_ratio: float) -> np.ndarray:
    """Semi-implicit Euler resonator response to the drive, unit time step."""
    w0 = 2.0 * np.pi / period
    p, v = 0.0, 0.0
    out = np.empty(drive.size)
    for i, d in enumerate(drive):
        v += -w0 * w0 * p - 2.0 * damping_ratio * w0 * v + gain * d
        p += v
        out[i] = p
    return out


def gen_multiscale(cfg: MultiScaleConfig, rng: RngStream | None = None):
    """Dataset plus realized ground truth for the two-timescale generator."""
    if rng is None:
        if cfg.seed is None:
            raise ValueError("either pass an rng or set cfg.seed")
        rng = RngStream(cfg.seed)
    T = cfg.T
    u = np.empty((T, cfg.input_dim))
    # each drive carries lines at and below its channel's period; the
    # resonator response then peaks at exactly the configured period
    # (shorter-period lines are suppressed by the frequency response)
    slow_periods = cfg.slow.period * np.geomspace(0.25, 1.0, 4)
    fast_periods = np.maximum(cfg.fast.period * np.geomspace(0.25, 1.0, 4), 2.0)
    for j in range(cfg.input_dim):
        periods = slow_periods if j == 0 else fast_periods
        u[:, j] = _smooth_signal(T, periods, rng.child(0, j))

    def channel(spec: OscillatorSpec, drive_col: int) -> np.ndarray:
        if spec.amplitude == 0:
            return np.zeros(T)
        raw = _driven_oscillator(u[:, drive_col], spec.period, spec.gain,
                                 cfg.damping_ratio)
        sd = raw.std()
        return spec.amplitude * raw / sd if sd > 0 else raw

    fast = channel(cfg.fast, cfg.input_dim - 1)
    slow = channel(cfg.slow, 0)
    noise = cfg.obs_noise * rng.child(1).normal(T)
    y = fast + slow + noise
    data = Dataset(y=y[:, None], u=u, dt=1.0)
    return data, MultiScaleTruth(components=np.stack([fast, slow], axis=1),
                                 noise=noise)


# ---------------------------------------------------------------------------
# Normalization


def normalize(data: Dataset) -> Dataset:
    """Zero-mean unit-variance transform per column; the transform is stored
    on the returned dataset for inverse application to predictions."""
    y_mean = data.y.mean(axis=0)
    y_std = data.y.std(axis=0)
    u_mean = data.u.mean(axis=0) if data.input_dim else np.zeros(0)
    u_std = data.u.std(axis=0) if data.input_dim else np.zeros(0)
    for name, std in (("y", y_std), ("u", u_std)):
        bad = std < 1e-12
        if np.any(bad):
            warnings.warn(f"constant {name} column(s) {np.where(bad)[0].tolist()}; "
                          "scale kept at 1")
            std[bad] = 1.0
    norm = {
        "y_mean": y_mean.tolist(), "y_std": y_std.tolist(),
        "u_mean": u_mean.tolist(), "u_std": u_std.tolist(),
    }
    y = (data.y - y_mean) / y_std
    u = (data.u - u_mean) / u_std if data.input_dim else data.u
    return Dataset(y=y, u=u, dt=data.dt, normalization=norm)


def apply_normalization(data: Dataset, norm: dict) -> Dataset:
    y = (data.y - np.asarray(norm["y_mean"])) / np.asarray(norm["y_std"])
    if data.input_dim:
        u = (data.u - np.asarray(norm["u_mean"])) / np.asarray(norm["u_std"])
    else:
        u = data.u
    return Dataset(y=y, u=u, dt=data.dt, normalization=norm)


# ---------------------------------------------------------------------------
# CSV format: header "t,u1..uDu,y1..yDy", uniform strictly increasing t


def write_csv(data: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = (["t"] + [f"u{j + 1}" for j in range(data.input_dim)]
                  + [f"y{j + 1}" for j in range(data.out_dim)])
        w.writerow(header)
        for i in range(data.T):
            row = [format(i * data.dt, ".17g")]
            row += [format(v, ".17g") for v in data.u[i]]
            row += [format(v, ".17g") for v in data.y[i]]
            w.writerow(row)


def read_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedHeader("empty file") from None
        rows = list(reader)
    if not header or header[0] != "t":
        raise MalformedHeader("first column must be 't'")
    n_u = 0
    col = 1
    while col < len(header) and header[col] == f"u{n_u + 1}":
        n_u += 1
        col += 1
    n_y = 0
    while col < len(header) and header[col] == f"y{n_y + 1}":
        n_y += 1
        col += 1
    if col != len(header):
        raise MalformedHeader(f"unexpected column {header[col]!r}")
    if n_y == 0:
        raise MalformedHeader("missing column 'y1'")
    if len(rows) < 2:
        raise MalformedHeader("need at least two data rows")
    vals = np.empty((len(rows), len(header)))
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise MalformedHeader(f"row {i + 2} has {len(row)} fields, "
                                  f"expected {len(header)}")
        vals[i] = [float(v) for v in row]
        if not np.all(np.isfinite(vals[i])):
            raise NonFiniteValue(f"non-finite value in row {i + 2}")
    t = vals[:, 0]
    dt = t[1] - t[0]
    if dt <= 0:
        raise NonUniformSpacing("time column must be strictly increasing (row 3)")
    scale = max(abs(dt), 1e-300)
    for i in range(1, len(t)):
        if abs((t[i] - t[i - 1]) - dt) > 1e-9 * max(scale, abs(t[i])):
            raise NonUniformSpacing(f"non-uniform spacing at row {i + 2}")
    return Dataset(y=vals[:, 1 + n_u:], u=vals[:, 1:1 + n_u], dt=float(dt))
