"""Forced Duffing oscillator: RK4 simulation, dataset generation, regime oracle.

Equation of motion (unit mass)::

    x'' + delta*x' + alpha*x + beta*x**3 = f0*cos(omega*t)
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import NonFiniteError, TooShortError

CSV_HEADER = ["traj_id", "f0", "step", "t", "x", "v"]


@dataclass(frozen=True)
class DuffingParams:
    delta: float = 0.3
    alpha: float = -1.0
    beta: float = 1.0
    omega: float = 1.4
    f0: float = 0.0

    def __post_init__(self) -> None:
        if self.delta < 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        if self.omega <= 0:
            raise ValueError(f"omega must be > 0, got {self.omega}")
        if self.f0 < 0:
            raise ValueError(f"f0 must be >= 0, got {self.f0}")

    def with_f0(self, f0: float) -> "DuffingParams":
        return DuffingParams(self.delta, self.alpha, self.beta, self.omega, float(f0))

    @property
    def forcing_period(self) -> float:
        return 2.0 * math.pi / self.omega


@dataclass
class Trajectory:
    f0: float
    dt: float
    times: np.ndarray
    states: np.ndarray  # (N, 2) columns x, v
    traj_id: int = 0

    @property
    def x(self) -> np.ndarray:
        return self.states[:, 0]

    @property
    def v(self) -> np.ndarray:
        return self.states[:, 1]

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class DatasetConfig:
    regimes: tuple[float, ...] = (0.3, 0.5, 0.8)
    per_regime: int = 500
    n_samples: int = 1000
    dt: float = 0.01
    x0_range: tuple[float, float] = (-1.0, 1.0)
    v0_range: tuple[float, float] = (-0.5, 0.5)
    train_fraction: float = 0.8
    params: DuffingParams = field(default_factory=DuffingParams)


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    split: dict[int, str]  # traj_id -> "train" | "test"
    params: DuffingParams
    seed: int
    initial_conditions: dict[int, tuple[float, float]] = field(default_factory=dict)

    @property
    def labels(self) -> dict[int, float]:
        return {tr.traj_id: tr.f0 for tr in self.trajectories}

    def subset(self, name: str) -> list[Trajectory]:
        return [tr for tr in self.trajectories if self.split[tr.traj_id] == name]

    @property
    def train(self) -> list[Trajectory]:
        return self.subset("train")

    @property
    def test(self) -> list[Trajectory]:
        return self.subset("test")


def duffing_rhs(s, t, p: DuffingParams):
    """Time derivative ``(dx/dt, dv/dt)`` of state ``s = (x, v)``.

    Works elementwise, so ``s`` may hold arrays of states.
    """
    x, v = s
    return v, -p.delta * v - p.alpha * x - p.beta * x**3 + p.f0 * np.cos(p.omega * t)


def rk4_step(s, t: float, dt: float, p: DuffingParams):
    """One classical fourth-order Runge-Kutta step from ``t`` to ``t + dt``."""
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    x, v = s
    h = 0.5 * dt
    k1x, k1v = duffing_rhs((x, v), t, p)
    k2x, k2v = duffing_rhs((x + h * k1x, v + h * k1v), t + h, p)
    k3x, k3v = duffing_rhs((x + h * k2x, v + h * k2v), t + h, p)
    k4x, k4v = duffing_rhs((x + dt * k3x, v + dt * k3v), t + dt, p)
    if not (np.all(np.isfinite(k4x)) and np.all(np.isfinite(k4v))
            and np.all(np.isfinite(k2v)) and np.all(np.isfinite(k3v))):
        raise NonFiniteError(f"RK4 stage produced NaN/Inf at t={t}")
    x_new = x + dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
    v_new = v + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(v_new))):
        raise NonFiniteError(f"RK4 step produced NaN/Inf at t={t}")
    return x_new, v_new


def integrate(x0, v0, n_steps: int, dt: float, p: DuffingParams) -> np.ndarray:
    """States at ``t = i*dt`` for ``i = 0..n_steps``; shape ``(n_steps+1, 2, ...)``.

    ``x0``/``v0`` may be arrays, in which case all initial conditions are
    advanced together.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    x = np.asarray(x0, dtype=np.float64)
    v = np.asarray(v0, dtype=np.float64)
    out = np.empty((n_steps + 1, 2) + x.shape)
    out[0, 0], out[0, 1] = x, v
    for i in range(n_steps):
        x, v = rk4_step((x, v), i * dt, dt, p)
        out[i + 1, 0], out[i + 1, 1] = x, v
    return out


def simulate_trajectory(f0: float, x0: float, v0: float, n_steps: int, dt: float,
                        p_base: DuffingParams, traj_id: int = 0) -> Trajectory:
    p = p_base.with_f0(f0)
    states = integrate(x0, v0, n_steps, dt, p)
    return Trajectory(
        f0=float(f0), dt=dt, times=np.arange(n_steps + 1) * dt, states=states, traj_id=traj_id
    )


def _split_counts(n: int, train_fraction: float) -> int:
    # rounds toward train, so a single trajectory lands in train
    return n - int(math.floor((1.0 - train_fraction) * n + 1e-9))


def generate_dataset(cfg: DatasetConfig, seed: int, out: str | Path | None = None) -> Dataset:
    """Simulate ``per_regime`` trajectories for every forcing amplitude.

    Initial conditions are uniform draws from ``x0_range`` x ``v0_range``; the
    train/test split is stratified by regime.  Both are fixed by ``seed``.
    """
    if not cfg.regimes:
        raise ValueError("regimes must be nonempty")
    if cfg.per_regime < 1:
        raise ValueError("per_regime must be >= 1")
    rng = np.random.default_rng(seed)
    trajectories: list[Trajectory] = []
    split: dict[int, str] = {}
    ics: dict[int, tuple[float, float]] = {}
    n_train = _split_counts(cfg.per_regime, cfg.train_fraction)
    next_id = 0
    for f0 in cfg.regimes:
        x0 = rng.uniform(*cfg.x0_range, size=cfg.per_regime)
        v0 = rng.uniform(*cfg.v0_range, size=cfg.per_regime)
        order = rng.permutation(cfg.per_regime)
        p = cfg.params.with_f0(f0)
        try:
            states = integrate(x0, v0, cfg.n_samples - 1, cfg.dt, p)
        except NonFiniteError:
            _report_nonfinite(x0, v0, cfg, p)
            raise
        times = np.arange(cfg.n_samples) * cfg.dt
        train_slots = set(order[:n_train].tolist())
        for j in range(cfg.per_regime):
            tid = next_id + j
            trajectories.append(Trajectory(
                f0=float(f0), dt=cfg.dt, times=times.copy(),
                states=np.ascontiguousarray(states[:, :, j]), traj_id=tid,
            ))
            split[tid] = "train" if j in train_slots else "test"
            ics[tid] = (float(x0[j]), float(v0[j]))
        next_id += cfg.per_regime
    ds = Dataset(trajectories, split, cfg.params, seed, ics)
    if out is not None:
        write_dataset(ds, cfg, out)
    return ds


def _report_nonfinite(x0, v0, cfg: DatasetConfig, p: DuffingParams) -> None:
    for a, b in zip(x0, v0):
        try:
            integrate(a, b, cfg.n_samples - 1, cfg.dt, p)
        except NonFiniteError as exc:
            raise NonFiniteError(f"f0={p.f0} x0={a!r} v0={b!r}: {exc}") from None


def write_dataset(ds: Dataset, cfg: DatasetConfig, out: str | Path) -> None:
    """``train.csv``, ``test.csv`` and ``manifest.json`` under ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "test"):
        trajs = sorted(ds.subset(name), key=lambda tr: tr.traj_id)
        n = len(trajs[0]) if trajs else 0
        frame = pd.DataFrame({
            "traj_id": np.repeat([tr.traj_id for tr in trajs], n).astype(np.int64),
            "f0": np.repeat([tr.f0 for tr in trajs], n),
            "step": np.tile(np.arange(n), len(trajs)).astype(np.int64),
            "t": np.concatenate([tr.times for tr in trajs]) if trajs else [],
            "x": np.concatenate([tr.x for tr in trajs]) if trajs else [],
            "v": np.concatenate([tr.v for tr in trajs]) if trajs else [],
        }, columns=CSV_HEADER)
        frame.to_csv(out / f"{name}.csv", index=False, float_format="%.17g", lineterminator="\n")
    p = asdict(ds.params)
    p.pop("f0")
    manifest = {
        "duffing_params": p,
        "equation": "x'' + delta*x' + alpha*x + beta*x^3 = f0*cos(omega*t)",
        "dt": cfg.dt,
        "n_samples": cfg.n_samples,
        "regimes": list(cfg.regimes),
        "per_regime": cfg.per_regime,
        "x0_range": list(cfg.x0_range),
        "v0_range": list(cfg.v0_range),
        "train_fraction": cfg.train_fraction,
        "seed": ds.seed,
        "counts": {
            "total": len(ds.trajectories),
            "train": len(ds.train),
            "test": len(ds.test),
        },
        "split": {str(k): ds.split[k] for k in sorted(ds.split)},
        "initial_conditions": {str(k): list(ds.initial_conditions[k])
                               for k in sorted(ds.initial_conditions)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    params = DuffingParams(**manifest["duffing_params"])
    trajectories: list[Trajectory] = []
    split: dict[int, str] = {}
    dt = float(manifest["dt"])
    for name in ("train", "test"):
        frame = pd.read_csv(path / f"{name}.csv", float_precision="round_trip")
        if list(frame.columns) != CSV_HEADER:
            raise ValueError(f"{name}.csv: unexpected header {list(frame.columns)}")
        for tid, grp in frame.groupby("traj_id", sort=True):
            trajectories.append(Trajectory(
                f0=float(grp["f0"].iloc[0]), dt=dt, times=grp["t"].to_numpy(),
                states=grp[["x", "v"]].to_numpy(), traj_id=int(tid),
            ))
            split[int(tid)] = name
    trajectories.sort(key=lambda tr: tr.traj_id)
    ics = {int(k): tuple(v) for k, v in manifest.get("initial_conditions", {}).items()}
    return Dataset(trajectories, split, params, int(manifest["seed"]), ics)


@dataclass(frozen=True)
class RegimeDescriptor:
    n_points: int  # distinct Poincare-section points
    chaotic: bool

    @property
    def period(self) -> int | None:
        return None if self.chaotic else self.n_points

    @property
    def label(self) -> str:
        return "chaotic" if self.chaotic else f"period-{self.n_points}"


def poincare_section(traj: Trajectory, p: DuffingParams, warmup: float = 0.0) -> np.ndarray:
    """States sampled stroboscopically at multiples of the forcing period.

    Samples between grid points are linearly interpolated.
    """
    period = p.forcing_period
    t_end = traj.times[-1]
    k0 = int(math.ceil(warmup / period - 1e-12))
    k1 = int(math.floor(t_end / period + 1e-12))
    ts = np.arange(k0, k1 + 1) * period
    return np.stack([np.interp(ts, traj.times, traj.x), np.interp(ts, traj.times, traj.v)], 1)


def regime_oracle(traj: Trajectory, p: DuffingParams, warmup: float = 0.0,
                  min_periods: int = 20, tol: float = 1e-2,
                  chaos_threshold: int = 8) -> RegimeDescriptor:
    """Classify a trajectory as period-k or chaotic from its Poincare section.

    Section points closer than ``tol`` are merged; more than
    ``chaos_threshold`` distinct points is reported as chaos.
    """
    if len(traj) < 2:
        raise TooShortError(f"trajectory has {len(traj)} samples")
    pts = poincare_section(traj, p, warmup)
    if len(pts) < min_periods:
        raise TooShortError(
            f"only {len(pts)} forcing periods after warm-up; need {min_periods}"
        )
    reps: list[np.ndarray] = []
    for q in pts:
        if not any(np.hypot(*(q - r)) < tol for r in reps):
            reps.append(q)
            if len(reps) > chaos_threshold:
                break
    return RegimeDescriptor(len(reps), len(reps) > chaos_threshold)


def validate_regimes(regimes, p_base: DuffingParams, steps_per_period: int = 100,
                     ics=((0.1, 0.0), (0.5, 0.2), (-0.7, 0.1)),
                     warmup_periods: int = 100, periods: int = 40) -> dict[float, list[RegimeDescriptor]]:
    """Long-run oracle classification of each regime from a few initial conditions.

    The step is an integer fraction of the forcing period so section samples
    fall on the grid.
    """
    period = p_base.forcing_period
    dt = period / steps_per_period
    n_steps = (warmup_periods + periods) * steps_per_period
    out: dict[float, list[RegimeDescriptor]] = {}
    x0 = np.array([ic[0] for ic in ics])
    v0 = np.array([ic[1] for ic in ics])
    times = np.arange(n_steps + 1) * dt
    for f0 in regimes:
        states = integrate(x0, v0, n_steps, dt, p_base.with_f0(f0))
        out[float(f0)] = [
            regime_oracle(Trajectory(f0, dt, times, states[:, :, j]), p_base,
                          warmup=warmup_periods * period - 0.5 * dt, min_periods=periods // 2)
            for j in range(len(ics))
        ]
    return out


def regimes_separated(report: dict[float, list[RegimeDescriptor]]) -> bool:
    """True when the lowest amplitude is periodic and the highest chaotic, for every IC."""
    lo, hi = min(report), max(report)
    return all(not d.chaotic for d in report[lo]) and all(d.chaotic for d in report[hi])
