"""Adam, the phased alternating schedule, and the training loops for every method."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import neural as nn
from .duffing import Dataset, DuffingParams, Trajectory, load_dataset
from .errors import ConfigError, DivergenceError, NonFiniteError

log = logging.getLogger(__name__)

METHODS = ("tapinn_ao", "tapinn_joint", "parametric", "hyperpinn", "multi_output")
MODEL_KIND = {
    "tapinn_ao": "tapinn",
    "tapinn_joint": "tapinn",
    "parametric": "parametric",
    "hyperpinn": "hyperpinn",
    "multi_output": "multi_output",
}
STEPLOG_HEADER = ["step", "epoch", "phase", "loss_data", "loss_physics", "loss_metric",
                  "loss_total", "grad_norm", "wall_ms"]


@dataclass
class TrainConfig:
    method: str = "tapinn_ao"
    epochs: int = 30
    lr: float = 1e-3
    alpha: float = 1.0
    beta: float = 0.1
    margin: float = 0.2
    k_joint: int = 5
    phase1_epochs: int = 5
    phase2_epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    data_dir: str = "data"
    window_len: int = 100
    n_collocation: int = 128
    n_data_points: int = 200
    divergence_threshold: float = 1e6
    log_wall_time: bool = False
    dims: dict | None = None

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; valid: {', '.join(METHODS)}")
        if self.phase1_epochs + self.phase2_epochs > self.epochs:
            raise ConfigError("phase1_epochs + phase2_epochs must not exceed epochs")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.k_joint < 1:
            raise ConfigError("k_joint must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @property
    def kind(self) -> str:
        return MODEL_KIND[self.method]


@dataclass
class AdamState:
    """Per-array Adam moments; each array keeps its own update counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float, mask=None) -> dict[str, np.ndarray]:
    """Bias-corrected Adam update of the arrays named in ``mask`` (default: all in ``grads``).

    Returns a new mapping; arrays outside the mask are the same objects as in
    ``params`` and their moments are left alone.
    """
    names = list(grads) if mask is None else [k for k in params if k in set(mask)]
    out = dict(params)
    for k in names:
        g = grads[k]
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k}")
        if k not in state.m:
            state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
            state.t[k] = 0
        state.t[k] += 1
        t = state.t[k]
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        m_hat = state.m[k] / (1.0 - state.beta1**t)
        v_hat = state.v[k] / (1.0 - state.beta2**t)
        out[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


def schedule_phase(epoch: int, batch_idx: int, cfg: TrainConfig) -> str:
    """Phase tag of one optimizer step: ``"I"``, ``"II"`` or ``"joint"``.

    After the metric and reconstruction phases, every ``k_joint``-th batch is a
    joint update and the rest continue generator-only updates.
    """
    if epoch < cfg.phase1_epochs:
        return "I"
    if epoch < cfg.phase1_epochs + cfg.phase2_epochs:
        return "II"
    return "joint" if batch_idx % cfg.k_joint == cfg.k_joint - 1 else "II"


@dataclass
class StepLog:
    step: int
    epoch: int
    phase: str
    losses: L.LossBreakdown
    grad_norm: float
    wall_ms: float = 0.0

    def row(self) -> list[str]:
        lb = self.losses
        return [str(self.step), str(self.epoch), self.phase, repr(lb.data), repr(lb.physics),
                repr(lb.metric), repr(lb.total), repr(self.grad_norm), repr(self.wall_ms)]


def write_steplog(logs: list[StepLog], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STEPLOG_HEADER)
        for rec in logs:
            w.writerow(rec.row())


def read_steplog(path: str | Path) -> list[StepLog]:
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            lb = L.LossBreakdown(float(r["loss_data"]), float(r["loss_physics"]),
                                 float(r["loss_metric"]), float(r["loss_total"]), math.nan, math.nan)
            out.append(StepLog(int(r["step"]), int(r["epoch"]), r["phase"], lb,
                               float(r["grad_norm"]), float(r["wall_ms"])))
    return out


# -- data plumbing ----------------------------------------------------------

@dataclass
class TrainArrays:
    """Train split packed into dense arrays."""

    x: np.ndarray        # (N, S)
    v: np.ndarray        # (N, S)
    f0: np.ndarray       # (N,)
    windows: np.ndarray  # (N, L, 2)
    times: np.ndarray    # (S,)
    time_scale: float

    @classmethod
    def from_trajectories(cls, trajs: list[Trajectory], window_len: int) -> "TrainArrays":
        x = np.stack([tr.x for tr in trajs])
        v = np.stack([tr.v for tr in trajs])
        if x.shape[1] < window_len:
            raise ConfigError(f"window_len {window_len} exceeds trajectory length {x.shape[1]}")
        windows = np.stack([x[:, :window_len], v[:, :window_len]], axis=-1)
        times = trajs[0].times
        return cls(x, v, np.array([tr.f0 for tr in trajs]), windows, times,
                   float(len(times) * trajs[0].dt))


def stratified_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches with regimes interleaved so each batch mixes labels."""
    groups = [rng.permutation(np.flatnonzero(labels == lab)) for lab in np.unique(labels)]
    order = []
    for i in range(max(len(g) for g in groups)):
        order.extend(int(g[i]) for g in groups if i < len(g))
    order = np.array(order)
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


@dataclass
class Batch:
    idx: np.ndarray
    windows: np.ndarray
    f0: np.ndarray
    t_data: np.ndarray   # (B, P_d)
    x_data: np.ndarray
    v_data: np.ndarray
    t_colloc: np.ndarray  # (B, P_c)


def make_batch(arrs: TrainArrays, idx: np.ndarray, cfg: TrainConfig,
               rng: np.random.Generator) -> Batch:
    n = arrs.x.shape[1]
    stride = max(n // cfg.n_data_points, 1)
    offset = int(rng.integers(stride))
    cols = (offset + stride * np.arange(min(cfg.n_data_points, n)))
    cols = cols[cols < n]
    b = len(idx)
    t_c = rng.uniform(0.0, arrs.times[-1], size=(b, cfg.n_collocation))
    return Batch(idx, arrs.windows[idx], arrs.f0[idx],
                 np.broadcast_to(arrs.times[cols], (b, len(cols))),
                 arrs.x[idx][:, cols], arrs.v[idx][:, cols], t_c)


# -- objectives -------------------------------------------------------------

def _wrt(cfg: TrainConfig, phase: str, params: nn.ModelParams) -> list[str]:
    if phase == "I":
        return params.names("encoder.")
    if phase == "II":
        return params.names("generator.")
    return list(params.arrays)


def _objective(cfg: TrainConfig, phase: str, batch: Batch, pd: DuffingParams,
               time_scale: float, parts: dict):
    """Loss closure for :func:`autodiff.grad`; stashes component values in ``parts``."""
    f0_col = batch.f0[:, None]

    def tapinn(q):
        z = nn.encoder_forward(batch.windows, q)
        gen = lambda t, zz: nn.generator_forward(t, zz, q, time_scale)  # noqa: E731
        if phase == "I":
            metric = L.triplet_loss(z, batch.f0, cfg.margin) if _has_triplets(batch) else 0.0
            z_val = ad.value_of(z)
            plain = {k: ad.value_of(v) for k, v in q.items()}
            gen_plain = lambda t, zz: nn.generator_forward(t, zz, plain, time_scale)  # noqa: E731
            data = L.data_loss(gen_plain(batch.t_data, z_val), batch.x_data)
            phys = L.physics_residual(gen_plain, z_val, f0_col, batch.t_colloc, pd)
            objective = metric
        else:
            data = L.data_loss(gen(batch.t_data, z), batch.x_data)
            phys = L.physics_residual(gen, z, f0_col, batch.t_colloc, pd)
            metric = L.triplet_loss(z, batch.f0, cfg.margin) if _has_triplets(batch) else 0.0
            objective = data + cfg.alpha * phys
            if phase == "joint":
                objective = objective + cfg.beta * metric
        parts.update(data=data, physics=phys, metric=metric)
        return objective

    def multi_output(q):
        z = nn.encoder_forward(batch.windows, q)
        out = nn.generator_forward(batch.t_data, z, q, time_scale, component=None)
        data = L.sobolev_loss((out[..., 0], out[..., 1]), (batch.x_data, batch.v_data))
        gen = lambda t, zz: nn.generator_forward(t, zz, q, time_scale)  # noqa: E731
        phys = L.physics_residual(gen, z, f0_col, batch.t_colloc, pd)
        parts.update(data=data, physics=phys, metric=0.0)
        return data + cfg.alpha * phys

    def parametric(q):
        gen = lambda t, lam: nn.parametric_forward(t, lam, q, time_scale)  # noqa: E731
        data = L.data_loss(gen(batch.t_data, batch.f0), batch.x_data)
        phys = L.physics_residual(gen, batch.f0, f0_col, batch.t_colloc, pd)
        parts.update(data=data, physics=phys, metric=0.0)
        return data + cfg.alpha * phys

    def hyperpinn(q):
        hidden = cfg_dims(cfg)["target_hidden"]
        weights = nn.hypernet_forward(batch.f0, q)
        gen = lambda t, w: nn.target_forward(t, w, hidden, time_scale)  # noqa: E731
        data = L.data_loss(gen(batch.t_data, weights), batch.x_data)
        phys = L.physics_residual(gen, weights, f0_col, batch.t_colloc, pd)
        parts.update(data=data, physics=phys, metric=0.0)
        return data + cfg.alpha * phys

    return {"tapinn": tapinn, "multi_output": multi_output,
            "parametric": parametric, "hyperpinn": hyperpinn}[cfg.kind]


def _has_triplets(batch: Batch) -> bool:
    return L.triplet_indices(batch.f0)[0].size > 0


def cfg_dims(cfg: TrainConfig) -> dict:
    return dict(nn.DEFAULT_DIMS[cfg.kind] if cfg.dims is None else cfg.dims)


# -- the loop ---------------------------------------------------------------

@dataclass
class TrainResult:
    params: nn.ModelParams
    logs: list[StepLog]
    snapshots: dict[str, nn.ModelParams]
    run_dir: Path | None = None


def _phase_tag(cfg: TrainConfig, epoch: int, batch_idx: int) -> str:
    if cfg.method == "tapinn_ao":
        return schedule_phase(epoch, batch_idx, cfg)
    if cfg.method == "tapinn_joint":
        return "joint"
    return "baseline"


def _snapshot_epochs(cfg: TrainConfig) -> dict[str, tuple[int, str]]:
    """Snapshot tag -> (epoch, "start" | "end")."""
    if cfg.method != "tapinn_ao":
        return {}
    p1, p2 = cfg.phase1_epochs, cfg.phase2_epochs
    return {f"epoch{p1:02d}": (p1, "start"), f"epoch{p1 + p2 - 1:02d}": (p1 + p2 - 1, "end")}


def save_model(params: nn.ModelParams, ckpt_dir: Path, tag: str) -> None:
    if params.kind in ("tapinn", "multi_output"):
        nn.save_checkpoint(params, ckpt_dir / f"encoder.{tag}", params.names("encoder."))
        nn.save_checkpoint(params, ckpt_dir / f"generator.{tag}", params.names("generator."))
    else:
        nn.save_checkpoint(params, ckpt_dir / f"model.{tag}")


def load_model(ckpt_dir: Path, tag: str = "final") -> nn.ModelParams:
    ckpt_dir = Path(ckpt_dir)
    if (ckpt_dir / f"model.{tag}.json").exists():
        return nn.load_checkpoint(ckpt_dir / f"model.{tag}")
    enc = nn.load_checkpoint(ckpt_dir / f"encoder.{tag}")
    gen = nn.load_checkpoint(ckpt_dir / f"generator.{tag}")
    return nn.ModelParams(enc.kind, {**enc.arrays, **gen.arrays}, enc.dims, enc.seed)


def _keep_heap_buffers() -> None:
    # Large numpy temporaries otherwise go through mmap/munmap on every op and
    # page-fault on first touch; keeping them on the heap is ~25% faster here.
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


def _train(cfg: TrainConfig, dataset: Dataset, out_dir: str | Path | None) -> TrainResult:
    _keep_heap_buffers()
    started = time.perf_counter()
    pd = dataset.params
    arrs = TrainArrays.from_trajectories(dataset.train, cfg.window_len)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    batch_rng = np.random.default_rng(seeds[0])
    sample_rng = np.random.default_rng(seeds[1])
    params = nn.init_params(cfg.kind, cfg.seed, cfg_dims(cfg))
    state = AdamState()
    logs: list[StepLog] = []
    snapshots: dict[str, nn.ModelParams] = {}
    snap_at = _snapshot_epochs(cfg)
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / "checkpoints" if out is not None else None

    def snapshot(tag: str) -> None:
        snapshots[tag] = params.copy()
        if ckpt is not None:
            save_model(params, ckpt, tag)

    step = 0
    for epoch in range(cfg.epochs):
        for tag, (e, when) in snap_at.items():
            if e == epoch and when == "start":
                snapshot(tag)
        for b_idx, idx in enumerate(stratified_batches(arrs.f0, cfg.batch_size, batch_rng)):
            batch = make_batch(arrs, idx, cfg, sample_rng)
            phase = _phase_tag(cfg, epoch, b_idx)
            parts: dict = {}
            fn = _objective(cfg, phase if cfg.kind == "tapinn" else "joint", batch, pd,
                            arrs.time_scale, parts)
            tic = time.perf_counter()
            try:
                objective, grads = ad.grad(fn, params.arrays, wrt=_wrt(cfg, phase, params))
                breakdown = L.total_loss(parts["data"], parts["physics"], parts["metric"],
                                         cfg.alpha, cfg.beta)
            except NonFiniteError:
                _abort(cfg, params, ckpt, step, math.nan)
            if not (objective < cfg.divergence_threshold and breakdown.total < cfg.divergence_threshold):
                _abort(cfg, params, ckpt, step, max(objective, breakdown.total))
            gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            params = params.replace(adam_step(params.arrays, grads, state, cfg.lr, mask=list(grads)))
            wall = (time.perf_counter() - tic) * 1e3 if cfg.log_wall_time else 0.0
            logs.append(StepLog(step, epoch, phase, breakdown, gnorm, wall))
            step += 1
        for tag, (e, when) in snap_at.items():
            if e == epoch and when == "end":
                snapshot(tag)
        recent = [r.losses.total for r in logs if r.epoch == epoch]
        log.info("%s seed=%d epoch %d/%d mean L_total=%.5f", cfg.method, cfg.seed, epoch + 1,
                 cfg.epochs, float(np.mean(recent)) if recent else math.nan)
    snapshot("final")
    if out is not None:
        write_steplog(logs, out / "steplog.csv")
        _write_run_info(cfg, params, dataset, arrs, out)
        # wall-clock lives apart from the deterministic artifacts
        (out / "timing.json").write_text(
            json.dumps({"train_seconds": round(time.perf_counter() - started, 3)}) + "\n")
    return TrainResult(params, logs, snapshots, out)


def _abort(cfg: TrainConfig, params: nn.ModelParams, ckpt: Path | None, step: int, loss: float):
    if ckpt is not None:
        save_model(params, ckpt, "last_good")
    raise DivergenceError(cfg.method, cfg.seed, step, loss)


def _write_run_info(cfg: TrainConfig, params: nn.ModelParams, dataset: Dataset,
                    arrs: TrainArrays, out: Path) -> None:
    p = asdict(dataset.params)
    p.pop("f0")
    info = {
        "method": cfg.method,
        "seed": cfg.seed,
        "kind": cfg.kind,
        "dims": params.dims,
        "param_count": nn.param_count(params),
        "time_scale": arrs.time_scale,
        "config": asdict(cfg),
        "duffing_params": p,
    }
    (out / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def train_tapinn(cfg: TrainConfig, dataset: Dataset | None = None,
                 out_dir: str | Path | None = None) -> TrainResult:
    """Alternating (``tapinn_ao``) or joint (``tapinn_joint``) training of encoder + generator."""
    if cfg.method not in ("tapinn_ao", "tapinn_joint"):
        raise ConfigError(f"train_tapinn does not handle method {cfg.method!r}")
    return _train(cfg, dataset if dataset is not None else load_dataset(cfg.data_dir), out_dir)


def train_baseline(cfg: TrainConfig, dataset: Dataset | None = None,
                   out_dir: str | Path | None = None) -> TrainResult:
    if cfg.method not in ("parametric", "hyperpinn", "multi_output"):
        raise ConfigError(f"train_baseline does not handle method {cfg.method!r}")
    return _train(cfg, dataset if dataset is not None else load_dataset(cfg.data_dir), out_dir)


def train(cfg: TrainConfig, dataset: Dataset | None = None,
          out_dir: str | Path | None = None) -> TrainResult:
    if cfg.method.startswith("tapinn"):
        return train_tapinn(cfg, dataset, out_dir)
    return train_baseline(cfg, dataset, out_dir)
