"""Post-training metrics: ODE residual, test MSE, gradient statistics, linear probe."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from . import neural as nn
from .duffing import DuffingParams, Trajectory, load_dataset
from .errors import NonFiniteError, SingularError, TooFewRecordsError
from .losses import ode_residual
from .training import METHODS, StepLog, load_model, read_steplog

log = logging.getLogger(__name__)

EVAL_SEED = 20240607
DEFAULT_NC = 10_000
PROBE_RIDGE = 1e-8

# Row order of the comparison table; the joint-training ablation goes last.
TABLE_ORDER = ("parametric", "multi_output", "hyperpinn", "tapinn_ao", "tapinn_joint")
TABLE_LABELS = {
    "parametric": "Parametric Baseline",
    "multi_output": "Multi-Output",
    "hyperpinn": "HyperPINN",
    "tapinn_ao": "Ours (AO)",
    "tapinn_joint": "Joint Training",
}


class ConditionedModel(Protocol):
    """Anything that maps a batch of trajectories to a conditioning and predicts x(t)."""

    def condition(self, windows: np.ndarray, f0: np.ndarray): ...

    def forward(self, t, cond): ...


@dataclass
class TrainedModel:
    method: str
    params: nn.ModelParams
    time_scale: float
    window_len: int

    @property
    def has_encoder(self) -> bool:
        return self.params.kind in ("tapinn", "multi_output")

    def condition(self, windows: np.ndarray, f0: np.ndarray):
        kind = self.params.kind
        if kind in ("tapinn", "multi_output"):
            return nn.encoder_forward(windows, self.params.arrays)
        if kind == "parametric":
            return np.asarray(f0, dtype=np.float64)
        return nn.hypernet_forward(f0, self.params.arrays)

    def forward(self, t, cond):
        kind, arrays = self.params.kind, self.params.arrays
        if kind in ("tapinn", "multi_output"):
            return nn.generator_forward(t, cond, arrays, self.time_scale)
        if kind == "parametric":
            return nn.parametric_forward(t, cond, arrays, self.time_scale)
        return nn.target_forward(t, cond, self.params.dims["target_hidden"], self.time_scale)

    def embed(self, windows: np.ndarray) -> np.ndarray:
        if not self.has_encoder:
            raise ValueError(f"{self.method} has no encoder")
        return nn.encoder_forward(windows, self.params.arrays)


def load_trained(run_dir: str | Path, tag: str = "final") -> TrainedModel:
    run_dir = Path(run_dir)
    info = json.loads((run_dir / "run.json").read_text())
    params = load_model(run_dir / "checkpoints", tag)
    return TrainedModel(info["method"], params, float(info["time_scale"]),
                        int(info["config"]["window_len"]))


def _windows(trajs: Sequence[Trajectory], window_len: int) -> np.ndarray:
    return np.stack([np.stack([tr.x[:window_len], tr.v[:window_len]], -1) for tr in trajs])


def _chunks(n: int, size: int) -> Iterable[slice]:
    for i in range(0, n, size):
        yield slice(i, min(i + size, n))


def residual_per_trajectory(model: ConditionedModel, trajs: Sequence[Trajectory], n_c: int,
                            p: DuffingParams, seed: int = EVAL_SEED, window_len: int = 100,
                            chunk: int = 4) -> np.ndarray:
    """Mean squared ODE residual for each trajectory on ``n_c`` uniform points in ``[0, T]``."""
    if n_c < 1:
        raise ValueError("n_c must be >= 1")
    rng = np.random.default_rng(seed)
    t_all = np.stack([rng.uniform(0.0, tr.times[-1], size=n_c) for tr in trajs])
    f0 = np.array([tr.f0 for tr in trajs])
    out = np.empty(len(trajs))
    for sl in _chunks(len(trajs), chunk):
        cond = model.condition(_windows(trajs[sl], window_len), f0[sl])
        t = t_all[sl]
        x, xd, xdd = ad.time_derivatives(model.forward, cond, t)
        r = ode_residual(x, xd, xdd, t, f0[sl, None], p)
        out[sl] = np.mean(np.asarray(r) ** 2, axis=1)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("physics residual is not finite")
    return out


def eval_physics_residual(model: ConditionedModel, trajs: Sequence[Trajectory], n_c: int,
                          p: DuffingParams, seed: int = EVAL_SEED, window_len: int = 100) -> float:
    """Residual averaged over trajectories, ``n_c`` collocation points each."""
    return float(np.mean(residual_per_trajectory(model, trajs, n_c, p, seed, window_len)))


def eval_data_mse(model: ConditionedModel, trajs: Sequence[Trajectory], window_len: int = 100,
                  chunk: int = 25) -> float:
    """MSE of predicted x against ground truth over every stored time step."""
    if not trajs:
        raise ValueError("test split is empty")
    f0 = np.array([tr.f0 for tr in trajs])
    total, count = 0.0, 0
    for sl in _chunks(len(trajs), chunk):
        sub = trajs[sl]
        cond = model.condition(_windows(sub, window_len), f0[sl])
        t = np.stack([tr.times for tr in sub])
        pred = np.asarray(model.forward(t, cond))
        truth = np.stack([tr.x for tr in sub])
        total += float(np.sum((pred - truth) ** 2))
        count += truth.size
    return total / count


def comparison_filter(method: str):
    """Steps entering the gradient comparison: TAPINN-AO drops its metric-only phase."""
    if method == "tapinn_ao":
        return lambda rec: rec.phase != "I"
    return lambda rec: True


def gradient_stats(logs: Sequence[StepLog], window=None) -> tuple[float, float]:
    """Sample mean and unbiased variance of the logged global gradient norms."""
    norms = np.array([r.grad_norm for r in logs if window is None or window(r)])
    if norms.size < 2:
        raise TooFewRecordsError(f"need >= 2 records, got {norms.size}")
    return float(norms.mean()), float(norms.var(ddof=1))


def linear_probe(embeddings, f0_labels, ridge: float = PROBE_RIDGE) -> float:
    """In-sample MSE of a least-squares affine regression of F0 on embeddings."""
    z = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(f0_labels, dtype=np.float64)
    n, d = z.shape
    if n < d + 1:
        raise ValueError(f"linear probe needs >= {d + 1} samples, got {n}")
    design = np.hstack([z, np.ones((n, 1))])
    gram = design.T @ design + ridge * np.eye(d + 1)
    try:
        coef = np.linalg.solve(gram, design.T @ y)
    except np.linalg.LinAlgError as exc:
        raise SingularError(f"probe normal equations are singular: {exc}") from None
    if not np.all(np.isfinite(coef)):
        raise SingularError("probe coefficients are not finite")
    return float(np.mean((design @ coef - y) ** 2))


def separation_ratio(embeddings, labels) -> float:
    """Mean inter-regime distance over mean intra-regime distance."""
    z = np.asarray(embeddings)
    labels = np.asarray(labels)
    dist = np.sqrt(((z[:, None, :] - z[None, :, :]) ** 2).sum(-1))
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(z), dtype=bool)
    return float(dist[~same].mean() / dist[same & off].mean())


def export_embeddings(model: TrainedModel, trajs: Sequence[Trajectory], path: str | Path) -> np.ndarray:
    """Write ``traj_id,f0,z_0..z_{d-1}`` for every trajectory; returns the embeddings."""
    z = model.embed(_windows(trajs, model.window_len))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["traj_id", "f0"] + [f"z_{i}" for i in range(z.shape[1])])
        for tr, row in zip(trajs, z):
            w.writerow([tr.traj_id, repr(tr.f0)] + [repr(float(v)) for v in row])
    return z


@dataclass
class EvalReport:
    method: str
    seed: int
    physics_residual: float
    data_mse: float
    param_count: int
    grad_norm_mean: float
    grad_norm_variance: float
    probe_mse: float | None
    n_c: int
    probe_ridge: float
    runtime_s: float | None = None
    embedding_separation: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def evaluate_run(run_dir: str | Path, dataset=None, n_c: int = DEFAULT_NC,
                 seed: int = EVAL_SEED, write: bool = True) -> EvalReport:
    """Evaluate a finished run directory; writes ``eval.json`` (and embeddings) beside it."""
    run_dir = Path(run_dir)
    info = json.loads((run_dir / "run.json").read_text())
    if dataset is None:
        dataset = load_dataset(info["config"]["data_dir"])
    model = load_trained(run_dir)
    test = dataset.test
    p = dataset.params
    residual = eval_physics_residual(model, test, n_c, p, seed, model.window_len)
    mse = eval_data_mse(model, test, model.window_len)
    logs = read_steplog(run_dir / "steplog.csv")
    g_mean, g_var = gradient_stats(logs, comparison_filter(model.method))
    probe = sep = None
    if model.has_encoder:
        path = run_dir / "embeddings_test.csv"
        if write:
            z = export_embeddings(model, test, path)
        else:
            z = model.embed(_windows(test, model.window_len))
        labels = [tr.f0 for tr in test]
        if len(test) > z.shape[1]:
            probe = linear_probe(z, labels)
        else:
            log.warning("%s: %d test embeddings is too few for a %d-dim probe; skipped",
                        run_dir, len(test), z.shape[1])
        sep = separation_ratio(z, labels)
    timing = run_dir / "timing.json"
    runtime = json.loads(timing.read_text())["train_seconds"] if timing.exists() else None
    report = EvalReport(model.method, int(info["seed"]), residual, mse,
                        nn.param_count(model.params), g_mean, g_var, probe, n_c, PROBE_RIDGE,
                        runtime, sep)
    if write:
        (run_dir / "eval.json").write_text(report.to_json())
    return report


def load_report(path: str | Path) -> EvalReport:
    return EvalReport(**json.loads(Path(path).read_text()))


def _median(values) -> float:
    values = [v for v in values if v is not None]
    return float(np.median(values)) if values else math.nan


def summarize(reports: Sequence[EvalReport]) -> dict[str, dict[str, float]]:
    """Per-method medians over seeds."""
    out: dict[str, dict[str, float]] = {}
    for method in METHODS:
        rs = [r for r in reports if r.method == method]
        if not rs:
            continue
        out[method] = {
            "n_seeds": len(rs),
            "physics_residual": _median(r.physics_residual for r in rs),
            "data_mse": _median(r.data_mse for r in rs),
            "param_count": rs[0].param_count,
            "grad_norm_mean": _median(r.grad_norm_mean for r in rs),
            "grad_norm_variance": _median(r.grad_norm_variance for r in rs),
            "probe_mse": _median(r.probe_mse for r in rs),
        }
    return out


def render_table(summary: dict[str, dict[str, float]]) -> str:
    """Plain-text comparison table (medians over seeds) plus ratio and probe lines."""
    lines = [f"{'Method':<22}{'Physics Res.':>14}{'Params':>10}{'Data MSE':>11}{'Seeds':>7}",
             "-" * 64]
    for method in TABLE_ORDER:
        if method not in summary:
            continue
        s = summary[method]
        lines.append(f"{TABLE_LABELS[method]:<22}{s['physics_residual']:>14.4f}"
                     f"{s['param_count']:>10,d}{s['data_mse']:>11.4f}{s['n_seeds']:>7d}")
    lines.append("")
    ao, mo = summary.get("tapinn_ao"), summary.get("multi_output")
    if ao and mo:
        lines.append(
            f"Gradient norm, Multi-Output / Ours (AO): mean x{mo['grad_norm_mean'] / ao['grad_norm_mean']:.2f}, "
            f"variance x{mo['grad_norm_variance'] / ao['grad_norm_variance']:.2f}"
        )
    if ao and not math.isnan(ao["probe_mse"]):
        lines.append(f"Linear-probe prognostics MSE (Ours (AO), test split): {ao['probe_mse']:.3e}")
    return "\n".join(lines) + "\n"


def write_aggregate_csv(reports: Sequence[EvalReport], path: str | Path) -> None:
    rows = sorted(reports, key=lambda r: (TABLE_ORDER.index(r.method), r.seed))
    fields = list(asdict(rows[0])) if rows else list(EvalReport.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else v) for k, v in asdict(r).items()})
