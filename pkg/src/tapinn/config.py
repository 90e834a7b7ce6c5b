"""Flat ``section.key = value`` experiment configuration.

Lines starting with ``#`` are comments.  Unknown keys are rejected.  Any key
can be overridden from the environment as ``TAPINN_<SECTION>_<KEY>`` in upper
case, e.g. ``TAPINN_TRAIN_EPOCHS=3``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

from .duffing import DatasetConfig, DuffingParams
from .errors import ConfigError
from .training import TrainConfig

ENV_PREFIX = "TAPINN_"


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


# key -> (default, parser)
SCHEMA: dict[str, tuple[object, Callable[[str], object]]] = {
    "dataset.delta": (0.3, float),
    "dataset.alpha": (-1.0, float),
    "dataset.beta": (1.0, float),
    "dataset.omega": (1.4, float),
    "dataset.regimes": ((0.3, 0.5, 0.8), _floats),
    "dataset.per_regime": (500, int),
    "dataset.n_samples": (1000, int),
    "dataset.dt": (0.01, float),
    "dataset.x0_low": (-1.0, float),
    "dataset.x0_high": (1.0, float),
    "dataset.v0_low": (-0.5, float),
    "dataset.v0_high": (0.5, float),
    "dataset.train_fraction": (0.8, float),
    "dataset.oracle_warmup_periods": (100, int),
    "dataset.oracle_periods": (40, int),
    "train.data_dir": ("data", str),
    "train.epochs": (30, int),
    "train.lr": (1e-3, float),
    "train.alpha": (1.0, float),
    "train.beta": (0.1, float),
    "train.margin": (0.2, float),
    "train.k_joint": (5, int),
    "train.phase1_epochs": (5, int),
    "train.phase2_epochs": (20, int),
    "train.batch_size": (32, int),
    "train.window_len": (100, int),
    "train.n_collocation": (128, int),
    "train.n_data_points": (200, int),
    "train.divergence_threshold": (1e6, float),
    "train.log_wall_time": (False, _bool),
    "model.lstm_hidden": (24, int),
    "model.latent_dim": (24, int),
    "model.gen_hidden": ([57, 57], _ints),
    "model.parametric_hidden": ([64, 64, 64], _ints),
    "model.hyper_hidden": ([32, 32], _ints),
    "model.target_hidden": ([32, 32], _ints),
    "eval.n_c": (10_000, int),
    "eval.seed": (20240607, int),
}


def env_name(key: str) -> str:
    return ENV_PREFIX + key.upper().replace(".", "_")


def parse_text(text: str, source: str = "<config>") -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = SCHEMA[key][1](val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return values


def load(path: str | Path | None = None, env: Mapping[str, str] | None = None) -> "ExperimentConfig":
    """Defaults, then the file at ``path``, then environment overrides."""
    values = {k: v[0] for k, v in SCHEMA.items()}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values.update(parse_text(text, str(path)))
    env = os.environ if env is None else env
    for key, (_, parser) in SCHEMA.items():
        name = env_name(key)
        if name in env:
            try:
                values[key] = parser(env[name])
            except ValueError as exc:
                raise ConfigError(f"${name}: {exc}") from None
    unknown = [k for k in env if k.startswith(ENV_PREFIX) and k not in {env_name(s) for s in SCHEMA}]
    if unknown:
        raise ConfigError(f"unknown config override(s): {', '.join(sorted(unknown))}")
    return ExperimentConfig(values)


def dump_defaults() -> str:
    lines = ["# tapinn experiment defaults"]
    section = None
    for key, (default, _) in SCHEMA.items():
        head = key.split(".", 1)[0]
        if head != section:
            lines.append("")
            section = head
        lines.append(f"{key} = {_fmt(default)}")
    return "\n".join(lines) + "\n"


@dataclass
class ExperimentConfig:
    values: dict[str, object]

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def duffing(self) -> DuffingParams:
        v = self.values
        return DuffingParams(v["dataset.delta"], v["dataset.alpha"], v["dataset.beta"],
                             v["dataset.omega"])

    def dataset(self) -> DatasetConfig:
        v = self.values
        return DatasetConfig(
            regimes=tuple(v["dataset.regimes"]),
            per_regime=v["dataset.per_regime"],
            n_samples=v["dataset.n_samples"],
            dt=v["dataset.dt"],
            x0_range=(v["dataset.x0_low"], v["dataset.x0_high"]),
            v0_range=(v["dataset.v0_low"], v["dataset.v0_high"]),
            train_fraction=v["dataset.train_fraction"],
            params=self.duffing,
        )

    def dims(self, kind: str) -> dict:
        v = self.values
        if kind in ("tapinn", "multi_output"):
            return {"obs_dim": 2, "lstm_hidden": v["model.lstm_hidden"],
                    "latent_dim": v["model.latent_dim"], "gen_hidden": list(v["model.gen_hidden"]),
                    "n_out": 1 if kind == "tapinn" else 2}
        if kind == "parametric":
            return {"hidden": list(v["model.parametric_hidden"])}
        return {"hyper_hidden": list(v["model.hyper_hidden"]),
                "target_hidden": list(v["model.target_hidden"])}

    def train(self, method: str, seed: int, data_dir: str | None = None) -> TrainConfig:
        v = self.values
        kind = TrainConfig(method=method).kind
        return TrainConfig(
            method=method,
            epochs=v["train.epochs"],
            lr=v["train.lr"],
            alpha=v["train.alpha"],
            beta=v["train.beta"],
            margin=v["train.margin"],
            k_joint=v["train.k_joint"],
            phase1_epochs=v["train.phase1_epochs"],
            phase2_epochs=v["train.phase2_epochs"],
            batch_size=v["train.batch_size"],
            seed=seed,
            data_dir=str(data_dir if data_dir is not None else v["train.data_dir"]),
            window_len=v["train.window_len"],
            n_collocation=v["train.n_collocation"],
            n_data_points=v["train.n_data_points"],
            divergence_threshold=v["train.divergence_threshold"],
            log_wall_time=v["train.log_wall_time"],
            dims=self.dims(kind),
        )
