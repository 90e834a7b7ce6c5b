"""Model zoo: LSTM encoder, time-conditioned MLP generator, baselines.

Models are plain functions of a parameter mapping ``{name: array}``.  The
mapping may hold numpy arrays (evaluation) or tape variables (training), and
the time input may be a :class:`~tapinn.autodiff.DualScalar` so the same code
yields d/dt and d2/dt2.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import DualScalar
from .errors import ShapeMismatchError

MODEL_KINDS = ("tapinn", "multi_output", "parametric", "hyperpinn")

DEFAULT_DIMS: dict[str, dict] = {
    "tapinn": {"obs_dim": 2, "lstm_hidden": 24, "latent_dim": 24,
               "gen_hidden": [57, 57], "n_out": 1},
    "multi_output": {"obs_dim": 2, "lstm_hidden": 24, "latent_dim": 24,
                     "gen_hidden": [57, 57], "n_out": 2},
    "parametric": {"hidden": [64, 64, 64]},
    "hyperpinn": {"hyper_hidden": [32, 32], "target_hidden": [32, 32]},
}

# Parameter counts reported in the reference comparison table.
REFERENCE_COUNTS = {"parametric": 8577, "multi_output": 8069, "hyperpinn": 39169, "tapinn": 8003}


@dataclass
class ModelParams:
    kind: str
    arrays: dict[str, np.ndarray]
    dims: dict = field(default_factory=dict)
    seed: int | None = None

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def names(self, prefix: str = "") -> list[str]:
        return [k for k in self.arrays if k.startswith(prefix)]

    def select(self, prefix: str) -> "ModelParams":
        return ModelParams(self.kind, {k: v for k, v in self.arrays.items()
                                       if k.startswith(prefix)}, self.dims, self.seed)

    def copy(self) -> "ModelParams":
        return ModelParams(self.kind, {k: v.copy() for k, v in self.arrays.items()},
                           dict(self.dims), self.seed)

    def replace(self, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        return ModelParams(self.kind, dict(arrays), self.dims, self.seed)


def param_count(params: ModelParams | Mapping[str, np.ndarray]) -> int:
    arrays = params.arrays if isinstance(params, ModelParams) else params
    return int(sum(np.asarray(a).size for a in arrays.values()))


# -- construction -----------------------------------------------------------

def _mlp_shapes(prefix: str, widths: list[int]) -> list[tuple[str, tuple]]:
    shapes = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        name = "out" if i == len(widths) - 2 else f"l{i}"
        shapes.append((f"{prefix}{name}.weight", (a, b)))
        shapes.append((f"{prefix}{name}.bias", (b,)))
    return shapes


def hypernet_target_size(target_hidden: list[int]) -> int:
    widths = [1, *target_hidden, 1]
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def param_shapes(kind: str, dims: Mapping) -> list[tuple[str, tuple]]:
    """Ordered ``(name, shape)`` list; this order is the canonical one."""
    if kind in ("tapinn", "multi_output"):
        h, dz = dims["lstm_hidden"], dims["latent_dim"]
        return [
            ("encoder.lstm.w_in", (dims["obs_dim"], 4 * h)),
            ("encoder.lstm.w_rec", (h, 4 * h)),
            ("encoder.lstm.bias", (4 * h,)),
            ("encoder.proj.weight", (h, dz)),
            ("encoder.proj.bias", (dz,)),
            *_mlp_shapes("generator.", [1 + dz, *dims["gen_hidden"], dims["n_out"]]),
        ]
    if kind == "parametric":
        return _mlp_shapes("parametric.", [2, *dims["hidden"], 1])
    if kind == "hyperpinn":
        out = hypernet_target_size(dims["target_hidden"])
        return _mlp_shapes("hypernet.", [1, *dims["hyper_hidden"], out])
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def init_params(kind: str, seed: int, dims: Mapping | None = None) -> ModelParams:
    """Glorot-uniform weights, zero biases, LSTM forget-gate bias 1."""
    dims = dict(DEFAULT_DIMS[kind] if dims is None else dims)
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(kind, dims):
        if len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    if "encoder.lstm.bias" in arrays:
        h = dims["lstm_hidden"]
        arrays["encoder.lstm.bias"][h:2 * h] = 1.0  # gate order i, f, g, o
    return ModelParams(kind, arrays, dims, seed)


# -- forward passes ---------------------------------------------------------

def _check_last(x, n: int, what: str) -> None:
    shape = ad.value_of(x).shape if not isinstance(x, DualScalar) else x.shape
    if not shape or shape[-1] != n:
        raise ShapeMismatchError(f"{what}: expected trailing dim {n}, got shape {shape}")


def lstm_cell(x, h_prev, c_prev, w_in, w_rec, bias):
    """One LSTM step with gates ordered (input, forget, cell, output)."""
    n = ad.value_of(w_rec).shape[0]
    _check_last(h_prev, n, "h_prev")
    _check_last(c_prev, n, "c_prev")
    _check_last(x, ad.value_of(w_in).shape[0], "input")
    gates = ad.matmul(x, w_in) + ad.matmul(h_prev, w_rec) + bias
    i = ad.sigmoid(gates[..., :n])
    f = ad.sigmoid(gates[..., n:2 * n])
    g = ad.tanh(gates[..., 2 * n:3 * n])
    o = ad.sigmoid(gates[..., 3 * n:])
    c = f * c_prev + i * g
    h = o * ad.tanh(c)
    return h, c


def encoder_forward(window, params: Mapping, prefix: str = "encoder."):
    """Latent vector(s) from observation window(s) of shape ``(..., L, obs_dim)``."""
    window = np.asarray(window, dtype=np.float64)
    w_in = params[prefix + "lstm.w_in"]
    w_rec = params[prefix + "lstm.w_rec"]
    bias = params[prefix + "lstm.bias"]
    if window.ndim < 2 or window.shape[-1] != ad.value_of(w_in).shape[0]:
        raise ShapeMismatchError(f"window shape {window.shape} does not match encoder input")
    n = ad.value_of(w_rec).shape[0]
    h = np.zeros(window.shape[:-2] + (n,))
    c = np.zeros_like(h)
    for step in range(window.shape[-2]):
        h, c = lstm_cell(window[..., step, :], h, c, w_in, w_rec, bias)
    return ad.linear(h, params[prefix + "proj.weight"], params[prefix + "proj.bias"])


def _time_mlp(t, cond, params: Mapping, prefix: str, time_scale: float):
    """MLP on ``[t / time_scale, cond]``.

    ``cond`` has shape ``(B, k)`` and ``t`` shape ``(B, P)``, giving ``(B, P, n_out)``.
    The first layer is applied as ``tau * W[0] + cond @ W[1:]``, which equals
    the concatenated input times ``W`` without tiling ``cond`` over points.
    """
    layers = sorted({k[len(prefix):].split(".")[0] for k in params if k.startswith(prefix)},
                    key=lambda s: (s == "out", s))
    w0 = params[f"{prefix}{layers[0]}.weight"]
    _check_last(cond, ad.value_of(w0).shape[0] - 1, "conditioning")
    tau = t / time_scale
    tau = tau.reshape(tau.shape + (1,))
    first = ad.linear(cond, w0[1:], params[f"{prefix}{layers[0]}.bias"])
    first = ad.reshape(first, ad.value_of(first).shape[:-1] + (1, -1))
    h = tau * w0[0] + first
    for name in layers[1:]:
        h = ad.linear(ad.tanh(h), params[f"{prefix}{name}.weight"], params[f"{prefix}{name}.bias"])
    return h


def _batch_time(t, batch: int):
    """Coerce ``t`` to shape ``(batch, P)``; returns the coerced t and a restore hint."""
    if isinstance(t, (DualScalar, ad.Var)):
        shape = t.shape
    else:
        t = np.asarray(t, dtype=np.float64)
        shape = t.shape
    if len(shape) == 2:
        return t, None
    if len(shape) == 0:
        return t.reshape(1, 1), shape
    if len(shape) == 1:
        return t.reshape(1, shape[0]), shape
    raise ShapeMismatchError(f"time input must be scalar, (P,) or (B, P); got {shape}")


def _shape_of(x) -> tuple:
    return x.shape if isinstance(x, DualScalar) else np.shape(ad.value_of(x))


def _restore(out, shape):
    if shape is None:
        return out
    if isinstance(out, DualScalar):
        return out.reshape(shape)
    return ad.reshape(out, shape)


def generator_forward(t, z, params: Mapping, time_scale: float = 10.0,
                      prefix: str = "generator.", component: int | None = 0):
    """Predicted displacement ``G(t, z)``.

    ``z`` is ``(d_z,)`` with ``t`` scalar or ``(P,)``, or ``(B, d_z)`` with ``t``
    of shape ``(B, P)``.  ``component=None`` returns every output head with a
    trailing axis.
    """
    single = np.ndim(ad.value_of(z)) == 1
    shape = None
    if single:
        z = ad.reshape(z, (1, -1))
        t, shape = _batch_time(t, 1)
    out = _time_mlp(t, z, params, prefix, time_scale)
    if component is not None:
        out = out[..., component]
    elif shape is not None:
        shape = tuple(shape) + (_shape_of(out)[-1],)
    return _restore(out, shape)


def parametric_forward(t, lam, params: Mapping, time_scale: float = 10.0):
    """Baseline MLP on ``[t / T, lambda]``; ``lam`` scalar or ``(B,)``."""
    lam = np.asarray(lam, dtype=np.float64)
    return generator_forward(t, lam[..., None], params, time_scale, prefix="parametric.")


def hypernet_forward(lam, params: Mapping, prefix: str = "hypernet."):
    """Flattened target-network weights predicted from ``lam``; ``(..., W)``."""
    lam = np.asarray(lam, dtype=np.float64)[..., None]
    layers = sorted({k[len(prefix):].split(".")[0] for k in params if k.startswith(prefix)},
                    key=lambda s: (s == "out", s))
    h = lam
    for i, name in enumerate(layers):
        if i:
            h = ad.tanh(h)
        h = ad.linear(h, params[f"{prefix}{name}.weight"], params[f"{prefix}{name}.bias"])
    return h


def target_forward(t, weights, target_hidden: list[int], time_scale: float = 10.0):
    """Evaluate the hypernet-generated solver ``t -> x`` with per-item weights.

    ``weights`` is ``(B, W)`` and ``t`` is ``(B, P)``; returns ``(B, P)``.
    """
    single = np.ndim(ad.value_of(weights)) == 1
    if single:
        weights = ad.reshape(weights, (1, -1))
        t, shape = _batch_time(t, 1)
    else:
        shape = None
    widths = [1, *target_hidden, 1]
    total = hypernet_target_size(target_hidden)
    batch, size = ad.value_of(weights).shape
    if size != total:
        raise ShapeMismatchError(f"target weights: expected {total}, got {size}")
    tau = t / time_scale
    h = tau.reshape(tau.shape + (1,))
    offset = 0
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        if i:
            h = ad.tanh(h)
        w = ad.reshape(weights[:, offset:offset + a * b], (batch, a, b))
        offset += a * b
        bias = ad.reshape(weights[:, offset:offset + b], (batch, 1, b))
        offset += b
        h = (h * w) + bias if a == 1 else ad.linear(h, w, bias)
    return _restore(h[..., 0], shape)


def multi_output_forward(window, t, params: Mapping, time_scale: float = 10.0):
    """``(x_hat, x_dot_head)`` from encoder + two-headed generator."""
    z = encoder_forward(window, params)
    out = generator_forward(t, z, params, time_scale, component=None)
    return out[..., 0], out[..., 1]


# -- checkpoints ------------------------------------------------------------

def _sibling(stem: Path, ext: str) -> Path:
    # tags contain dots ("encoder.final"), so append rather than with_suffix
    return stem.parent / (stem.name + ext)


def save_checkpoint(params: ModelParams, stem: str | Path, names: list[str] | None = None) -> None:
    """JSON manifest ``stem.json`` plus little-endian f64 blob ``stem.bin``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    names = list(params.arrays) if names is None else names
    manifest = {
        "kind": params.kind,
        "dims": params.dims,
        "seed": params.seed,
        "param_count": int(sum(params.arrays[k].size for k in names)),
        "arrays": [{"name": k, "shape": list(params.arrays[k].shape)} for k in names],
    }
    blob = b"".join(np.ascontiguousarray(params.arrays[k], dtype="<f8").tobytes() for k in names)
    _sibling(stem, ".bin").write_bytes(blob)
    _sibling(stem, ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(stem: str | Path) -> ModelParams:
    stem = Path(stem)
    manifest = json.loads(_sibling(stem, ".json").read_text())
    flat = np.frombuffer(_sibling(stem, ".bin").read_bytes(), dtype="<f8")
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["arrays"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arrays[entry["name"]] = flat[offset:offset + n].astype(np.float64).reshape(entry["shape"])
        offset += n
    if offset != flat.size:
        raise ShapeMismatchError(f"{stem}: blob has {flat.size} values, manifest {offset}")
    return ModelParams(manifest["kind"], arrays, manifest["dims"], manifest["seed"])
