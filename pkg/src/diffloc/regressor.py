"""Reference scene coordinate regressor: a ReLU MLP with hand-written backward and Adam.

Checkpoint container
--------------------
A zip archive (stored, fixed timestamps, so identical state gives identical
bytes) holding ``meta.json`` and one ``.npy`` member per array::

    meta.json   {"format": "diffloc-checkpoint", "version": 1, "sizes": [...],
                 "step": int, "extra": {...}, "adam": {...} | null}
    W0.npy, b0.npy, ...              parameters, layer order
    mW0.npy, vW0.npy, mb0.npy, ...   Adam moments when present
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "diffloc-checkpoint"
CHECKPOINT_VERSION = 1

PRESETS = {
    "default": (128, 128, 128),
    "tiny": (32, 32, 32),
}


class StaleCacheError(RuntimeError):
    """The forward cache was produced by different parameter values."""


class CheckpointError(ValueError):
    pass


@dataclass
class RegressorParams:
    weights: list
    biases: list
    version: int = 0

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def arrays(self):
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            yield f"W{k}", W
            yield f"b{k}", b

    def copy(self) -> RegressorParams:
        return RegressorParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.version)


def layer_sizes(in_dim: int, preset: str = "default", out_dim: int = 3) -> list[int]:
    return [in_dim, *PRESETS[preset], out_dim]


def init_params(sizes, seed: int, output_bias=None) -> RegressorParams:
    """Glorot-uniform weights, zero biases (optionally an output offset)."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    if output_bias is not None:
        biases[-1] = np.asarray(output_bias, dtype=float).copy()
    return RegressorParams(weights, biases)


@dataclass
class Cache:
    inputs: list
    pre: list
    token: tuple = field(default=())


def forward(params: RegressorParams, features):
    """Predict one 3-vector per row of ``features``; returns ``(Y, cache)``."""
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[1]:
        raise ValueError(f"features must have shape (n, {params.weights[0].shape[1]}), got {x.shape}")
    inputs, pre = [], []
    last = len(params.weights) - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(x)
        z = x @ W.T + b
        pre.append(z)
        x = z if k == last else np.maximum(z, 0.0)
    return x, Cache(inputs, pre, (id(params), params.version))


def backward(params: RegressorParams, cache: Cache, grad_out):
    """Reverse-mode gradients ``(dW list, db list, d features)``."""
    if cache.token != (id(params), params.version):
        raise StaleCacheError("cache does not belong to these parameter values")
    g = np.asarray(grad_out, dtype=float)
    last = len(params.weights) - 1
    dWs, dbs = [None] * len(params.weights), [None] * len(params.weights)
    for k in range(last, -1, -1):
        if k != last:
            g = g * (cache.pre[k] > 0)
        dWs[k] = g.T @ cache.inputs[k]
        dbs[k] = g.sum(axis=0)
        g = g @ params.weights[k]
    return dWs, dbs, g


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: RegressorParams, lr: float = 1e-4, **kw) -> AdamState:
        zeros = [np.zeros_like(a) for _, a in params.arrays()]
        return cls(lr=lr, m=[z.copy() for z in zeros], v=[z.copy() for z in zeros], **kw)


def adam_step(params: RegressorParams, grads, state: AdamState) -> None:
    """In-place Adam update with bias correction. ``grads = (dW list, db list)``."""
    dWs, dbs = grads[0], grads[1]
    flat_grads = [g for pair in zip(dWs, dbs) for g in pair]
    flat_params = [a for _, a in params.arrays()]
    if len(flat_grads) != len(flat_params) or any(g.shape != p.shape for g, p in zip(flat_grads, flat_params)):
        raise ValueError("gradient shapes do not match parameters")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(flat_params, flat_grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.version += 1


# -- checkpoints -------------------------------------------------------------


def _npy_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes):
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.external_attr = 0o644 << 16
    zf.writestr(info, data, compress_type=zipfile.ZIP_STORED)


def save_checkpoint(path, params: RegressorParams, state: AdamState | None = None, step: int = 0, extra: dict | None = None):
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "sizes": params.sizes,
        "step": int(step),
        "extra": extra or {},
        "adam": None
        if state is None
        else {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps, "step": state.step},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _write_member(zf, "meta.json", json.dumps(meta, sort_keys=True).encode())
        for name, a in params.arrays():
            _write_member(zf, f"{name}.npy", _npy_bytes(a))
        if state is not None:
            for (name, _), m, v in zip(params.arrays(), state.m, state.v):
                _write_member(zf, f"m{name}.npy", _npy_bytes(m))
                _write_member(zf, f"v{name}.npy", _npy_bytes(v))


def load_checkpoint(path):
    """Returns ``(params, adam_state_or_None, step, extra)``."""
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        with zf:
            return _read_checkpoint(zf)
    except CheckpointError:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc


def _read_checkpoint(zf: zipfile.ZipFile):
    meta = json.loads(zf.read("meta.json"))
    if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint {meta.get('format')!r} v{meta.get('version')!r}")

    def arr(name):
        return np.lib.format.read_array(io.BytesIO(zf.read(f"{name}.npy")), allow_pickle=False)

    n_layers = len(meta["sizes"]) - 1
    params = RegressorParams([arr(f"W{k}") for k in range(n_layers)], [arr(f"b{k}") for k in range(n_layers)])
    if params.sizes != meta["sizes"]:
        raise CheckpointError("checkpoint arrays do not match the recorded sizes")
    state = None
    if meta["adam"] is not None:
        a = meta["adam"]
        names = [name for name, _ in params.arrays()]
        state = AdamState(
            lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"],
            m=[arr(f"m{n}") for n in names], v=[arr(f"v{n}") for n in names],
        )
    return params, state, meta["step"], meta["extra"]
