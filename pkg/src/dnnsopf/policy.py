"""Feed-forward dispatch policy with a box-preserving tanh output stage.

Topology: input -> hidden -> hidden -> linear -> ``mid + half * tanh``. The
trainable parameters live in one flat vector ordered
``[W1, b1, W2, b2, W3, b3]`` (row-major weights).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .acpf import Dispatch, LoadVector
from .caseio import VariableIndex

FULL, AGC = "full", "agc"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def hidden_width(d_in: int) -> int:
    return max(4, math.ceil(d_in / 2))


@dataclass(frozen=True)
class PolicyParams:
    dims: tuple[int, int, int, int]
    theta: np.ndarray = field(repr=False)
    frozen: np.ndarray = field(repr=False)  # bool, same shape as theta
    x_lower: np.ndarray = field(repr=False)
    x_upper: np.ndarray = field(repr=False)
    input_offset: np.ndarray = field(repr=False)
    input_scale: np.ndarray = field(repr=False)
    input_mask: np.ndarray = field(repr=False)
    n_gen: int
    mode: str = FULL
    seed: int = 0

    @property
    def mid(self) -> np.ndarray:
        return 0.5 * (self.x_upper + self.x_lower)

    @property
    def half(self) -> np.ndarray:
        return 0.5 * (self.x_upper - self.x_lower)

    @property
    def n_weights(self) -> int:
        return self.theta.size

    def layers(self, theta: np.ndarray | None = None):
        """Views ``[(W1, b1), (W2, b2), (W3, b3)]`` into ``theta``."""
        theta = self.theta if theta is None else theta
        out, pos = [], 0
        for d_in, d_out in zip(self.dims[:-1], self.dims[1:]):
            W = theta[pos : pos + d_in * d_out].reshape(d_out, d_in)
            pos += d_in * d_out
            b = theta[pos : pos + d_out]
            pos += d_out
            out.append((W, b))
        return out

    def with_theta(self, theta: np.ndarray) -> "PolicyParams":
        return replace(self, theta=theta)


def _n_params(dims) -> int:
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


def init_policy(index: VariableIndex, mode: str = FULL, seed: int = 0,
                input_offset=None, input_scale=None) -> PolicyParams:
    """Standard-normal weights, zero biases.

    In ``agc`` mode the network reads the scalar total active demand and the
    output rows driving voltage setpoints are zeroed and frozen.
    ``input_offset``/``input_scale`` fix an affine input normalisation;
    features with zero scale are masked out.
    """
    if mode not in (FULL, AGC):
        raise ValueError(f"unknown policy mode {mode!r}")
    d_in = index.dim_phi if mode == FULL else 1
    h = hidden_width(d_in)
    dims = (d_in, h, h, index.dim_x)
    rng = np.random.default_rng(seed)
    theta = np.zeros(_n_params(dims))
    frozen = np.zeros(theta.size, dtype=bool)
    pos = 0
    for k, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        theta[pos : pos + a * b] = rng.standard_normal(a * b)
        if k == 2 and mode == AGC:
            W_frozen = frozen[pos : pos + a * b].reshape(b, a)
            W_frozen[: index.n_gen, :] = True
        pos += a * b + b
    theta[frozen] = 0.0

    offset = np.zeros(d_in) if input_offset is None else np.asarray(input_offset, dtype=float)
    scale = np.ones(d_in) if input_scale is None else np.asarray(input_scale, dtype=float)
    mask = scale > 0
    scale = np.where(mask, scale, 1.0)
    return PolicyParams(
        dims=dims,
        theta=theta,
        frozen=frozen,
        x_lower=np.array(index.x_lower, dtype=float),
        x_upper=np.array(index.x_upper, dtype=float),
        input_offset=offset,
        input_scale=scale,
        input_mask=mask,
        n_gen=index.n_gen,
        mode=mode,
        seed=seed,
    )


def raw_features(mode: str, loads: LoadVector | np.ndarray) -> np.ndarray:
    """Policy input before normalisation: phi, or total active demand in agc mode."""
    phi = loads.as_array() if isinstance(loads, LoadVector) else np.asarray(loads, dtype=float)
    if mode == AGC:
        n = phi.shape[-1] // 2
        return phi[..., :n].sum(axis=-1, keepdims=True)
    return phi


def features(params: PolicyParams, loads) -> np.ndarray:
    s = (raw_features(params.mode, loads) - params.input_offset) / params.input_scale
    return np.where(params.input_mask, s, 0.0)


def _forward(params: PolicyParams, s: np.ndarray):
    (W1, b1), (W2, b2), (W3, b3) = params.layers()
    a1 = np.tanh(s @ W1.T + b1)
    a2 = np.tanh(a1 @ W2.T + b2)
    t = np.tanh(a2 @ W3.T + b3)
    return a1, a2, t


def forward_array(params: PolicyParams, loads) -> np.ndarray:
    """Dispatch vector(s) for one load vector or a batch of phi rows."""
    _, _, t = _forward(params, features(params, loads))
    # mid - half can round one ulp past the bound when tanh saturates
    return np.clip(params.mid + params.half * t, params.x_lower, params.x_upper)


def forward(params: PolicyParams, loads: LoadVector) -> Dispatch:
    x = forward_array(params, loads)
    return Dispatch(x[: params.n_gen], x[params.n_gen :])


def _backward(params: PolicyParams, s, a1, a2, t, seed: np.ndarray) -> np.ndarray:
    """Reverse pass for a batch of output cotangents ``seed`` (rows)."""
    (W1, _), (W2, _), (W3, _) = params.layers()
    gz = seed * (params.half * (1.0 - t**2))
    g2 = (gz @ W3) * (1.0 - a2**2)
    g1 = (g2 @ W2) * (1.0 - a1**2)
    k = seed.shape[0]
    grad = np.concatenate(
        [
            (g1[:, :, None] * s[None, None, :]).reshape(k, -1), g1,
            (g2[:, :, None] * a1[None, None, :]).reshape(k, -1), g2,
            (gz[:, :, None] * a2[None, None, :]).reshape(k, -1), gz,
        ],
        axis=1,
    )
    grad[:, params.frozen] = 0.0
    return grad


def policy_jacobian(params: PolicyParams, loads: LoadVector) -> np.ndarray:
    """d(dispatch)/d(theta), shape (dim x, n_weights)."""
    s = features(params, loads)
    a1, a2, t = _forward(params, s)
    return _backward(params, s, a1, a2, t, np.eye(params.dims[-1]))


def policy_vjp(params: PolicyParams, loads: LoadVector, cotangent: np.ndarray) -> np.ndarray:
    """``cotangent @ policy_jacobian`` without forming the Jacobian."""
    s = features(params, loads)
    a1, a2, t = _forward(params, s)
    return _backward(params, s, a1, a2, t, np.asarray(cotangent, dtype=float)[None, :])[0]


# --------------------------------------------------------------------------
# checkpoints

def to_checkpoint(params: PolicyParams, metadata: dict | None = None) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "mode": params.mode,
        "dims": list(params.dims),
        "n_gen": params.n_gen,
        "seed": params.seed,
        "x_lower": params.x_lower.tolist(),
        "x_upper": params.x_upper.tolist(),
        "input_offset": params.input_offset.tolist(),
        "input_scale": params.input_scale.tolist(),
        "input_mask": params.input_mask.astype(int).tolist(),
        "frozen": np.flatnonzero(params.frozen).tolist(),
        "theta": params.theta.tolist(),
        "metadata": metadata or {},
    }


def from_checkpoint(data: dict) -> PolicyParams:
    if data.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {data.get('version')!r}")
    dims = tuple(int(d) for d in data["dims"])
    theta = np.array(data["theta"], dtype=float)
    if theta.size != _n_params(dims):
        raise CheckpointError("weight vector does not match layer dimensions")
    frozen = np.zeros(theta.size, dtype=bool)
    frozen[np.array(data["frozen"], dtype=int)] = True
    return PolicyParams(
        dims=dims,
        theta=theta,
        frozen=frozen,
        x_lower=np.array(data["x_lower"], dtype=float),
        x_upper=np.array(data["x_upper"], dtype=float),
        input_offset=np.array(data["input_offset"], dtype=float),
        input_scale=np.array(data["input_scale"], dtype=float),
        input_mask=np.array(data["input_mask"], dtype=bool),
        n_gen=int(data["n_gen"]),
        mode=data["mode"],
        seed=int(data["seed"]),
    )


def save_checkpoint(params: PolicyParams, path, metadata: dict | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(to_checkpoint(params, metadata), fh)


def load_checkpoint(path) -> tuple[PolicyParams, dict]:
    with open(path) as fh:
        data = json.load(fh)
    return from_checkpoint(data), data.get("metadata", {})
