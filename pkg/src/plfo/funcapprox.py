"""Parameterized function classes with exact reverse-mode gradients.

Every function maps a batch of inputs to a batch of output vectors. Integer
inputs are cell indices (Tabular) or lookups into the feature map
(Linear/Mlp2); float inputs are raw feature rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

HEADS = ("clip", "sigmoid")
FEATURE_MAPS = ("onehot", "identity")


@dataclass(frozen=True)
class Tabular:
    dims: tuple[int, int]  # (n_cells, n_outputs)

    @property
    def n_params(self) -> int:
        return self.dims[0] * self.dims[1]

    @property
    def out_dim(self) -> int:
        return self.dims[1]


@dataclass(frozen=True)
class Linear:
    in_dim: int
    out_dim: int
    feature_map: str = "onehot"
    bias: bool = True

    @property
    def n_params(self) -> int:
        return self.in_dim * self.out_dim + (self.out_dim if self.bias else 0)


@dataclass(frozen=True)
class Mlp2:
    in_dim: int
    hidden: int
    out_dim: int
    feature_map: str = "onehot"

    @property
    def n_params(self) -> int:
        return self.in_dim * self.hidden + self.hidden + self.hidden * self.out_dim + self.out_dim


Arch = Tabular | Linear | Mlp2


def _arch_to_dict(arch: Arch) -> dict:
    if isinstance(arch, Tabular):
        return {"kind": "tabular", "dims": list(arch.dims)}
    if isinstance(arch, Linear):
        return {"kind": "linear", "in_dim": arch.in_dim, "out_dim": arch.out_dim,
                "feature_map": arch.feature_map, "bias": arch.bias}
    return {"kind": "mlp2", "in_dim": arch.in_dim, "hidden": arch.hidden, "out_dim": arch.out_dim,
            "feature_map": arch.feature_map}


def _arch_from_dict(doc: dict) -> Arch:
    doc = dict(doc)
    kind = doc.pop("kind")
    if kind == "tabular":
        return Tabular(tuple(doc["dims"]))
    if kind == "linear":
        return Linear(**doc)
    if kind == "mlp2":
        return Mlp2(**doc)
    raise ValueError(f"unknown arch kind {kind!r}")


@dataclass(eq=False)
class ParamFunction:
    arch: Arch
    params: np.ndarray
    bounds: tuple[float, float] | None = None
    head: str = "clip"

    def __post_init__(self) -> None:
        self.params = np.ascontiguousarray(self.params, dtype=float).reshape(-1)
        if self.params.size != self.arch.n_params:
            raise ValueError(f"{type(self.arch).__name__} needs {self.arch.n_params} params, "
                             f"got {self.params.size}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if self.head == "sigmoid" and self.bounds is None:
            raise ValueError("sigmoid head needs bounds")
        if self.bounds is not None:
            lo, hi = map(float, self.bounds)
            if not lo < hi:
                raise ValueError("bounds must satisfy lo < hi")
            self.bounds = (lo, hi)
        if not isinstance(self.arch, Tabular) and self.arch.feature_map not in FEATURE_MAPS:
            raise ValueError(f"feature map must be one of {FEATURE_MAPS}")

    # -- layout ---------------------------------------------------------------

    @property
    def out_dim(self) -> int:
        return self.arch.out_dim

    @property
    def table(self) -> np.ndarray:
        """Writable (n_cells, n_outputs) view of Tabular params."""
        if not isinstance(self.arch, Tabular):
            raise TypeError("only Tabular functions have a table")
        return self.params.reshape(self.arch.dims)

    def blocks(self) -> list[tuple[str, slice, tuple[int, ...]]]:
        """(name, slice, shape) for each parameter block; weights start with 'W'."""
        arch = self.arch
        if isinstance(arch, Tabular):
            return [("table", slice(0, arch.n_params), arch.dims)]
        if isinstance(arch, Linear):
            nw = arch.in_dim * arch.out_dim
            out = [("W", slice(0, nw), (arch.in_dim, arch.out_dim))]
            if arch.bias:
                out.append(("b", slice(nw, nw + arch.out_dim), (arch.out_dim,)))
            return out
        n1 = arch.in_dim * arch.hidden
        n2 = n1 + arch.hidden
        n3 = n2 + arch.hidden * arch.out_dim
        return [("W1", slice(0, n1), (arch.in_dim, arch.hidden)),
                ("b1", slice(n1, n2), (arch.hidden,)),
                ("W2", slice(n2, n3), (arch.hidden, arch.out_dim)),
                ("b2", slice(n3, n3 + arch.out_dim), (arch.out_dim,))]

    def _block(self, name: str, params: np.ndarray | None = None) -> np.ndarray:
        params = self.params if params is None else params
        for bname, sl, shape in self.blocks():
            if bname == name:
                return params[sl].reshape(shape)
        raise KeyError(name)

    def copy(self) -> ParamFunction:
        return ParamFunction(self.arch, self.params.copy(), self.bounds, self.head)

    # -- evaluation -----------------------------------------------------------

    def _features(self, x: np.ndarray) -> np.ndarray:
        if np.issubdtype(x.dtype, np.integer):
            if self.arch.feature_map != "onehot":
                raise ValueError("integer inputs need the one-hot feature map")
            if x.size and (x.min() < 0 or x.max() >= self.arch.in_dim):
                raise ValueError("input index out of range")
            return np.eye(self.arch.in_dim)[x]
        if x.ndim != 2 or x.shape[1] != self.arch.in_dim:
            raise ValueError(f"expected feature rows of width {self.arch.in_dim}, got {x.shape}")
        return x

    def _preact(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        arch = self.arch
        if isinstance(arch, Tabular):
            if not np.issubdtype(x.dtype, np.integer):
                raise ValueError("Tabular functions take integer cell indices")
            if x.size and (x.min() < 0 or x.max() >= arch.dims[0]):
                raise ValueError("cell index out of range")
            return self.table[x], ()
        feats = self._features(x)
        if isinstance(arch, Linear):
            z = feats @ self._block("W")
            if arch.bias:
                z = z + self._block("b")
            return z, (feats,)
        h = np.tanh(feats @ self._block("W1") + self._block("b1"))
        return h @ self._block("W2") + self._block("b2"), (feats, h)

    def _head(self, z: np.ndarray) -> np.ndarray:
        if self.bounds is None:
            return z
        lo, hi = self.bounds
        if self.head == "sigmoid":
            return lo + (hi - lo) / (1.0 + np.exp(-z))
        return np.clip(z, lo, hi)

    def _head_grad(self, z: np.ndarray) -> np.ndarray:
        if self.bounds is None:
            return np.ones_like(z)
        lo, hi = self.bounds
        if self.head == "sigmoid":
            sig = 1.0 / (1.0 + np.exp(-z))
            return (hi - lo) * sig * (1.0 - sig)
        return ((z >= lo) & (z <= hi)).astype(float)

    def forward(self, x) -> np.ndarray:
        """Outputs for a batch of inputs, shape (batch, out_dim)."""
        x = np.asarray(x)
        z, _ = self._preact(x)
        return self._head(z)

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)

    def backward(self, x, dout: np.ndarray) -> np.ndarray:
        """Vector-Jacobian product: gradient of sum(dout * forward(x)) w.r.t. params."""
        x = np.asarray(x)
        z, cache = self._preact(x)
        dz = np.asarray(dout, dtype=float) * self._head_grad(z)
        grad = np.zeros_like(self.params)
        arch = self.arch
        if isinstance(arch, Tabular):
            np.add.at(grad.reshape(arch.dims), x, dz)
            return grad
        if isinstance(arch, Linear):
            (feats,) = cache
            self._block("W", grad)[...] = feats.T @ dz
            if arch.bias:
                self._block("b", grad)[...] = dz.sum(axis=0)
            return grad
        feats, h = cache
        self._block("W2", grad)[...] = h.T @ dz
        self._block("b2", grad)[...] = dz.sum(axis=0)
        dpre = (dz @ self._block("W2").T) * (1.0 - h * h)
        self._block("W1", grad)[...] = feats.T @ dpre
        self._block("b1", grad)[...] = dpre.sum(axis=0)
        return grad

    # -- persistence ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {"arch": _arch_to_dict(self.arch), "params": self.params.tolist(),
                "bounds": None if self.bounds is None else list(self.bounds), "head": self.head}

    @classmethod
    def from_dict(cls, doc: dict) -> ParamFunction:
        bounds = doc.get("bounds")
        return cls(_arch_from_dict(doc["arch"]), np.asarray(doc["params"], dtype=float),
                   None if bounds is None else tuple(bounds), doc.get("head", "clip"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> ParamFunction:
        return cls.from_dict(json.loads(Path(path).read_text()))


def tabular(n_cells: int, n_outputs: int, init: float | np.ndarray = 0.0, *,
            bounds=None, head: str = "clip") -> ParamFunction:
    params = np.broadcast_to(np.asarray(init, dtype=float), (n_cells, n_outputs)).copy()
    return ParamFunction(Tabular((n_cells, n_outputs)), params, bounds, head)


def linear(in_dim: int, out_dim: int, *, feature_map: str = "onehot", bias: bool = True,
           init: np.ndarray | None = None, bounds=None, head: str = "clip") -> ParamFunction:
    arch = Linear(in_dim, out_dim, feature_map, bias)
    params = np.zeros(arch.n_params) if init is None else init
    return ParamFunction(arch, params, bounds, head)


def mlp2(in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator, *,
         feature_map: str = "onehot", scale: float = 1.0, bounds=None, head: str = "clip") -> ParamFunction:
    arch = Mlp2(in_dim, hidden, out_dim, feature_map)
    w1 = rng.normal(0.0, scale / np.sqrt(in_dim), (in_dim, hidden))
    b1 = rng.normal(0.0, 0.1 * scale, hidden)
    w2 = rng.normal(0.0, scale / np.sqrt(hidden), (hidden, out_dim))
    b2 = np.zeros(out_dim)
    params = np.concatenate([w1.ravel(), b1, w2.ravel(), b2])
    return ParamFunction(arch, params, bounds, head)


def eval_fn(fn: ParamFunction, x) -> np.ndarray:
    """Output for a single input (index or feature vector) or a batch of them."""
    arr = np.asarray(x)
    if arr.ndim == 0:
        return fn.forward(arr.reshape(1))[0]
    if arr.ndim == 1 and not np.issubdtype(arr.dtype, np.integer):
        return fn.forward(arr[None, :])[0]
    return fn.forward(arr)


LossOnOutputs = Callable[[np.ndarray], tuple[float, np.ndarray]]


def grad_params(fn: ParamFunction, x, loss: LossOnOutputs) -> tuple[float, np.ndarray]:
    """Value and exact parameter gradient of ``loss(fn(x))``.

    ``loss`` maps the output batch to (value, d value / d outputs).
    """
    value, dout = loss(fn.forward(x))
    return float(value), fn.backward(x, dout)


# --- optimisation ---------------------------------------------------------------


@dataclass(eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_fn(cls, fn: ParamFunction, lr: float, **kwargs) -> AdamState:
        return cls(np.zeros_like(fn.params), np.zeros_like(fn.params), lr, **kwargs)

    def copy(self) -> AdamState:
        return AdamState(self.m.copy(), self.v.copy(), self.lr, self.step, self.beta1, self.beta2, self.eps)


def adam_step(state: AdamState, fn: ParamFunction, grad: np.ndarray,
              lr: float | None = None) -> tuple[AdamState, ParamFunction]:
    """Bias-corrected Adam update, applied in place."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != fn.params.shape or state.m.shape != fn.params.shape:
        raise ValueError("gradient, moments and params must share a shape")
    lr = state.lr if lr is None else lr
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    fn.params -= lr * (state.m / c1) / (np.sqrt(state.v / c2) + state.eps)
    return state, fn


def l2_project_weights(fn: ParamFunction, radius: float) -> ParamFunction:
    """Rescale each weight block (biases excluded) into the ball of ``radius``."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    out = fn.copy()
    if isinstance(fn.arch, Tabular):
        return out
    for name, sl, _ in out.blocks():
        if not name.startswith("W"):
            continue
        norm = np.linalg.norm(out.params[sl])
        if norm > radius:
            out.params[sl] *= radius / norm
    return out


def default_projection_radius(v_max: float, fn: ParamFunction) -> float:
    return 100.0 * v_max / np.sqrt(fn.params.size)


def box_project(fn: ParamFunction) -> ParamFunction:
    """Clip Tabular clip-head params into the output bounds, in place."""
    if isinstance(fn.arch, Tabular) and fn.bounds is not None and fn.head == "clip":
        np.clip(fn.params, fn.bounds[0], fn.bounds[1], out=fn.params)
    return fn


@dataclass(eq=False)
class TargetPair:
    live: ParamFunction
    target: ParamFunction
    tau: float = 0.005

    def __post_init__(self) -> None:
        if self.live.arch != self.target.arch:
            raise ValueError("live and target functions must share an architecture")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")

    @classmethod
    def of(cls, live: ParamFunction, tau: float = 0.005) -> TargetPair:
        return cls(live, live.copy(), tau)

    def sync(self) -> None:
        self.target.params[:] = self.live.params


def polyak_update(pair: TargetPair) -> TargetPair:
    """target <- (1 - tau) * target + tau * live, in place."""
    if pair.live.arch != pair.target.arch:
        raise ValueError("live and target functions must share an architecture")
    pair.target.params *= 1.0 - pair.tau
    pair.target.params += pair.tau * pair.live.params
    return pair
