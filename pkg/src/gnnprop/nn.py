"""Piecewise-linear feed-forward networks: evaluation, tracing, linear regions."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np


@dataclass(frozen=True, eq=False)
class Affine:
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        A = np.array(self.A, dtype=float, ndmin=2)
        b = np.array(self.b, dtype=float).reshape(-1)
        if A.shape[0] != b.shape[0]:
            raise ValueError(f"Affine: A has {A.shape[0]} rows but b has {b.shape[0]}")
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def n_in(self) -> int:
        return self.A.shape[1]

    @property
    def n_out(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class Relu:
    width: int

    @property
    def n_in(self) -> int:
        return self.width

    @property
    def n_out(self) -> int:
        return self.width


@dataclass(frozen=True)
class MaxPool:
    """Max over index partitions; uncovered inputs are appended in order."""

    width: int
    partitions: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        parts = tuple(tuple(int(i) for i in p) for p in self.partitions)
        seen: set[int] = set()
        for p in parts:
            if not p:
                raise ValueError("MaxPool: empty partition")
            for i in p:
                if not 0 <= i < self.width or i in seen:
                    raise ValueError(f"MaxPool: bad or repeated index {i}")
                seen.add(i)
        object.__setattr__(self, "partitions", parts)
        object.__setattr__(self, "_rest", tuple(i for i in range(self.width) if i not in seen))

    @property
    def passthrough(self) -> tuple[int, ...]:
        return self._rest  # type: ignore[attr-defined]

    @property
    def n_in(self) -> int:
        return self.width

    @property
    def n_out(self) -> int:
        return len(self.partitions) + len(self.passthrough)


Layer = Union[Affine, Relu, MaxPool]


@dataclass(frozen=True)
class Fnn:
    layers: tuple[Layer, ...]

    def __post_init__(self) -> None:
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("Fnn needs at least one layer")
        for k in range(1, len(layers)):
            if layers[k].n_in != layers[k - 1].n_out:
                raise ValueError(
                    f"layer {k} expects width {layers[k].n_in}, previous gives {layers[k - 1].n_out}"
                )
        object.__setattr__(self, "layers", layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].n_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].n_out

    @property
    def nonlinear(self) -> list[int]:
        return [k for k, l in enumerate(self.layers) if not isinstance(l, Affine)]


@dataclass(frozen=True, eq=False)
class ActivationTrace:
    """One entry per nonlinear layer: bool bits (Relu) or winner indices (MaxPool).

    Winner indices are positions inside the partition, not input indices.
    """

    parts: tuple[np.ndarray, ...]

    def key(self) -> bytes:
        return b"|".join(p.astype(np.int64).tobytes() for p in self.parts)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ActivationTrace) and self.key() == other.key()

    def __hash__(self) -> int:
        return hash(self.key())


def _check_input(f: Fnn, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != f.input_dim:
        raise ValueError(f"input has width {x.shape[-1]}, network expects {f.input_dim}")
    return x


def _pool(layer: MaxPool, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # h is (batch, width)
    outs, wins = [], []
    for p in layer.partitions:
        block = h[:, list(p)]
        w = np.argmax(block, axis=1)  # first maximum wins ties
        wins.append(w)
        outs.append(block[np.arange(len(h)), w])
    pooled = np.stack(outs, axis=1) if outs else np.zeros((len(h), 0))
    rest = h[:, list(layer.passthrough)]
    return np.concatenate([pooled, rest], axis=1), np.stack(wins, axis=1) if wins else np.zeros((len(h), 0), int)


def eval_batch(f: Fnn, X: np.ndarray, traced: bool = False):
    """Evaluate rows of X; optionally return per-layer decision arrays."""
    h = np.atleast_2d(_check_input(f, X))
    decisions = []
    for layer in f.layers:
        if isinstance(layer, Affine):
            h = h @ layer.A.T + layer.b
        elif isinstance(layer, Relu):
            on = h > 0
            if traced:
                decisions.append(on)
            h = np.where(on, h, 0.0)
        else:
            h, w = _pool(layer, h)
            if traced:
                decisions.append(w)
    return (h, decisions) if traced else h


def fnn_eval(f: Fnn, x: np.ndarray) -> np.ndarray:
    x = _check_input(f, x)
    y = eval_batch(f, x.reshape(-1, f.input_dim))
    return y.reshape(x.shape[:-1] + (f.output_dim,))


def fnn_eval_traced(f: Fnn, x: np.ndarray) -> tuple[np.ndarray, ActivationTrace]:
    x = _check_input(f, x)
    if x.ndim != 1:
        raise ValueError("fnn_eval_traced takes a single input vector")
    y, dec = eval_batch(f, x[None, :], traced=True)
    return y[0], ActivationTrace(tuple(d[0].copy() for d in dec))


def traces_from_batch(decisions: list[np.ndarray], n: int) -> list[ActivationTrace]:
    return [ActivationTrace(tuple(d[k].copy() for d in decisions)) for k in range(n)]


@dataclass(frozen=True, eq=False)
class LinearRegion:
    """Polytope {x : C x <= d (strict where flagged)} with output W x + v on it."""

    C: np.ndarray
    d: np.ndarray
    strict: np.ndarray
    origin: tuple[tuple[int, int], ...]
    W: np.ndarray
    v: np.ndarray

    def __len__(self) -> int:
        return len(self.d)

    def contains(self, x: np.ndarray, margin: float = 0.0) -> bool:
        """Membership; strict rows need slack > margin, others slack >= -margin."""
        s = self.d - self.C @ x
        return bool(np.all(np.where(self.strict, s > margin, s >= -margin)))

    def output(self, x: np.ndarray) -> np.ndarray:
        return self.W @ x + self.v


def region_of(f: Fnn, t: ActivationTrace) -> LinearRegion:
    """Constraints and affine map of the activation pattern `t`."""
    if len(t.parts) != len(f.nonlinear):
        raise ValueError("trace does not match network")
    W = np.eye(f.input_dim)
    v = np.zeros(f.input_dim)
    rows: list[np.ndarray] = []
    rhs: list[float] = []
    strict: list[bool] = []
    origin: list[tuple[int, int]] = []
    k = 0
    for li, layer in enumerate(f.layers):
        if isinstance(layer, Affine):
            W, v = layer.A @ W, layer.A @ v + layer.b
            continue
        dec = np.asarray(t.parts[k])
        k += 1
        if isinstance(layer, Relu):
            if dec.shape != (layer.width,):
                raise ValueError(f"trace part for layer {li} has wrong shape")
            for u in range(layer.width):
                if dec[u]:
                    rows.append(-W[u]); rhs.append(float(v[u])); strict.append(True)
                else:
                    rows.append(W[u].copy()); rhs.append(float(-v[u])); strict.append(False)
                origin.append((li, u))
            W = W * dec[:, None]
            v = v * dec
        else:
            if dec.shape != (len(layer.partitions),):
                raise ValueError(f"trace part for layer {li} has wrong shape")
            keep = []
            for pi, p in enumerate(layer.partitions):
                wpos = int(dec[pi])
                w = p[wpos]
                for q, i in enumerate(p):
                    if q == wpos:
                        continue
                    rows.append(W[i] - W[w]); rhs.append(float(v[w] - v[i]))
                    strict.append(q < wpos)  # lower index would have won a tie
                    origin.append((li, pi))
                keep.append(w)
            keep.extend(layer.passthrough)
            W, v = W[keep], v[keep]
    n = f.input_dim
    C = np.array(rows, dtype=float).reshape(-1, n)
    return LinearRegion(C, np.array(rhs, dtype=float), np.array(strict, dtype=bool), tuple(origin), W, v)


# JSON form ------------------------------------------------------------------

def fnn_to_json(f: Fnn) -> list[dict]:
    out = []
    for layer in f.layers:
        if isinstance(layer, Affine):
            out.append({"affine": {"A": layer.A, "b": layer.b}})
        elif isinstance(layer, Relu):
            out.append({"relu": {"width": layer.width}})
        else:
            out.append({"maxpool": {"width": layer.width, "partitions": [list(p) for p in layer.partitions]}})
    return out


def fnn_from_json(obj: Sequence[dict]) -> Fnn:
    layers: list[Layer] = []
    width = None
    for item in obj:
        if "affine" in item:
            a = item["affine"]
            A = np.array(a["A"], dtype=float)
            b = np.array(a["b"], dtype=float)
            if A.size == 0:
                A = A.reshape(len(b), width or 0)
            layer: Layer = Affine(A, b)
        elif "relu" in item:
            layer = Relu(int(item["relu"].get("width", width or 0)))
        elif "maxpool" in item:
            m = item["maxpool"]
            layer = MaxPool(int(m.get("width", width or 0)), tuple(tuple(p) for p in m["partitions"]))
        else:
            raise ValueError(f"unknown layer tag {sorted(item)}")
        width = layer.n_out
        layers.append(layer)
    return Fnn(tuple(layers))
