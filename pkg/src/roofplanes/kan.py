"""Fourier-series KAN layer: forward pass, analytic gradients, serialization.

Each input coordinate passes through a learnable truncated Fourier series per
output::

    y[o] = bias[o] + sum_i sum_{k=1..G} a[o,i,k] cos(k x[i]) + b[o,i,k] sin(k x[i])
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np

DEFAULT_GRID = 5
GRAD_STEP = 1e-5
GRAD_FLOOR = 1e-3  # denominator floor for relative gradient errors
_HEADER = struct.Struct("<3i")


@dataclass
class KanGradients:
    a: np.ndarray
    b: np.ndarray
    bias: np.ndarray
    x: np.ndarray


@dataclass
class FourierKanLayer:
    a: np.ndarray  # (out_dim, in_dim, G)
    b: np.ndarray  # (out_dim, in_dim, G)
    bias: np.ndarray  # (out_dim,)

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.a.ndim != 3 or self.a.shape != self.b.shape:
            raise ValueError(f"coefficient shapes differ: {self.a.shape} vs {self.b.shape}")
        if min(self.a.shape) < 1:
            raise ValueError("in_dim, out_dim and grid size must be positive")
        if self.bias.shape != (self.a.shape[0],):
            raise ValueError(f"bias must have shape ({self.a.shape[0]},)")
        for name in ("a", "b", "bias"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in {name}")

    @property
    def out_dim(self) -> int:
        return self.a.shape[0]

    @property
    def in_dim(self) -> int:
        return self.a.shape[1]

    @property
    def grid_size(self) -> int:
        return self.a.shape[2]

    @classmethod
    def random(cls, in_dim: int, out_dim: int, grid_size: int = DEFAULT_GRID, seed=None):
        """Coefficients and bias uniform in +-1 / (in_dim * sqrt(G))."""
        rng = np.random.default_rng(seed)
        s = 1.0 / (in_dim * np.sqrt(grid_size))
        shape = (out_dim, in_dim, grid_size)
        return cls(rng.uniform(-s, s, shape), rng.uniform(-s, s, shape), rng.uniform(-s, s, out_dim))

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int, grid_size: int = DEFAULT_GRID):
        shape = (out_dim, in_dim, grid_size)
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(out_dim))

    def _basis(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1:] != (self.in_dim,) or x.ndim > 2:
            raise ValueError(f"expected input of length {self.in_dim}, got shape {x.shape}")
        k = np.arange(1, self.grid_size + 1, dtype=np.float64)
        kx = np.atleast_2d(x)[:, :, None] * k
        return x.ndim == 1, k, np.cos(kx), np.sin(kx)

    def forward(self, x) -> np.ndarray:
        """Apply to one input vector (in_dim,) or a batch (B, in_dim)."""
        single, _, c, s = self._basis(x)
        y = self.bias + np.einsum("bik,oik->bo", c, self.a) + np.einsum("bik,oik->bo", s, self.b)
        return y[0] if single else y

    __call__ = forward

    def backward(self, x, upstream) -> KanGradients:
        """Gradients of ``sum(upstream * forward(x))``; batches are summed over."""
        single, k, c, s = self._basis(x)
        up = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        if up.shape != (c.shape[0], self.out_dim):
            raise ValueError(f"upstream must have shape ({self.out_dim},) per input")
        ga = np.einsum("bo,bik->oik", up, c)
        gb = np.einsum("bo,bik->oik", up, s)
        gx = np.einsum("bo,oik,bik->bi", up, self.b * k, c) - np.einsum("bo,oik,bik->bi", up, self.a * k, s)
        return KanGradients(ga, gb, up.sum(axis=0), gx[0] if single else gx)

    def parameters(self) -> np.ndarray:
        return np.concatenate([self.a.ravel(), self.b.ravel(), self.bias])

    def with_parameters(self, vec) -> "FourierKanLayer":
        vec = np.asarray(vec, dtype=np.float64)
        n = self.a.size
        if vec.shape != (2 * n + self.out_dim,):
            raise ValueError("parameter vector has the wrong length")
        return FourierKanLayer(vec[:n].reshape(self.a.shape), vec[n:2 * n].reshape(self.a.shape),
                               vec[2 * n:])

    def save(self, path) -> None:
        """Header (in_dim, out_dim, G) as little-endian int32, then a, b, bias as little-endian float64."""
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(self.in_dim, self.out_dim, self.grid_size))
            fh.write(self.parameters().astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "FourierKanLayer":
        data = Path(path).read_bytes()
        if len(data) < _HEADER.size:
            raise ValueError(f"{path}: truncated layer header")
        in_dim, out_dim, grid = _HEADER.unpack_from(data)
        if min(in_dim, out_dim, grid) < 1:
            raise ValueError(f"{path}: invalid layer dimensions {(in_dim, out_dim, grid)}")
        n = out_dim * in_dim * grid
        body = data[_HEADER.size:]
        if len(body) != 8 * (2 * n + out_dim):
            raise ValueError(f"{path}: expected {2 * n + out_dim} coefficients")
        vec = np.frombuffer(body, dtype="<f8").astype(np.float64)
        return cls.zeros(in_dim, out_dim, grid).with_parameters(vec)


def apply_stack(layers: Sequence[FourierKanLayer], x) -> np.ndarray:
    h = np.asarray(x, dtype=np.float64)
    for layer in layers:
        h = layer.forward(h)
    return h


def mask_scores(features, queries, layers: Sequence[FourierKanLayer]) -> np.ndarray:
    """Score of every query against every superpoint: ``queries @ KAN(features).T``, shape (Q, S)."""
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    mask = apply_stack(layers, feats)
    if q.shape[1] != mask.shape[1]:
        raise ValueError(f"query width {q.shape[1]} does not match mask feature width {mask.shape[1]}")
    return q @ mask.T


def identity_layer(dim: int, lo: float = -1.0, hi: float = 1.0, n_fit: int = 201) -> FourierKanLayer:
    """G = 1 layer approximating the identity on [lo, hi] per coordinate.

    Each output o only reads input o and fits t ~ c + a cos t + b sin t by
    least squares on a uniform grid.
    """
    t = np.linspace(lo, hi, n_fit)
    design = np.column_stack([np.ones_like(t), np.cos(t), np.sin(t)])
    (c0, ca, cb), *_ = np.linalg.lstsq(design, t, rcond=None)
    layer = FourierKanLayer.zeros(dim, dim, 1)
    eye = np.arange(dim)
    layer.a[eye, eye, 0] = ca
    layer.b[eye, eye, 0] = cb
    # the constant term of each series is shared through the bias
    layer.bias[:] = c0
    return layer


def _relative_error(analytic, numeric, floor=GRAD_FLOOR) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradient_error(layer: FourierKanLayer, x, upstream, step: float = GRAD_STEP) -> float:
    """Max relative error of analytic gradients against central finite differences."""
    x = np.asarray(x, dtype=np.float64)
    up = np.asarray(upstream, dtype=np.float64)
    grads = layer.backward(x, up)

    def loss_p(vec):
        return float(up @ layer.with_parameters(vec).forward(x))

    def loss_x(xv):
        return float(up @ layer.forward(xv))

    params = layer.parameters()
    num_p = np.empty_like(params)
    for j in range(params.size):
        e = np.zeros_like(params)
        e[j] = step
        num_p[j] = (loss_p(params + e) - loss_p(params - e)) / (2 * step)
    num_x = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        num_x[j] = (loss_x(x + e) - loss_x(x - e)) / (2 * step)
    analytic_p = np.concatenate([grads.a.ravel(), grads.b.ravel(), grads.bias])
    return max(_relative_error(analytic_p, num_p), _relative_error(grads.x, num_x))


def gradient_check(seed=0, draws: int = 100, max_dim: int = 5, grid_size: int = DEFAULT_GRID) -> List[float]:
    """Gradient errors over random (layer, x, upstream) draws."""
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(draws):
        in_dim, out_dim = (int(v) for v in rng.integers(1, max_dim + 1, size=2))
        layer = FourierKanLayer.random(in_dim, out_dim, grid_size, rng)
        x = rng.uniform(-np.pi, np.pi, in_dim)
        up = rng.normal(size=out_dim)
        errors.append(gradient_error(layer, x, up))
    return errors
