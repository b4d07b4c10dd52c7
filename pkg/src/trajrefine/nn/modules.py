"""Neural building blocks: linear layers, MLPs, layer norm, multi-head
attention and point set abstraction, all on the float64 autodiff core.

Weights use Kaiming-uniform init with a per-parameter seed derived from the
parameter name, so a freshly built model is reproducible regardless of
construction order.
"""

from __future__ import annotations

import math
import zlib

import numpy as np

from .tensor import Tensor, concat

__all__ = [
    "Parameter",
    "Module",
    "Linear",
    "MLP",
    "LayerNorm",
    "MultiHeadAttention",
    "SetAbstraction",
    "ball_query",
]


class Parameter(Tensor):
    """A named trainable tensor."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.shape})"


def _name_seed(name: str, base_seed: int = 0) -> int:
    return (zlib.crc32(name.encode()) ^ base_seed) & 0x7FFFFFFF


def kaiming_uniform(shape, fan_in: int, name: str, base_seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(_name_seed(name, base_seed))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base class with recursive parameter discovery."""

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        seen: set[int] = set()
        self._collect(params, seen)
        return params

    def _collect(self, params: list[Parameter], seen: set[int]):
        for value in vars(self).values():
            self._collect_value(value, params, seen)

    @staticmethod
    def _collect_value(value, params, seen):
        if isinstance(value, Parameter):
            if id(value) not in seen:
                seen.add(id(value))
                params.append(value)
        elif isinstance(value, Module):
            value._collect(params, seen)
        elif isinstance(value, (list, tuple)):
            for v in value:
                Module._collect_value(v, params, seen)
        elif isinstance(value, dict):
            for v in value.values():
                Module._collect_value(v, params, seen)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = {p.name: p for p in self.parameters()}
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)}, extra={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, name: str, seed: int = 0,
                 zero_init: bool = False):
        if zero_init:
            w = np.zeros((in_dim, out_dim))
        else:
            w = kaiming_uniform((in_dim, out_dim), in_dim, name + ".W", seed)
        self.W = Parameter(w, name + ".W")
        self.b = Parameter(np.zeros(out_dim), name + ".b")

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.W.shape[0]:
            raise ValueError(f"linear input dim {x.shape[-1]} != {self.W.shape[0]}")
        return x @ self.W + self.b


class MLP(Module):
    """Stack of linear layers with ReLU between them (none after the last)."""

    def __init__(self, dims: list[int], name: str, seed: int = 0,
                 zero_init_last: bool = False):
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output dims")
        self.layers = [
            Linear(dims[i], dims[i + 1], f"{name}.{i}", seed,
                   zero_init=zero_init_last and i == len(dims) - 2)
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.relu()
        return x


class LayerNorm(Module):
    """Normalization over the last axis with learnable scale and offset."""

    def __init__(self, dim: int, name: str, eps: float = 1e-6):
        self.gain = Parameter(np.ones(dim), name + ".gain")
        self.bias = Parameter(np.zeros(dim), name + ".bias")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        d = x - mu
        var = (d * d).mean(axis=-1, keepdims=True)
        return d / (var + self.eps).sqrt() * self.gain + self.bias


class MultiHeadAttention(Module):
    """Scaled dot-product attention with separate Q/K/V inputs.

    Inputs are (..., rows, dim); leading dims are batched and may broadcast
    between the query and key/value sides.
    """

    def __init__(self, dim: int, heads: int, name: str, seed: int = 0):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.q_proj = Linear(dim, dim, name + ".q", seed)
        self.k_proj = Linear(dim, dim, name + ".k", seed)
        self.v_proj = Linear(dim, dim, name + ".v", seed)
        self.out_proj = Linear(dim, dim, name + ".out", seed)

    def _split_heads(self, x: Tensor) -> Tensor:
        # (..., rows, dim) -> (..., heads, rows, dim/heads)
        *lead, rows, _ = x.shape
        split = x.reshape(*lead, rows, self.heads, self.dim // self.heads)
        perm = list(range(split.ndim))
        perm[-3], perm[-2] = perm[-2], perm[-3]
        return split.transpose(perm)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor,
                 return_weights: bool = False):
        if key.shape[-2] != value.shape[-2]:
            raise ValueError("key and value must have the same number of rows")
        dh = self.dim // self.heads
        q = self._split_heads(self.q_proj(query))
        k = self._split_heads(self.k_proj(key))
        v = self._split_heads(self.v_proj(value))
        kt_perm = list(range(k.ndim))
        kt_perm[-1], kt_perm[-2] = kt_perm[-2], kt_perm[-1]
        scores = (q @ k.transpose(kt_perm)) * (1.0 / math.sqrt(dh))
        weights = scores.softmax(axis=-1)          # (..., h, nq, nk)
        mixed = weights @ v
        perm = list(range(mixed.ndim))
        perm[-3], perm[-2] = perm[-2], perm[-3]
        merged = mixed.transpose(perm)             # (..., nq, h, dh)
        *lead, nq, _, _ = merged.shape
        out = self.out_proj(merged.reshape(*lead, nq, self.dim))
        if return_weights:
            return out, weights
        return out


def ball_query(centers: np.ndarray, points: np.ndarray, radius: float,
               nsample: int, return_counts: bool = False):
    """Nearest ``nsample`` points within ``radius`` of each center.

    Returns (indices [N, nsample], valid [N]); centers with no neighbor get
    index 0 and valid False, centers with fewer than nsample neighbors repeat
    the nearest one. Selecting by distance keeps the result invariant to the
    input point order. With ``return_counts`` the number of real (unpadded)
    neighbors per center is appended to the result.
    """
    n_centers = len(centers)
    idx = np.zeros((n_centers, nsample), dtype=np.int64)
    valid = np.zeros(n_centers, dtype=bool)
    counts = np.zeros(n_centers, dtype=np.int64)
    if len(points) == 0:
        return (idx, valid, counts) if return_counts else (idx, valid)
    d2 = ((centers[:, None, :] - points[None, :, :]) ** 2).sum(axis=-1)
    r2 = radius * radius
    for i in range(n_centers):
        within = np.flatnonzero(d2[i] <= r2)
        if within.size == 0:
            continue
        order = within[np.argsort(d2[i][within], kind="stable")]
        chosen = order[:nsample]
        idx[i, : len(chosen)] = chosen
        if len(chosen) < nsample:
            idx[i, len(chosen):] = chosen[0]
        valid[i] = True
        counts[i] = len(chosen)
    return (idx, valid, counts) if return_counts else (idx, valid)


class SetAbstraction(Module):
    """Ball-query grouping, shared per-point MLP, max-pool per center.

    The per-point MLP input is the 3-dim (point - center) offset concatenated
    with the point's feature channels.
    """

    def __init__(self, feat_dim: int, mlp_dims: list[int], radius: float,
                 nsample: int, name: str, seed: int = 0):
        self.feat_dim = feat_dim
        self.radius = radius
        self.nsample = nsample
        self.mlp = MLP([3 + feat_dim] + list(mlp_dims), name + ".mlp", seed)
        self.out_dim = mlp_dims[-1]

    def __call__(self, centers: np.ndarray, points: np.ndarray, feats,
                 radius: float | None = None) -> Tensor:
        r = self.radius if radius is None else radius
        n_centers = len(centers)
        idx, valid = ball_query(centers, points, r, self.nsample)
        if not valid.any():
            return Tensor(np.zeros((n_centers, self.out_dim)))
        offsets = points[idx] - centers[:, None, :]          # [N, ns, 3]
        offsets_t = Tensor(offsets.reshape(-1, 3))
        if isinstance(feats, Tensor):
            gathered = feats.take_rows(idx.reshape(-1))
        else:
            gathered = Tensor(np.asarray(feats)[idx.reshape(-1)])
        per_point = self.mlp(concat([offsets_t, gathered], axis=1))
        pooled = per_point.reshape(n_centers, self.nsample, self.out_dim).max(axis=1)
        # zero out centers with empty neighborhoods
        return pooled * Tensor(valid[:, None].astype(np.float64))
