"""Second and third hierarchies: clip grouping, intra-group reduction, the
axis-aligned 3D mixer, all-group summarization and inter-group cross-attention
with index-based positional embeddings, stacked recurrently."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encode import ProxyGrid
from .nn import MLP, LayerNorm, Linear, Module, MultiHeadAttention, Tensor, concat, stack

__all__ = [
    "GroupSpec",
    "make_groups",
    "IndexPE",
    "Mixer3D",
    "TemporalHierarchy",
]


@dataclass(frozen=True)
class GroupSpec:
    """Partition of frames 1..T into S ordered groups of T' frames each.

    Frame indices are 1-based (frame T is the latest); use ``zero_based``
    for array indexing.
    """

    S: int
    T_prime: int
    index_sets: tuple[tuple[int, ...], ...]
    strategy: str

    @property
    def T(self) -> int:
        return self.S * self.T_prime

    def zero_based(self) -> list[list[int]]:
        return [[t - 1 for t in g] for g in self.index_sets]


def make_groups(T: int, S: int, strategy: str = "strided") -> GroupSpec:
    """Contiguous: group i is {(i-1)T'+1 .. iT'}; strided: {i, i+S, i+2S, ...}."""
    if S < 1 or T < 1 or T % S != 0:
        raise ValueError(f"S={S} must divide T={T}")
    t_prime = T // S
    if strategy == "contiguous":
        sets = tuple(tuple(range(i * t_prime + 1, (i + 1) * t_prime + 1)) for i in range(S))
    elif strategy == "strided":
        sets = tuple(tuple(range(i + 1, T + 1, S)) for i in range(S))
    else:
        raise ValueError(f"unknown grouping strategy {strategy!r}")
    return GroupSpec(S=S, T_prime=t_prime, index_sets=sets, strategy=strategy)


class IndexPE(Module):
    """Learnable positional embedding from a proxy point's (i, j, k) grid
    index; equal indices give identical embeddings regardless of frame or
    group."""

    def __init__(self, dim: int, name: str = "index_pe", seed: int = 0):
        self.mlp = MLP([3, dim, dim], name, seed)

    def __call__(self, grid: ProxyGrid) -> Tensor:
        return self.mlp(Tensor(grid.indices.astype(np.float64)))


class Mixer3D(Module):
    """Four residual sub-steps mixing along the grid x, y, z axes and then
    the channel axis. With all projection weights zeroed the block is the
    identity map."""

    def __init__(self, n: int, dim: int, name: str, seed: int = 0):
        self.n = n
        self.dim = dim
        self.norms = [LayerNorm(dim, f"{name}.norm{ax}") for ax in range(4)]
        self.axis_proj = [Linear(n, n, f"{name}.mix{ax}", seed) for ax in range(3)]
        self.channel_proj = Linear(dim, dim, f"{name}.mixc", seed)

    def _mix_axis(self, x: Tensor, axis: int) -> Tensor:
        # x: (..., n, n, n, D); project along one spatial axis with a shared
        # linear map; axis in 0..2 counts the spatial axes
        h = self.norms[axis](x).relu()
        target = x.ndim - 4 + axis
        perm = [a for a in range(x.ndim) if a != target] + [target]
        inv = np.argsort(perm)
        mixed = self.axis_proj[axis](h.transpose(*perm))
        return x + mixed.transpose(*inv)

    def __call__(self, g: Tensor, enabled_steps: tuple[bool, bool, bool, bool] = (True,) * 4) -> Tensor:
        """Input (..., N, D) with N = n^3; leading dims are batched."""
        *lead, N, D = g.shape
        n = self.n
        if n**3 != N:
            raise ValueError(f"feature rows {N} are not a perfect cube of n={n}")
        x = g.reshape(*lead, n, n, n, D)
        for axis in range(3):
            if enabled_steps[axis]:
                x = self._mix_axis(x, axis)
        if enabled_steps[3]:
            x = x + self.channel_proj(self.norms[3](x).relu())
        return x.reshape(*lead, N, D)


class TemporalHierarchy(Module):
    """Intra-group reduction, then ``depth`` rounds of mixer -> summarization
    -> cross-attention, then one final mixer pass. Weights are untied across
    rounds. Returns the group features after every mixer pass (depth + 1
    intermediate sets) for intermediate supervision."""

    def __init__(self, n: int, dim: int, T_prime: int, S: int, depth: int = 2,
                 heads: int = 4, use_attention: bool = True, seed: int = 0,
                 name: str = "hierarchy"):
        if depth < 0:
            raise ValueError("depth must be >= 0")
        self.n = n
        self.dim = dim
        self.S = S
        self.depth = depth
        self.use_attention = use_attention
        self.intra_mlp = MLP([T_prime * dim, dim, dim], f"{name}.intra", seed)
        self.index_pe = IndexPE(dim, f"{name}.pe", seed)
        self.mixers = [Mixer3D(n, dim, f"{name}.mixer{d}", seed) for d in range(depth + 1)]
        self.summarizers = [MLP([S * dim, dim, dim], f"{name}.summ{d}", seed)
                            for d in range(depth)]
        self.attends = [MultiHeadAttention(dim, heads, f"{name}.attn{d}", seed)
                        for d in range(depth)]

    def intra_group_reduce(self, frame_feats: list[Tensor]) -> Tensor:
        """Concatenate the T' member frames per proxy (trajectory-time order)
        and fuse T'*D -> D."""
        return self.intra_mlp(concat(frame_feats, axis=1))

    def summarize_groups(self, groups: list[Tensor], d: int) -> Tensor:
        """Concatenate the S group features per proxy and fuse S*D -> D."""
        if len(groups) != self.S:
            raise ValueError(f"expected {self.S} groups, got {len(groups)}")
        return self.summarizers[d](concat(groups, axis=1))

    def inter_group_attend(self, group: Tensor, summary: Tensor, pe: Tensor,
                           d: int) -> Tensor:
        """Residual cross-attention: queries are the group (+PE), keys the
        summary (+PE), values the summary without PE."""
        return group + self.attends[d](group + pe, summary + pe, summary)

    def run_batch(self, stacked: Tensor, spec: GroupSpec,
                  grid: ProxyGrid) -> list[Tensor]:
        """Full second+third hierarchy over a (B, T, N, D) batch of encoded
        per-frame features; returns one (B, S, N, D) tensor per intermediate
        output.

        Groups are processed as one batch, which matches the per-group
        operations exactly: the mixer and reductions share weights across
        groups, and each attention query row attends over the same summary
        keys.
        """
        B, T, N, D = stacked.shape
        if T != spec.T:
            raise ValueError(f"got {T} frames for spec with T={spec.T}")
        member = stacked.transpose(1, 0, 2, 3).take_rows(
            np.asarray(spec.zero_based()))           # (S, T', B, N, D)
        S, t_prime = member.shape[:2]
        groups = self.intra_mlp(
            member.transpose(0, 2, 3, 1, 4).reshape(S, B, N, t_prime * D))
        pe = self.index_pe(grid)                     # (N, D), broadcasts
        intermediates: list[Tensor] = []
        for d in range(self.depth):
            groups = self.mixers[d](groups)
            intermediates.append(groups.transpose(1, 0, 2, 3))
            if self.use_attention:
                summary = self.summarizers[d](
                    groups.transpose(1, 2, 0, 3).reshape(B, N, S * D))
                groups = groups + self.attends[d](groups + pe, summary + pe,
                                                  summary)
        groups = self.mixers[self.depth](groups)
        intermediates.append(groups.transpose(1, 0, 2, 3))
        return intermediates

    def run(self, frame_feats: list[Tensor] | Tensor, spec: GroupSpec,
            grid: ProxyGrid) -> list[list[Tensor]]:
        """Single-trajectory wrapper around :meth:`run_batch`.

        ``frame_feats`` is either a list of (N, D) tensors (0-based frame t)
        or the equivalent stacked (T, N, D) tensor; returns, per intermediate
        output, the list of S (N, D) group features.
        """
        stacked = frame_feats if isinstance(frame_feats, Tensor) else stack(frame_feats)
        T, N, D = stacked.shape
        inter = self.run_batch(stacked.reshape(1, T, N, D), spec, grid)
        S = spec.S
        return [[g.reshape(S, N, D).take_rows([i]).reshape(N, D) for i in range(S)]
                for g in inter]
