"""Latent structural causal model over vector-valued concept blocks.

The latent vector is partitioned into K blocks, one per concept, wired
by a DAG. Each non-root block is generated as z_k = f_k(parents) + n_k
with an additive exogenous residual n_k. Because the residual map
n = z - f(parents(z)) only subtracts functions of strictly earlier
blocks (in topological order), its Jacobian is unit triangular and the
map is volume preserving; ``jacobian_logdet_check`` verifies that
numerically on small graphs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .nets import Linear, Module
from .numerics import Tensor, concat, tanh

STRUCT_HIDDEN = 32


@dataclass
class CausalGraph:
    """Concept DAG: adjacency[j, k] == 1 means block j is a parent of k."""

    names: list
    dims: list
    adjacency: np.ndarray

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=np.int64)
        k = len(self.names)
        if len(set(self.names)) != k:
            raise ValueError("concept names must be unique")
        if len(self.dims) != k or any(int(d) < 1 for d in self.dims):
            raise ValueError(f"dims must be {k} positive ints, got {self.dims}")
        if self.adjacency.shape != (k, k):
            raise ValueError(f"adjacency shape {self.adjacency.shape} != ({k}, {k})")
        if not np.isin(self.adjacency, (0, 1)).all():
            raise ValueError("adjacency entries must be 0 or 1")
        self.dims = [int(d) for d in self.dims]

    @property
    def n_concepts(self) -> int:
        return len(self.names)

    @property
    def total_dim(self) -> int:
        return sum(self.dims)

    def block_start(self, k: int) -> int:
        return sum(self.dims[:k])

    def parents(self, k: int) -> list:
        return [j for j in range(self.n_concepts) if self.adjacency[j, k] == 1]

    def is_root(self, k: int) -> bool:
        return not self.parents(k)

    def descendants(self, k: int) -> list:
        seen = set()
        frontier = [k]
        while frontier:
            j = frontier.pop()
            for child in range(self.n_concepts):
                if self.adjacency[j, child] == 1 and child not in seen:
                    seen.add(child)
                    frontier.append(child)
        seen.discard(k)
        return sorted(seen)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown concept {name!r}; have {self.names}") from None


def topological_order(graph: CausalGraph) -> list:
    """Kahn's algorithm; ties broken by ascending block index."""
    k = graph.n_concepts
    indegree = graph.adjacency.sum(axis=0).astype(int)
    order = []
    ready = [j for j in range(k) if indegree[j] == 0]
    while ready:
        node = min(ready)
        ready.remove(node)
        order.append(node)
        for child in range(k):
            if graph.adjacency[node, child] == 1:
                indegree[child] -= 1
                if indegree[child] == 0:
                    ready.append(child)
    if len(order) != k:
        remaining = [j for j in range(k) if j not in order]
        for j in remaining:
            for c in remaining:
                if graph.adjacency[j, c] == 1:
                    raise ValueError(
                        f"graph has a cycle involving edge {graph.names[j]} -> {graph.names[c]}"
                    )
        raise ValueError("graph has a cycle")
    return order


@dataclass
class CausalPartition:
    """Index sets induced by intervening on one concept."""

    target: int
    intervention_set: list = field(default_factory=list)
    descendant_set: list = field(default_factory=list)
    invariant_set: list = field(default_factory=list)


def partition(graph: CausalGraph, target: int) -> CausalPartition:
    if not 0 <= target < graph.n_concepts:
        raise ValueError(f"target {target} out of range for {graph.n_concepts} concepts")
    desc = graph.descendants(target)
    invariant = [j for j in range(graph.n_concepts) if j != target and j not in desc]
    return CausalPartition(
        target=target,
        intervention_set=[target],
        descendant_set=desc,
        invariant_set=invariant,
    )


class _StructNet(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, hidden: int):
        self.l1 = Linear(in_dim, hidden, rng, init="tanh")
        self.l2 = Linear(hidden, out_dim, rng, init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return self.l2(tanh(self.l1(x)))


class StructuralFunctions(Module):
    """One 2-layer tanh network per non-root concept; roots have f == 0.

    Output layers start at zero so the SCM begins as pure noise
    z_k = n_k and mechanisms are learned from data.
    """

    def __init__(self, graph: CausalGraph, rng: np.random.Generator, hidden: int = STRUCT_HIDDEN):
        self.graph = graph
        nets = []
        for k in range(graph.n_concepts):
            pdim = sum(graph.dims[j] for j in graph.parents(k))
            nets.append(None if pdim == 0 else _StructNet(pdim, graph.dims[k], rng, hidden))
        self.nets = nets

    def apply(self, k: int, z_blocks) -> Tensor:
        """f_k evaluated on the parent blocks drawn from ``z_blocks``."""
        net = self.nets[k]
        if net is None:
            raise ValueError(f"concept {self.graph.names[k]!r} is a root; f is identically zero")
        parents = self.graph.parents(k)
        if len(parents) == 1:
            x = z_blocks[parents[0]]
        else:
            x = concat([z_blocks[j] for j in parents], axis=1)
        return net(x)


def residuals(z_blocks, funcs: StructuralFunctions, graph: CausalGraph):
    """Exogenous residuals n_k = z_k - f_k(parents); roots pass through."""
    out = []
    for k in range(graph.n_concepts):
        if graph.is_root(k):
            out.append(z_blocks[k])
        else:
            out.append(z_blocks[k] - funcs.apply(k, z_blocks))
    return out


def propagate(n_blocks, funcs: StructuralFunctions, graph: CausalGraph):
    """Invert the residual map: rebuild z from exogenous noise in topo order."""
    z = [None] * graph.n_concepts
    for k in topological_order(graph):
        if graph.is_root(k):
            z[k] = n_blocks[k]
        else:
            z[k] = funcs.apply(k, z) + n_blocks[k]
    return z


def split_blocks(flat: Tensor, graph: CausalGraph):
    """Cut a (B, total_dim) tensor into per-concept column blocks."""
    if flat.ndim != 2 or flat.shape[1] != graph.total_dim:
        raise ValueError(f"expected (B, {graph.total_dim}) tensor, got {flat.shape}")
    out = []
    for k in range(graph.n_concepts):
        out.append(flat.narrow(1, graph.block_start(k), graph.dims[k]))
    return out


def _residual_map_np(z_flat: np.ndarray, funcs: StructuralFunctions, graph: CausalGraph) -> np.ndarray:
    with numerics.no_grad():
        row = Tensor(z_flat[None, :])
        blocks = split_blocks(row, graph)
        n_blocks = residuals(blocks, funcs, graph)
        return np.concatenate([b.data[0] for b in n_blocks])


def jacobian_logdet_check(
    funcs: StructuralFunctions, graph: CausalGraph, z_flat: np.ndarray, h: float = 1e-5
) -> float:
    """|det| of the residual map's numerical Jacobian at ``z_flat``.

    Central differences column by column; intended for total latent
    dimension <= 32 (dense Jacobian).
    """
    z_flat = np.asarray(z_flat, dtype=np.float64).reshape(-1)
    d = z_flat.size
    if d != graph.total_dim:
        raise ValueError(f"z has dim {d}, graph needs {graph.total_dim}")
    if d > 32:
        raise ValueError(f"dense Jacobian check limited to dim <= 32, got {d}")
    jac = np.empty((d, d))
    for i in range(d):
        bumped = z_flat.copy()
        bumped[i] = z_flat[i] + h
        hi = _residual_map_np(bumped, funcs, graph)
        bumped[i] = z_flat[i] - h
        lo = _residual_map_np(bumped, funcs, graph)
        jac[:, i] = (hi - lo) / (2.0 * h)
    return float(abs(np.linalg.det(jac)))
