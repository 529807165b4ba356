"""Directional latent interventions via abduction of exogenous noise.

A direction per concept is maintained as the difference between EMA
centroids of the latent block over the top and bottom label fractions
of each batch. Intervening shifts the target block along its direction,
keeps every non-descendant block untouched, and rebuilds descendants
with their exogenous residuals preserved: since the residual map is
invertible with unit Jacobian, this is the abduction / action /
prediction recipe specialized to additive-noise mechanisms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, add_bias
from .scm import CausalGraph, StructuralFunctions, partition, topological_order

RETENTION = 0.9
TOP_FRACTION = 0.1


class DirectionTracker:
    """EMA centroids of per-concept latent blocks, split by label extremes.

    The first update for a concept copies the batch centroids directly;
    afterwards mu <- retention * mu + (1 - retention) * batch_centroid.
    Concepts whose labels are constant within a batch are skipped.
    """

    def __init__(self, dims, names=None, retention: float = RETENTION, top_fraction: float = TOP_FRACTION):
        if not 0.0 <= retention < 1.0:
            raise ValueError(f"retention must be in [0, 1), got {retention}")
        if not 0.0 < top_fraction <= 0.5:
            raise ValueError(f"top_fraction must be in (0, 0.5], got {top_fraction}")
        self.dims = [int(d) for d in dims]
        self.names = list(names) if names is not None else [str(k) for k in range(len(dims))]
        self.retention = float(retention)
        self.top_fraction = float(top_fraction)
        self.mu_pos = [np.zeros(d) for d in self.dims]
        self.mu_neg = [np.zeros(d) for d in self.dims]
        self.initialized = [False] * len(self.dims)

    def update(self, z_blocks_np, u: np.ndarray) -> None:
        u = np.asarray(u, dtype=np.float64)
        if u.ndim != 2 or u.shape[1] != len(self.dims):
            raise ValueError(f"labels shape {u.shape} != (B, {len(self.dims)})")
        b = u.shape[0]
        m = max(1, int(b * self.top_fraction))
        if 2 * m > b:
            raise ValueError(f"batch of {b} too small for top fraction {self.top_fraction}")
        for k, z_k in enumerate(z_blocks_np):
            col = u[:, k]
            if col.max() == col.min():
                continue  # no ordering information in this batch
            top = np.argsort(-col, kind="stable")[:m]
            bottom = np.argsort(col, kind="stable")[:m]
            e_pos = z_k[top].mean(axis=0)
            e_neg = z_k[bottom].mean(axis=0)
            if not self.initialized[k]:
                self.mu_pos[k] = e_pos
                self.mu_neg[k] = e_neg
                self.initialized[k] = True
            else:
                r = self.retention
                self.mu_pos[k] = r * self.mu_pos[k] + (1.0 - r) * e_pos
                self.mu_neg[k] = r * self.mu_neg[k] + (1.0 - r) * e_neg

    def direction(self, k: int) -> np.ndarray:
        if not self.initialized[k]:
            raise ValueError(f"no direction for concept {self.names[k]!r}: no label variation seen yet")
        return self.mu_pos[k] - self.mu_neg[k]

    def state_dict(self) -> dict:
        return {
            "retention": self.retention,
            "top_fraction": self.top_fraction,
            "mu_pos": [v.tolist() for v in self.mu_pos],
            "mu_neg": [v.tolist() for v in self.mu_neg],
            "initialized": list(self.initialized),
        }

    def load_state(self, state: dict) -> None:
        self.retention = float(state["retention"])
        self.top_fraction = float(state["top_fraction"])
        self.mu_pos = [np.asarray(v, dtype=np.float64) for v in state["mu_pos"]]
        self.mu_neg = [np.asarray(v, dtype=np.float64) for v in state["mu_neg"]]
        self.initialized = [bool(v) for v in state["initialized"]]


@dataclass
class InterventionSpec:
    target: int
    tau: float

    def __post_init__(self):
        self.tau = float(self.tau)
        if not np.isfinite(self.tau):
            raise ValueError(f"tau must be finite, got {self.tau}")


def apply_intervention(
    z_blocks,
    spec: InterventionSpec,
    tracker: DirectionTracker,
    funcs: StructuralFunctions,
    graph: CausalGraph,
):
    """do(z_k := z_k + tau * v_k) with descendants rebuilt on preserved noise.

    Descendants are updated as z_j + (f_j(new parents) - f_j(old
    parents)), which equals abduction plus prediction exactly and keeps
    untouched blocks bitwise identical when tau or the upstream change
    is zero. Non-descendants are returned as the same tensors.
    """
    part = partition(graph, spec.target)
    v = tracker.direction(spec.target)
    if v.shape != (graph.dims[spec.target],):
        raise ValueError(f"direction has shape {v.shape}, block needs ({graph.dims[spec.target]},)")
    z_tilde = list(z_blocks)
    z_tilde[spec.target] = add_bias(z_blocks[spec.target], Tensor(spec.tau * v))
    desc = set(part.descendant_set)
    for j in topological_order(graph):
        if j not in desc:
            continue
        f_old = funcs.apply(j, z_blocks)
        f_new = funcs.apply(j, z_tilde)
        z_tilde[j] = z_blocks[j] + (f_new - f_old)
    return z_tilde


def counterfactual_cycle(model, z_blocks, spec: InterventionSpec):
    """Intervene, decode, re-encode; returns (x_cf, z_hat, z_tilde).

    The re-encoded latent is the posterior mean of the counterfactual
    observation (no fresh sampling noise).
    """
    z_tilde = apply_intervention(z_blocks, spec, model.tracker, model.funcs, model.graph)
    x_cf = model.decode(z_tilde)
    post = model.encode(x_cf)
    return x_cf, post.mu, z_tilde
