"""The assembled generative model.

Encoder -> block-diagonal Gaussian posterior -> latent SCM with
per-concept flow priors -> additive decoder, plus affine supervision
heads and the EMA direction tracker used for interventions. The decoder
projects each concept block independently and sums the projections
before a shared trunk, mirroring the independence structure the latent
space is supposed to carry.
"""

from __future__ import annotations

import numpy as np

from . import numerics
from .flowprior import FlowStack, StandardNormalPrior
from .intervene import DirectionTracker
from .nets import Linear, Module
from .numerics import Tensor, concat, leaky_relu
from .objectives import SupervisionHeads
from .posterior import BlockGaussian, Encoder
from .scm import CausalGraph, StructuralFunctions

DECODER_HIDDEN = 64


class AdditiveDecoder(Module):
    """Per-block input projectors summed into a shared trunk."""

    def __init__(self, dims, obs_dim: int, rng: np.random.Generator, hidden: int = DECODER_HIDDEN):
        self.projectors = [Linear(d, hidden, rng, init="leaky") for d in dims]
        self.trunk = Linear(hidden, hidden, rng, init="leaky")
        self.out = Linear(hidden, obs_dim, rng, init="linear")

    def __call__(self, z_blocks) -> Tensor:
        total = None
        for proj, z_k in zip(self.projectors, z_blocks):
            term = proj(z_k)
            total = term if total is None else total + term
        h = leaky_relu(total)
        h = leaky_relu(self.trunk(h))
        return self.out(h)


class CausalFlowVae(Module):
    def __init__(
        self,
        graph: CausalGraph,
        obs_dim: int,
        rng: np.random.Generator,
        encoder_hidden: int = 128,
        encoder_depth: int = 3,
        decoder_hidden: int = DECODER_HIDDEN,
        struct_hidden: int = 32,
        flow_layers: int = 4,
        flow_hidden: int = 32,
        flow_bumps: int = 3,
        use_flow_prior: bool = True,
        retention: float = 0.9,
        top_fraction: float = 0.1,
    ):
        self.graph = graph
        self.obs_dim = obs_dim
        self.encoder = Encoder(obs_dim, graph.dims, rng, hidden=encoder_hidden, depth=encoder_depth)
        self.decoder = AdditiveDecoder(graph.dims, obs_dim, rng, hidden=decoder_hidden)
        self.funcs = StructuralFunctions(graph, rng, hidden=struct_hidden)
        if use_flow_prior:
            self.priors = [
                FlowStack(d, rng, n_layers=flow_layers, hidden=flow_hidden, bumps=flow_bumps)
                for d in graph.dims
            ]
        else:
            self.priors = [StandardNormalPrior(d) for d in graph.dims]
        self.heads = SupervisionHeads(graph.dims, rng)
        self.tracker = DirectionTracker(graph.dims, names=graph.names, retention=retention, top_fraction=top_fraction)

    def encode(self, x: Tensor) -> BlockGaussian:
        return self.encoder(x)

    def decode(self, z_blocks) -> Tensor:
        return self.decoder(z_blocks)

    def split_eps(self, eps: np.ndarray):
        """Cut a (B, total_dim) noise draw into per-block tensors."""
        out = []
        off = 0
        for d in self.graph.dims:
            out.append(Tensor(eps[:, off : off + d]))
            off += d
        return out

    # -- numpy-side helpers for evaluation and the CLI -------------------
    def posterior_mean_np(self, x: np.ndarray, batch: int = 512):
        """Posterior means for a whole dataset, list of (n, d_k) arrays."""
        n = x.shape[0]
        blocks = [np.empty((n, d)) for d in self.graph.dims]
        with numerics.no_grad():
            for start in range(0, n, batch):
                stop = min(start + batch, n)
                post = self.encode(Tensor(x[start:stop]))
                for k in range(self.graph.n_concepts):
                    blocks[k][start:stop] = post.mu[k].data
        return blocks

    def readouts_np(self, z_blocks_np) -> np.ndarray:
        """(n, K) affine readouts of per-block latents."""
        with numerics.no_grad():
            cols = [
                self.heads.readout(k, Tensor(z_blocks_np[k])).data[:, 0]
                for k in range(self.graph.n_concepts)
            ]
        return np.column_stack(cols)

    def decode_np(self, z_blocks_np, batch: int = 512) -> np.ndarray:
        n = z_blocks_np[0].shape[0]
        out = np.empty((n, self.obs_dim))
        with numerics.no_grad():
            for start in range(0, n, batch):
                stop = min(start + batch, n)
                x_hat = self.decode([Tensor(b[start:stop]) for b in z_blocks_np])
                out[start:stop] = x_hat.data
        return out


def flat_latent(z_blocks_np) -> np.ndarray:
    return np.concatenate(z_blocks_np, axis=1)
