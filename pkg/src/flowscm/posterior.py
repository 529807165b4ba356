"""Block-diagonal Gaussian posterior with per-block Cholesky factors.

The encoder emits, per concept block k, a mean mu_k and a raw d_k x d_k
matrix whose lower triangle parameterizes a Cholesky factor L_k. The
diagonal passes through softplus plus a small floor so L_k is always
valid; entries above the diagonal are ignored. Sampling uses the
reparameterization z_k = mu_k + L_k eps_k, and the log-density uses the
closed form

    log q(z_k | x) = -(d_k/2) log(2 pi) - sum_i log (L_k)_ii - ||eps_k||^2 / 2

which is exact because eps_k = L_k^{-1}(z_k - mu_k) and the Jacobian of
the whitening map contributes the log-diagonal term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import Linear, Module
from .numerics import Tensor, concat, leaky_relu, log, softplus, tsum

LOG_TWO_PI = float(np.log(2.0 * np.pi))
DIAG_FLOOR = 1e-4
ENCODER_HIDDEN = 128
ENCODER_DEPTH = 3


class CholFactor:
    """Lower-triangular factor for one block, stored column-wise.

    ``diag[i]`` and ``below[(i, j)]`` (i > j) are (B, 1) tensors, so a
    batch of per-sample factors never needs a 3-D tensor.
    """

    def __init__(self, dim: int, diag, below):
        self.dim = dim
        self.diag = diag
        self.below = below

    def entry(self, i: int, j: int) -> Tensor:
        if i == j:
            return self.diag[i]
        return self.below[(i, j)]

    def dense(self) -> np.ndarray:
        """(B, d, d) numpy view for tests and oracles."""
        b = self.diag[0].shape[0]
        out = np.zeros((b, self.dim, self.dim))
        for i in range(self.dim):
            out[:, i, i] = self.diag[i].data[:, 0]
            for j in range(i):
                out[:, i, j] = self.below[(i, j)].data[:, 0]
        return out


@dataclass
class BlockGaussian:
    """Posterior q(z|x) as K independent Gaussian blocks."""

    dims: list
    mu: list
    chol: list

    @property
    def n_blocks(self) -> int:
        return len(self.dims)


def build_cholesky(raw_blocks, dims) -> list:
    """Raw (B, d_k^2) head outputs -> per-block Cholesky factors.

    Diagonal: softplus(raw_ii) + DIAG_FLOOR. Strictly-lower entries are
    taken as-is; the upper triangle of the raw matrix is never read.
    """
    if len(raw_blocks) != len(dims):
        raise ValueError(f"got {len(raw_blocks)} raw blocks for {len(dims)} dims")
    factors = []
    for raw, d in zip(raw_blocks, dims):
        if raw.ndim != 2 or raw.shape[1] != d * d:
            raise ValueError(f"raw block has shape {raw.shape}, expected (B, {d * d})")
        diag = []
        below = {}
        for i in range(d):
            diag.append(softplus(raw.narrow(1, i * d + i, 1)) + DIAG_FLOOR)
            for j in range(i):
                below[(i, j)] = raw.narrow(1, i * d + j, 1)
        factors.append(CholFactor(d, diag, below))
    return factors


def sample(post: BlockGaussian, eps_blocks) -> list:
    """Reparameterized draw z_k = mu_k + L_k eps_k, block by block."""
    if len(eps_blocks) != post.n_blocks:
        raise ValueError(f"got {len(eps_blocks)} eps blocks for {post.n_blocks} posterior blocks")
    z_blocks = []
    for k, d in enumerate(post.dims):
        mu, fac, eps = post.mu[k], post.chol[k], eps_blocks[k]
        if eps.shape != mu.shape:
            raise ValueError(f"eps block {k} has shape {eps.shape}, expected {mu.shape}")
        cols = []
        for i in range(d):
            acc = mu.narrow(1, i, 1) + fac.diag[i] * eps.narrow(1, i, 1)
            for j in range(i):
                acc = acc + fac.below[(i, j)] * eps.narrow(1, j, 1)
            cols.append(acc)
        z_blocks.append(cols[0] if d == 1 else concat(cols, axis=1))
    return z_blocks


def log_density(post: BlockGaussian, z_blocks, eps_blocks) -> Tensor:
    """Per-record log q(z|x), shape (B,), summed over blocks.

    Uses the whitened noise actually drawn for z, so z_blocks only
    sanity-checks shapes; the closed form needs eps and the factor
    diagonals alone.
    """
    total = None
    for k, d in enumerate(post.dims):
        if z_blocks[k].shape != post.mu[k].shape:
            raise ValueError(f"z block {k} has shape {z_blocks[k].shape}, expected {post.mu[k].shape}")
        eps = eps_blocks[k]
        log_diag = concat([log(c) for c in post.chol[k].diag], axis=1)
        term = (
            (-0.5 * d * LOG_TWO_PI)
            + (-1.0 * tsum(log_diag, axis=1))
            + (-0.5 * tsum(eps * eps, axis=1))
        )
        total = term if total is None else total + term
    return total


class Encoder(Module):
    """Shared leaky-ReLU backbone with mean and Cholesky heads."""

    def __init__(
        self,
        obs_dim: int,
        dims,
        rng: np.random.Generator,
        hidden: int = ENCODER_HIDDEN,
        depth: int = ENCODER_DEPTH,
    ):
        self.dims = list(dims)
        widths = [obs_dim] + [hidden] * depth
        self.backbone = [Linear(widths[i], widths[i + 1], rng, init="leaky") for i in range(depth)]
        self.head_mu = Linear(hidden, sum(self.dims), rng, init="linear")
        self.head_raw = Linear(hidden, sum(d * d for d in self.dims), rng, init="linear")

    def __call__(self, x: Tensor) -> BlockGaussian:
        h = x
        for layer in self.backbone:
            h = leaky_relu(layer(h))
        mu_flat = self.head_mu(h)
        raw_flat = self.head_raw(h)
        mu_blocks = []
        raw_blocks = []
        mu_off = 0
        raw_off = 0
        for d in self.dims:
            mu_blocks.append(mu_flat.narrow(1, mu_off, d))
            raw_blocks.append(raw_flat.narrow(1, raw_off, d * d))
            mu_off += d
            raw_off += d * d
        return BlockGaussian(dims=list(self.dims), mu=mu_blocks, chol=build_cholesky(raw_blocks, self.dims))
