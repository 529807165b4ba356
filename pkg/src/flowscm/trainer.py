"""Training loop: AdamW with warmup-cosine schedule, JSON checkpoints.

One training step follows the estimation recipe end to end: encode,
sample the posterior, refresh the direction tracker on detached
latents, decode, score the exogenous residuals under the flow priors,
run one random directional intervention through the
decode / re-encode cycle, then backprop the weighted objective.

Checkpoints are plain JSON. Floats go through repr, so parameters,
optimizer moments and the generator state all round-trip bitwise and a
resumed run reproduces the uninterrupted one step for step.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, graph_from_manifest
from .intervene import InterventionSpec, counterfactual_cycle
from .model import CausalFlowVae
from .numerics import Tensor
from .objectives import (
    consistency_loss,
    kl_mc,
    prior_logprob_from_residuals,
    recon_loss,
    residual_independence,
    sup_loss,
    total_loss,
)
from .posterior import sample as sample_posterior
from .scm import CausalGraph, partition, residuals
from .synthdata import read_dataset

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOSS_KEYS = ("recon", "kl", "sup", "cons", "hsic", "total")


class CheckpointError(Exception):
    pass


class AdamW(object):
    """Adam with decoupled weight decay and bias-corrected moments.

    All parameters share one step counter; a parameter with no gradient
    this step still decays.
    """

    def __init__(self, named_params, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        self.named = list(named_params)
        names = [name for name, _ in self.named]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named}

    def step(self, lr=None) -> None:
        lr = self.lr if lr is None else float(lr)
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, p in self.named:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            self.m[name] = m
            self.v[name] = v
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)

    def state_dict(self) -> dict:
        return {
            "step": self.step_count,
            "m": {name: arr.tolist() for name, arr in self.m.items()},
            "v": {name: arr.tolist() for name, arr in self.v.items()},
        }

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for store, key in ((self.m, "m"), (self.v, "v")):
            saved = state[key]
            if set(saved) != set(store):
                raise CheckpointError("optimizer state does not match model parameters")
            for name in store:
                arr = np.asarray(saved[name], dtype=np.float64)
                if arr.shape != store[name].shape:
                    raise CheckpointError(f"optimizer moment {name}: shape {arr.shape} != {store[name].shape}")
                store[name] = arr


def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_frac: float) -> float:
    """Linear warmup over warmup_frac of total steps, then cosine to zero."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = max(1, int(total_steps * warmup_frac)) if warmup_frac > 0 else 0
    if step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def build_model(graph: CausalGraph, obs_dim: int, config: ExperimentConfig,
                rng: np.random.Generator) -> CausalFlowVae:
    return CausalFlowVae(
        graph,
        obs_dim,
        rng,
        encoder_hidden=config.encoder_hidden,
        encoder_depth=config.encoder_depth,
        decoder_hidden=config.decoder_hidden,
        struct_hidden=config.struct_hidden,
        flow_layers=config.flow_layers,
        flow_hidden=config.flow_hidden,
        flow_bumps=config.flow_bumps,
        use_flow_prior=config.use_flow_prior,
        retention=config.retention,
        top_fraction=config.top_fraction,
    )


def _train_step(model: CausalFlowVae, optimizer: AdamW, xb: np.ndarray, ub: np.ndarray,
                weights, tau_max: float, rng: np.random.Generator, lr: float, tag: str) -> dict:
    x = Tensor(xb)
    u = Tensor(ub)
    post = model.encode(x)
    eps = rng.standard_normal((xb.shape[0], model.graph.total_dim))
    eps_blocks = model.split_eps(eps)
    z_blocks = sample_posterior(post, eps_blocks)
    model.tracker.update([z.data for z in z_blocks], ub)

    x_hat = model.decode(z_blocks)
    rec = recon_loss(x, x_hat)
    n_blocks = residuals(z_blocks, model.funcs, model.graph)
    kl = kl_mc(post, z_blocks, eps_blocks, prior_logprob_from_residuals(n_blocks, model.priors))
    sup = sup_loss(z_blocks, model.heads, u)
    hs = residual_independence(n_blocks)

    ready = [k for k in range(model.graph.n_concepts) if model.tracker.initialized[k]]
    if ready:
        target = int(ready[rng.integers(len(ready))])
        tau = float(rng.uniform(-tau_max, tau_max))
        _, z_hat, z_tilde = counterfactual_cycle(model, z_blocks, InterventionSpec(target, tau))
        cons = consistency_loss(
            z_blocks, z_tilde, z_hat, partition(model.graph, target),
            weights.lambda1, weights.lambda2, weights.lambda3,
        )
    else:
        cons = Tensor(0.0)

    loss = total_loss(rec, kl, cons, sup, hs, weights)
    parts = {"recon": rec, "kl": kl, "sup": sup, "cons": cons, "hsic": hs, "total": loss}
    for name, term in parts.items():
        if not np.isfinite(term.data).all():
            raise RuntimeError(f"non-finite {name} term at {tag}: {term.data}")
    model.zero_grad()
    loss.backward()
    optimizer.step(lr)
    return {name: float(term.data) for name, term in parts.items()}


def save_checkpoint(path, model: CausalFlowVae, optimizer: AdamW, rng: np.random.Generator,
                    config: ExperimentConfig, epoch: int, best_total: float,
                    obs_dim: int, history: list) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "epoch": int(epoch),
        "best_total": float(best_total),
        "obs_dim": int(obs_dim),
        "config": config.to_dict(),
        "graph": {
            "names": list(model.graph.names),
            "dims": [int(d) for d in model.graph.dims],
            "adjacency": model.graph.adjacency.tolist(),
        },
        "params": {name: p.data.tolist() for name, p in model.named_params()},
        "tracker": model.tracker.state_dict(),
        "optimizer": optimizer.state_dict(),
        "rng_state": rng.bit_generator.state,
        "history": history,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path) as fh:
        ck = json.load(fh)
    if ck.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {ck.get('version')!r}")
    for key in ("epoch", "config", "graph", "params", "tracker", "optimizer", "rng_state", "obs_dim"):
        if key not in ck:
            raise CheckpointError(f"checkpoint is missing {key!r}")
    return ck


def restore_training_state(ck: dict):
    """(model, optimizer, rng) rebuilt exactly as saved."""
    config = ExperimentConfig.from_dict(ck["config"])
    graph = CausalGraph(
        names=list(ck["graph"]["names"]),
        dims=[int(d) for d in ck["graph"]["dims"]],
        adjacency=np.asarray(ck["graph"]["adjacency"], dtype=np.int64),
    )
    rng = np.random.default_rng(0)
    model = build_model(graph, int(ck["obs_dim"]), config, rng)
    named = dict(model.named_params())
    saved = ck["params"]
    missing = sorted(set(named) - set(saved))
    unknown = sorted(set(saved) - set(named))
    if missing or unknown:
        raise CheckpointError(f"parameter mismatch: missing {missing[:3]}, unknown {unknown[:3]}")
    for name, tensor in named.items():
        arr = np.asarray(saved[name], dtype=np.float64)
        if arr.shape != tensor.data.shape:
            raise CheckpointError(f"parameter {name}: shape {arr.shape} != {tensor.data.shape}")
        tensor.data = arr
    model.tracker.load_state(ck["tracker"])
    optimizer = AdamW(model.named_params(), lr=config.lr, weight_decay=config.weight_decay)
    optimizer.load_state(ck["optimizer"])
    rng.bit_generator.state = ck["rng_state"]
    return model, optimizer, rng


def write_history(path, history: list) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch"] + list(LOSS_KEYS) + ["lr"])
        for row in history:
            writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in LOSS_KEYS] + [repr(float(row["lr"]))])


def write_run_manifest(path, config: ExperimentConfig, data_manifest: dict, n_records: int) -> None:
    """Record the resolved run settings next to the checkpoints.

    Any deviation from the default recipe (a retuned weight, a swapped
    prior) is readable here without opening a checkpoint.
    """
    payload = {
        "config": config.to_dict(),
        "dataset": {
            "path": str(config.data_path),
            "records": int(n_records),
            "preset": data_manifest.get("preset"),
            "seed": data_manifest.get("seed"),
            "factors": list(data_manifest["factors"]),
        },
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def train(config: ExperimentConfig, resume_from=None, stop_after=None):
    """Run (or resume) training; returns (model, history).

    Resuming takes every setting from the checkpoint except out_dir, so
    the continued run is the uninterrupted run step for step.
    stop_after caps the number of completed epochs without touching the
    schedule, which is how a run is split for resume testing.
    """
    ck = None
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        restored = ExperimentConfig.from_dict(ck["config"])
        restored.out_dir = str(config.out_dir)
        config = restored
    x_all, u_all, manifest = read_dataset(config.data_path)
    graph = graph_from_manifest(manifest, config.block_dim)
    n, obs_dim = x_all.shape
    if n < config.batch_size:
        raise ValueError(f"dataset has {n} records, smaller than one batch of {config.batch_size}")
    steps_per_epoch = n // config.batch_size
    total_steps = config.epochs * steps_per_epoch

    if ck is None:
        rng = np.random.default_rng(config.seed)
        model = build_model(graph, obs_dim, config, rng)
        optimizer = AdamW(model.named_params(), lr=config.lr, weight_decay=config.weight_decay)
        start_epoch = 0
        best_total = math.inf
        history = []
    else:
        if ck["graph"]["names"] != graph.names:
            raise CheckpointError(f"checkpoint concepts {ck['graph']['names']} != dataset factors {graph.names}")
        model, optimizer, rng = restore_training_state(ck)
        start_epoch = int(ck["epoch"])
        best_total = float(ck["best_total"])
        history = [dict(row) for row in ck.get("history", [])]

    end_epoch = config.epochs if stop_after is None else min(config.epochs, int(stop_after))
    weights = config.weights()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_run_manifest(out_dir / "run_manifest.json", config, manifest, n)
    started = time.time()

    for epoch in range(start_epoch, end_epoch):
        perm = rng.permutation(n)
        sums = dict.fromkeys(LOSS_KEYS, 0.0)
        lr = config.lr
        for step in range(steps_per_epoch):
            rows = perm[step * config.batch_size : (step + 1) * config.batch_size]
            lr = lr_schedule(epoch * steps_per_epoch + step, total_steps, config.lr, config.warmup_frac)
            parts = _train_step(
                model, optimizer, x_all[rows], u_all[rows], weights,
                config.tau_max, rng, lr, tag=f"epoch {epoch} step {step}",
            )
            for key in LOSS_KEYS:
                sums[key] += parts[key]
        row = {"epoch": epoch, "lr": lr}
        row.update({key: sums[key] / steps_per_epoch for key in LOSS_KEYS})
        history.append(row)
        logger.info(
            "epoch %d/%d total %.4f recon %.4f kl %.3f sup %.5f cons %.4f hsic %.6f",
            epoch + 1, end_epoch, row["total"], row["recon"], row["kl"],
            row["sup"], row["cons"], row["hsic"],
        )
        if row["total"] < best_total:
            best_total = row["total"]
            save_checkpoint(out_dir / "checkpoint_best.json", model, optimizer, rng,
                            config, epoch + 1, best_total, obs_dim, history)

    save_checkpoint(out_dir / "checkpoint_final.json", model, optimizer, rng,
                    config, end_epoch, best_total, obs_dim, history)
    write_history(out_dir / "history.csv", history)
    logger.info("trained epochs %d..%d in %.1f s", start_epoch, end_epoch, time.time() - started)
    return model, history
