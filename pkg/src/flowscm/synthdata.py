"""Synthetic tabular benchmark with known causal ground truth.

Root factors are drawn from declared 1-D distributions, child factors
follow closed-form mechanisms (a perspective projection and a product),
and the full factor vector is pushed through a fixed randomly
initialized 2-layer tanh mixer to produce the observation, plus a small
Gaussian noise. Everything is a pure function of (spec, seed, n): row i
of any run depends only on the seed and on i.

The default preset mirrors a light-filter scene: an object of a given
size at a given distance from a light casts a shadow whose size is the
projection size * L / (L - position), and the shadow's color is the
product of the filter and background albedos. Distances live well below
the light height L, and two factors are deliberately multimodal
(position bimodal, filter color three clusters) so marginal shape is
part of what a model must capture.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MANIFEST_VERSION = 1
_CALIBRATION_SEED = 987654321
_CALIBRATION_ROWS = 4096


class DatasetError(Exception):
    pass


@dataclass
class FactorSpec:
    """One root factor: gaussian or a 1-D Gaussian mixture."""

    name: str
    distribution: str
    params: dict

    def __post_init__(self):
        if self.distribution == "gaussian":
            needed = {"mean", "std"}
            if set(self.params) != needed:
                raise ValueError(f"{self.name}: gaussian needs {needed}, got {set(self.params)}")
            if self.params["std"] <= 0:
                raise ValueError(f"{self.name}: std must be positive")
        elif self.distribution == "mixture":
            needed = {"weights", "means", "stds"}
            if set(self.params) != needed:
                raise ValueError(f"{self.name}: mixture needs {needed}, got {set(self.params)}")
            w = np.asarray(self.params["weights"], dtype=np.float64)
            m = np.asarray(self.params["means"], dtype=np.float64)
            s = np.asarray(self.params["stds"], dtype=np.float64)
            if not (len(w) == len(m) == len(s)) or len(w) < 2:
                raise ValueError(f"{self.name}: mixture needs >= 2 aligned components")
            if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError(f"{self.name}: mixture weights must be positive and sum to 1")
            if np.any(s <= 0):
                raise ValueError(f"{self.name}: mixture stds must be positive")
        else:
            raise ValueError(f"{self.name}: unknown distribution {self.distribution!r}")

    def sample(self, uniforms: np.ndarray, normals: np.ndarray) -> np.ndarray:
        if self.distribution == "gaussian":
            return self.params["mean"] + self.params["std"] * normals
        w = np.cumsum(self.params["weights"])
        comp = np.searchsorted(w, uniforms, side="right").clip(0, len(w) - 1)
        means = np.asarray(self.params["means"])[comp]
        stds = np.asarray(self.params["stds"])[comp]
        return means + stds * normals


@dataclass
class MechanismSpec:
    """Closed-form child factor: name, mechanism kind, ordered parents."""

    name: str
    kind: str
    parents: list

    def __post_init__(self):
        arity = {"perspective_projection": 2, "product": 2}
        if self.kind not in arity:
            raise ValueError(f"{self.name}: unknown mechanism {self.kind!r}")
        if len(self.parents) != arity[self.kind]:
            raise ValueError(f"{self.name}: {self.kind} takes {arity[self.kind]} parents")


@dataclass
class GroundTruthScm:
    """Full generator spec: roots, mechanisms, and observation mixer."""

    preset: str
    factors: list
    mechanisms: list
    light_height: float = 3.0
    observation_dim: int = 20
    noise_sigma: float = 0.01
    mixer_hidden: int = 32

    def __post_init__(self):
        root_names = [f.name for f in self.factors]
        names = root_names + [m.name for m in self.mechanisms]
        if len(set(names)) != len(names):
            raise ValueError("factor names must be unique")
        known = set(root_names)
        for mech in self.mechanisms:
            missing = [p for p in mech.parents if p not in known]
            if missing:
                raise ValueError(f"{mech.name}: parents {missing} undefined or defined later")
            known.add(mech.name)
        if self.observation_dim < 1 or self.noise_sigma < 0:
            raise ValueError("observation_dim must be >= 1 and noise_sigma >= 0")

    @property
    def factor_names(self) -> list:
        return [f.name for f in self.factors] + [m.name for m in self.mechanisms]

    @property
    def edges(self) -> list:
        return [(p, m.name) for m in self.mechanisms for p in m.parents]

    def column(self, name: str) -> int:
        return self.factor_names.index(name)


def mechanism_value(spec: GroundTruthScm, mech: MechanismSpec, parent_cols) -> np.ndarray:
    if mech.kind == "perspective_projection":
        size, position = parent_cols
        if np.any(position >= spec.light_height):
            raise ValueError(
                f"{mech.name}: position >= light height {spec.light_height} (degenerate projection)"
            )
        return size * spec.light_height / (spec.light_height - position)
    if mech.kind == "product":
        a, b = parent_cols
        return a * b
    raise ValueError(f"unknown mechanism {mech.kind!r}")


def sample_factors(spec: GroundTruthScm, n: int, seed: int) -> np.ndarray:
    """Root factor matrix (n, n_roots); row i depends only on (seed, i)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    # separate substreams so row i is a pure function of (seed, i): a
    # shared stream would shift the normals' offset with n
    k = len(spec.factors)
    uniforms = np.random.default_rng([seed, 0x666163, 0]).random((n, k))
    normals = np.random.default_rng([seed, 0x666163, 1]).standard_normal((n, k))
    cols = [f.sample(uniforms[:, i], normals[:, i]) for i, f in enumerate(spec.factors)]
    return np.column_stack(cols)


def apply_mechanisms(spec: GroundTruthScm, roots: np.ndarray) -> np.ndarray:
    """Append child factor columns in declaration order."""
    if roots.ndim != 2 or roots.shape[1] != len(spec.factors):
        raise ValueError(f"roots shape {roots.shape} != (n, {len(spec.factors)})")
    table = {f.name: roots[:, i] for i, f in enumerate(spec.factors)}
    cols = list(roots.T)
    for mech in spec.mechanisms:
        value = mechanism_value(spec, mech, [table[p] for p in mech.parents])
        table[mech.name] = value
        cols.append(value)
    return np.column_stack(cols)


def _calibration_stats(spec: GroundTruthScm):
    """Fixed per-column standardization constants for the mixer input."""
    roots = sample_factors(spec, _CALIBRATION_ROWS, _CALIBRATION_SEED)
    full = apply_mechanisms(spec, roots)
    return full.mean(axis=0), full.std(axis=0) + 1e-12


def _mixer_weights(spec: GroundTruthScm, seed: int):
    """The mixer is keyed on the dataset seed: two datasets share an
    observation function iff they share a seed, and held-out records
    come from extending the row range (rows are pure in (seed, i))."""
    rng = np.random.default_rng([seed, 0x6d6978])
    k = len(spec.factor_names)
    w1 = rng.standard_normal((k, spec.mixer_hidden)) / np.sqrt(k)
    b1 = 0.1 * rng.standard_normal(spec.mixer_hidden)
    w2 = rng.standard_normal((spec.mixer_hidden, spec.observation_dim)) / np.sqrt(spec.mixer_hidden)
    return w1, b1, w2


def mix_to_observation(spec: GroundTruthScm, factors: np.ndarray, seed: int) -> np.ndarray:
    """Fixed 2-layer tanh mixer of all factors, plus observation noise."""
    if factors.ndim != 2 or factors.shape[1] != len(spec.factor_names):
        raise ValueError(f"factors shape {factors.shape} != (n, {len(spec.factor_names)})")
    mu0, s0 = _calibration_stats(spec)
    w1, b1, w2 = _mixer_weights(spec, seed)
    h = np.tanh(((factors - mu0) / s0) @ w1 + b1)
    clean = h @ w2
    noise_rng = np.random.default_rng([seed, 0x6e6f69])
    return clean + spec.noise_sigma * noise_rng.standard_normal(clean.shape)


def generate(spec: GroundTruthScm, n: int, seed: int, skip: int = 0):
    """Full dataset: observations (n, obs_dim) and labels (n, n_factors).

    skip drops the first rows of the stream. Rows are pure in
    (seed, index), so a skipped range is a held-out set disjoint from
    the prefix while sharing the seed's observation mixer.
    """
    if skip < 0:
        raise ValueError(f"skip must be >= 0, got {skip}")
    roots = sample_factors(spec, skip + n, seed)
    factors = apply_mechanisms(spec, roots)
    x = mix_to_observation(spec, factors, seed)
    return x[skip:], factors[skip:]


# -- presets --------------------------------------------------------------
def filter_lite(observation_dim: int = 20, noise_sigma: float = 0.01) -> GroundTruthScm:
    return GroundTruthScm(
        preset="filter_lite",
        factors=[
            FactorSpec("size", "gaussian", {"mean": 1.0, "std": 0.15}),
            FactorSpec(
                "position",
                "mixture",
                {"weights": [0.5, 0.5], "means": [1.1, 1.8], "stds": [0.05, 0.05]},
            ),
            FactorSpec(
                "filter_color",
                "mixture",
                {
                    "weights": [1 / 3, 1 / 3, 1 / 3],
                    "means": [0.2, 0.5, 0.8],
                    "stds": [0.05, 0.05, 0.05],
                },
            ),
            FactorSpec("background_color", "gaussian", {"mean": 0.5, "std": 0.15}),
        ],
        mechanisms=[
            MechanismSpec("shadow_size", "perspective_projection", ["size", "position"]),
            MechanismSpec("shadow_color", "product", ["filter_color", "background_color"]),
        ],
        observation_dim=observation_dim,
        noise_sigma=noise_sigma,
    )


def filter_mini(observation_dim: int = 10, noise_sigma: float = 0.01) -> GroundTruthScm:
    """Three-factor cut of the default preset, for fast ablation runs."""
    return GroundTruthScm(
        preset="filter_mini",
        factors=[
            FactorSpec("size", "gaussian", {"mean": 1.0, "std": 0.15}),
            FactorSpec(
                "position",
                "mixture",
                {"weights": [0.5, 0.5], "means": [1.1, 1.8], "stds": [0.05, 0.05]},
            ),
        ],
        mechanisms=[
            MechanismSpec("shadow_size", "perspective_projection", ["size", "position"]),
        ],
        observation_dim=observation_dim,
        noise_sigma=noise_sigma,
    )


PRESETS = {"filter_lite": filter_lite, "filter_mini": filter_mini}


def preset_scm(name: str, observation_dim=None, noise_sigma=None) -> GroundTruthScm:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    kwargs = {}
    if observation_dim is not None:
        kwargs["observation_dim"] = observation_dim
    if noise_sigma is not None:
        kwargs["noise_sigma"] = noise_sigma
    return PRESETS[name](**kwargs)


# -- on-disk format ---------------------------------------------------------
def manifest_path(data_path) -> Path:
    p = Path(data_path)
    if p.suffix == ".jsonl":
        return p.with_suffix(".manifest.json")
    return Path(str(p) + ".manifest.json")


def write_dataset(path, x: np.ndarray, u: np.ndarray, spec: GroundTruthScm, seed: int) -> None:
    """JSON Lines records {"x": [...], "u": [...]} plus a sidecar manifest."""
    path = Path(path)
    if x.shape[0] != u.shape[0]:
        raise ValueError(f"x has {x.shape[0]} rows but u has {u.shape[0]}")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for i in range(x.shape[0]):
            fh.write(json.dumps({"x": x[i].tolist(), "u": u[i].tolist()}) + "\n")
    manifest = {
        "version": MANIFEST_VERSION,
        "preset": spec.preset,
        "factors": spec.factor_names,
        "edges": [list(e) for e in spec.edges],
        "n": int(x.shape[0]),
        "seed": int(seed),
        "observation_dim": int(spec.observation_dim),
        "noise_sigma": float(spec.noise_sigma),
        "light_height": float(spec.light_height),
    }
    with open(manifest_path(path), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def read_dataset(path):
    """Load (x, u, manifest); malformed lines are reported by index."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    mpath = manifest_path(path)
    if not mpath.exists():
        raise DatasetError(f"manifest not found: {mpath}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {manifest.get('version')!r}")
    xs, us = [], []
    n_factors = len(manifest["factors"])
    obs_dim = manifest["observation_dim"]
    with open(path) as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                raise DatasetError(f"line {i}: empty record")
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise DatasetError(f"line {i}: invalid JSON ({err.msg})") from None
            if not isinstance(rec, dict) or "x" not in rec or "u" not in rec:
                raise DatasetError(f"line {i}: record must have 'x' and 'u'")
            if len(rec["x"]) != obs_dim:
                raise DatasetError(f"line {i}: x has {len(rec['x'])} values, expected {obs_dim}")
            if len(rec["u"]) != n_factors:
                raise DatasetError(f"line {i}: u has {len(rec['u'])} values, expected {n_factors}")
            xs.append(rec["x"])
            us.append(rec["u"])
    if not xs:
        raise DatasetError("dataset is empty")
    return np.asarray(xs, dtype=np.float64), np.asarray(us, dtype=np.float64), manifest
