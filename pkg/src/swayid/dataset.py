"""Labeled corpus generation: sampling, stability filter, enrichment,
target normalization, train/validation split, and disk format.

Each candidate index owns a child seed derived from (master_seed, index),
so generation is reproducible and independent of worker count. Accepted
records are the stable simulations plus, for every accepted sample whose
peak sway exceeds the enrichment gate, one perturbed re-simulated copy
(kept only if itself stable).
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import features, stimulus
from .dynamics import BodyParams, DecParams, PARAM_NAMES, SimConfig, pink_noise, simulate
from .errors import ConfigError, InputFormatError

STABILITY_LIMIT = math.radians(5.0)
ENRICH_GATE = 0.05
ENRICH_FRACTION = 0.05  # each parameter moves by uniform +-5% of its range

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ParamRanges:
    """Per-parameter uniform sampling bounds (min, max)."""

    kp: tuple = (503.3943, 1258.4857)
    kd: tuple = (125.8486, 377.5457)
    kp_pass: tuple = (62.9243, 377.5457)
    kd_pass: tuple = (62.9243, 188.7729)
    nv: tuple = (0.0, 1.0)
    theta: tuple = (0.0, 0.0052)
    delta: tuple = (0.0, 0.24)

    def __post_init__(self):
        for name in PARAM_NAMES:
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"range for {name} has min > max")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in PARAM_NAMES])

    def clamp(self, values: np.ndarray) -> np.ndarray:
        bounds = self.as_array()
        return np.clip(values, bounds[:, 0], bounds[:, 1])

    def midpoint(self) -> DecParams:
        bounds = self.as_array()
        return DecParams.from_array(bounds.mean(axis=1))


def sample_params(ranges: ParamRanges, rng: np.random.Generator) -> DecParams:
    """Independent uniform draw of each parameter from its bounds."""
    bounds = ranges.as_array()
    values = rng.uniform(bounds[:, 0], bounds[:, 1])
    return DecParams.from_array(values)


def is_stable(trace: np.ndarray, limit: float = STABILITY_LIMIT) -> bool:
    """True iff the trace is finite everywhere and stays below the sway limit."""
    trace = np.asarray(trace)
    if not np.all(np.isfinite(trace)):
        return False
    return bool(np.max(np.abs(trace)) < limit)


def enrich(
    params: DecParams,
    trace: np.ndarray,
    ranges: ParamRanges,
    rng: np.random.Generator,
    gate: float = ENRICH_GATE,
    fraction: float = ENRICH_FRACTION,
):
    """Perturbed copy of a large-sway sample, or None below the gate.

    Each parameter shifts by uniform +-fraction of its range width (a
    total window of 2*fraction), clamped to the bounds.
    """
    if np.max(np.abs(trace)) <= gate:
        return None
    bounds = ranges.as_array()
    width = bounds[:, 1] - bounds[:, 0]
    shift = rng.uniform(-fraction, fraction, size=len(PARAM_NAMES)) * width
    return DecParams.from_array(ranges.clamp(params.as_array() + shift))


@dataclass(frozen=True)
class NormStats:
    """Per-parameter z-scoring statistics, computed on the training half."""

    mean: tuple
    std: tuple

    def __post_init__(self):
        if any(s <= 0 for s in self.std):
            raise ConfigError("degenerate parameter statistics: zero std")

    @classmethod
    def from_params(cls, raw: np.ndarray) -> "NormStats":
        raw = np.asarray(raw, dtype=np.float64)
        mean = raw.mean(axis=0)
        std = raw.std(axis=0)
        return cls(tuple(mean.tolist()), tuple(std.tolist()))

    def to_dict(self):
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["mean"]), tuple(d["std"]))


def normalize_targets(params, stats: NormStats) -> np.ndarray:
    """z = (p - mean) / std per dimension."""
    values = params.as_array() if isinstance(params, DecParams) else np.asarray(params)
    return (values - np.asarray(stats.mean)) / np.asarray(stats.std)


def denormalize_targets(z, stats: NormStats) -> DecParams:
    """Exact inverse of normalize_targets."""
    values = np.asarray(z) * np.asarray(stats.std) + np.asarray(stats.mean)
    return DecParams.from_array(values)


@dataclass(frozen=True)
class GenConfig:
    """Everything build_dataset needs besides the target count."""

    ranges: ParamRanges = field(default_factory=ParamRanges)
    body: BodyParams = field(default_factory=BodyParams)
    prts: stimulus.PrtsConfig = field(default_factory=stimulus.PrtsConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    stability_limit: float = STABILITY_LIMIT
    enrich_gate: float = ENRICH_GATE
    enrich_fraction: float = ENRICH_FRACTION
    log_modulus_inputs: bool = False
    max_attempt_factor: int = 200

    def to_dict(self):
        return {
            "ranges": {n: list(getattr(self.ranges, n)) for n in PARAM_NAMES},
            "body": vars(self.body).copy(),
            "prts": {
                "register_length": self.prts.register_length,
                "stage_duration": self.prts.stage_duration,
                "peak_to_peak": self.prts.peak_to_peak,
                "repetitions": self.prts.repetitions,
            },
            "sim": {
                "dt": self.sim.dt,
                "output_dt": self.sim.output_dt,
                "duration": self.sim.duration,
                "g_gain": self.sim.g_gain,
                "noise_scale": self.sim.noise_scale,
                "noise_in_gravity": self.sim.noise_in_gravity,
            },
            "stability_limit": self.stability_limit,
            "enrich_gate": self.enrich_gate,
            "enrich_fraction": self.enrich_fraction,
            "log_modulus_inputs": self.log_modulus_inputs,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            ranges=ParamRanges(**{k: tuple(v) for k, v in d["ranges"].items()}),
            body=BodyParams(**d["body"]),
            prts=stimulus.PrtsConfig(**d["prts"]),
            sim=SimConfig(**d["sim"]),
            stability_limit=d["stability_limit"],
            enrich_gate=d["enrich_gate"],
            enrich_fraction=d["enrich_fraction"],
            log_modulus_inputs=d.get("log_modulus_inputs", False),
        )


@dataclass
class Record:
    candidate_index: int
    enriched: bool
    params: DecParams
    peak_abs_sway: float
    peak_to_peak_sway: float
    image: np.ndarray  # float32 (110, 110, 2)


@dataclass
class Dataset:
    """In-memory corpus plus normalization statistics and provenance."""

    images: np.ndarray  # (n, 110, 110, 2) float32
    raw_params: np.ndarray  # (n, 7) float64
    targets: np.ndarray  # (n, 7) float64, z-scored
    candidate_index: np.ndarray  # (n,) int64
    enriched: np.ndarray  # (n,) bool
    peak_abs_sway: np.ndarray  # (n,) float64
    peak_to_peak_sway: np.ndarray  # (n,) float64
    split: np.ndarray  # (n,) "train" / "val"
    param_stats: NormStats
    input_stats: features.InputStats
    config: dict
    master_seed: int

    def __len__(self):
        return self.images.shape[0]

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    @property
    def train_indices(self):
        return self.indices("train")

    @property
    def val_indices(self):
        return self.indices("val")

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        images.tofile(os.path.join(out_dir, "images.bin"))
        manifest = {
            "format_version": FORMAT_VERSION,
            "master_seed": self.master_seed,
            "config": self.config,
            "param_stats": self.param_stats.to_dict(),
            "input_stats": self.input_stats.to_dict(),
            "tensor": {
                "file": "images.bin",
                "dtype": "float32",
                "shape": list(images.shape),
                "order": "row-major",
            },
            "records": [
                {
                    "id": i,
                    "candidate_index": int(self.candidate_index[i]),
                    "enriched": bool(self.enriched[i]),
                    "peak_abs_sway": float(self.peak_abs_sway[i]),
                    "peak_to_peak_sway": float(self.peak_to_peak_sway[i]),
                    "split": str(self.split[i]),
                }
                for i in range(len(self))
            ],
        }
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        cols = (
            ["id", "candidate_index", "enriched", "split", "peak_abs_sway",
             "peak_to_peak_sway"]
            + list(PARAM_NAMES)
            + [f"z_{n}" for n in PARAM_NAMES]
        )
        with open(os.path.join(out_dir, "params.csv"), "w") as fh:
            fh.write(",".join(cols) + "\n")
            for i in range(len(self)):
                row = [
                    str(i),
                    str(int(self.candidate_index[i])),
                    str(int(self.enriched[i])),
                    str(self.split[i]),
                    "%.17g" % self.peak_abs_sway[i],
                    "%.17g" % self.peak_to_peak_sway[i],
                ]
                row += ["%.17g" % v for v in self.raw_params[i]]
                row += ["%.17g" % v for v in self.targets[i]]
                fh.write(",".join(row) + "\n")

    @classmethod
    def load(cls, in_dir, mmap: bool = False) -> "Dataset":
        try:
            with open(os.path.join(in_dir, "manifest.json")) as fh:
                manifest = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputFormatError(f"{in_dir}: cannot read dataset manifest: {exc}")
        if manifest.get("format_version") != FORMAT_VERSION:
            raise InputFormatError(f"{in_dir}: unsupported dataset format version")
        shape = tuple(manifest["tensor"]["shape"])
        path = os.path.join(in_dir, manifest["tensor"]["file"])
        if mmap:
            images = np.memmap(path, dtype=np.float32, mode="r", shape=shape)
        else:
            images = np.fromfile(path, dtype=np.float32).reshape(shape)
        csv = np.genfromtxt(
            os.path.join(in_dir, "params.csv"),
            delimiter=",",
            names=True,
            dtype=None,
            encoding="utf-8",
        )
        csv = np.atleast_1d(csv)
        n = shape[0]
        if csv.shape[0] != n or len(manifest["records"]) != n:
            raise InputFormatError(f"{in_dir}: manifest, csv and tensor disagree")
        raw = np.stack([csv[name] for name in PARAM_NAMES], axis=1).astype(np.float64)
        targets = np.stack([csv[f"z_{name}"] for name in PARAM_NAMES], axis=1).astype(np.float64)
        return cls(
            images=images,
            raw_params=raw,
            targets=targets,
            candidate_index=csv["candidate_index"].astype(np.int64),
            enriched=csv["enriched"].astype(bool),
            peak_abs_sway=csv["peak_abs_sway"].astype(np.float64),
            peak_to_peak_sway=csv["peak_to_peak_sway"].astype(np.float64),
            split=csv["split"].astype(str),
            param_stats=NormStats.from_dict(manifest["param_stats"]),
            input_stats=features.InputStats.from_dict(manifest["input_stats"]),
            config=manifest["config"],
            master_seed=manifest["master_seed"],
        )


def _candidate_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=master_seed, spawn_key=(0, index))


def _simulate_candidate(index, master_seed, gen: GenConfig, tilt) -> list:
    """Process one candidate index: base sample plus optional enrichment."""
    rng = np.random.default_rng(_candidate_seed(master_seed, index))
    params = sample_params(gen.ranges, rng)
    n = gen.sim.n_steps
    noise_seed = int(rng.integers(0, 2**63 - 1))
    noise = _noise_for(params, gen.sim, n, noise_seed)
    trace = simulate(params, gen.body, tilt, gen.sim, noise=noise,
                     abort_above=gen.stability_limit)
    out = []
    if is_stable(trace, gen.stability_limit):
        out.append(_make_record(index, False, params, trace))
        perturbed = enrich(params, trace, gen.ranges, rng,
                           gate=gen.enrich_gate, fraction=gen.enrich_fraction)
        if perturbed is not None:
            noise_seed2 = int(rng.integers(0, 2**63 - 1))
            noise2 = _noise_for(perturbed, gen.sim, n, noise_seed2)
            trace2 = simulate(perturbed, gen.body, tilt, gen.sim, noise=noise2,
                              abort_above=gen.stability_limit)
            if is_stable(trace2, gen.stability_limit):
                out.append(_make_record(index, True, perturbed, trace2))
    return out


def _noise_for(params: DecParams, sim: SimConfig, n: int, seed: int):
    if params.nv > 0 and sim.noise_scale != 0:
        return pink_noise(params.nv * sim.noise_scale, n, sim.dt, seed)
    return np.zeros(n)


def _make_record(index, enriched, params, trace) -> Record:
    image = features.encode(trace).astype(np.float32)
    return Record(index, enriched, params, float(np.max(np.abs(trace))),
                  float(trace.max() - trace.min()), image)


class _Runner:
    """Picklable candidate worker bound to one generation setup."""

    def __init__(self, master_seed, gen, tilt):
        self.master_seed = master_seed
        self.gen = gen
        self.tilt = tilt

    def __call__(self, index):
        return _simulate_candidate(index, self.master_seed, self.gen, self.tilt)


def build_dataset(
    target_count: int,
    gen: GenConfig,
    master_seed: int,
    workers: int = 1,
    progress=None,
) -> Dataset:
    """Generate exactly target_count accepted records, deterministically.

    Candidates are processed in index order; the accepted set is the
    records of the first indices whose cumulative yield reaches
    target_count (trimmed to the exact count), so the result does not
    depend on worker scheduling. Records are then shuffled with a seed
    derived from master_seed and split into equal train/validation halves;
    normalization statistics come from the training half only.
    """
    if target_count < 2 or target_count % 2 != 0:
        raise ConfigError("target_count must be even and >= 2")
    tilt = stimulus.generate_prts(gen.prts, gen.sim.dt)
    runner = _Runner(master_seed, gen, tilt)
    max_attempts = max(1000, gen.max_attempt_factor * target_count)

    records: list[Record] = []
    attempted = 0
    chunk = max(32, 4 * workers)
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        while len(records) < target_count:
            if attempted >= max_attempts:
                rate = len(records) / attempted if attempted else 0.0
                raise ConfigError(
                    f"dataset generation exhausted {attempted} candidates with "
                    f"acceptance rate {rate:.3f} before reaching {target_count} records"
                )
            indices = range(attempted, min(attempted + chunk, max_attempts))
            if pool is not None:
                results = list(pool.map(runner, indices, chunksize=8))
            else:
                results = [runner(i) for i in indices]
            attempted += len(indices)
            for res in results:
                records.extend(res)
                if len(records) >= target_count:
                    break
            if progress is not None:
                progress(len(records), attempted)
    finally:
        if pool is not None:
            pool.shutdown()
    records = records[:target_count]

    order = np.random.default_rng(
        np.random.SeedSequence(entropy=master_seed, spawn_key=(1,))
    ).permutation(target_count)
    records = [records[i] for i in order]

    half = target_count // 2
    split = np.array(["train"] * half + ["val"] * (target_count - half))
    raw = np.stack([r.params.as_array() for r in records])
    images = np.stack([r.image for r in records])
    param_stats = NormStats.from_params(raw[:half])
    targets = (raw - np.asarray(param_stats.mean)) / np.asarray(param_stats.std)
    input_stats = features.compute_input_stats(images[:half],
                                               log_modulus=gen.log_modulus_inputs)
    return Dataset(
        images=images,
        raw_params=raw,
        targets=targets,
        candidate_index=np.array([r.candidate_index for r in records], dtype=np.int64),
        enriched=np.array([r.enriched for r in records], dtype=bool),
        peak_abs_sway=np.array([r.peak_abs_sway for r in records]),
        peak_to_peak_sway=np.array([r.peak_to_peak_sway for r in records]),
        split=split,
        param_stats=param_stats,
        input_stats=input_stats,
        config=gen.to_dict(),
        master_seed=master_seed,
    )


def resimulate_record(ds: Dataset, record_id: int) -> np.ndarray:
    """Regenerate the sway trace behind a record from its stored seed."""
    gen = GenConfig.from_dict(ds.config)
    index = int(ds.candidate_index[record_id])
    rng = np.random.default_rng(_candidate_seed(ds.master_seed, index))
    params = sample_params(gen.ranges, rng)
    tilt = stimulus.generate_prts(gen.prts, gen.sim.dt)
    n = gen.sim.n_steps
    noise_seed = int(rng.integers(0, 2**63 - 1))
    if not ds.enriched[record_id]:
        noise = _noise_for(params, gen.sim, n, noise_seed)
        return simulate(params, gen.body, tilt, gen.sim, noise=noise)
    trace = simulate(params, gen.body, tilt, gen.sim,
                     noise=_noise_for(params, gen.sim, n, noise_seed),
                     abort_above=gen.stability_limit)
    perturbed = enrich(params, trace, gen.ranges, rng,
                       gate=gen.enrich_gate, fraction=gen.enrich_fraction)
    noise_seed2 = int(rng.integers(0, 2**63 - 1))
    noise2 = _noise_for(perturbed, gen.sim, n, noise_seed2)
    return simulate(perturbed, gen.body, tilt, gen.sim, noise=noise2)
