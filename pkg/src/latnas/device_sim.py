"""Simulated target device and latency dataset generation.

The simulator is deliberately non-additive in per-op costs: each node pays
the max of its two edge costs plus a fraction of the min (partial overlap),
and heavy ops contend pairwise. Summing a per-op lookup table is therefore a
biased estimator of the simulated latency, which is the point.
"""

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from .search_space import (
    Architecture,
    EDGE_DST,
    INTERMEDIATE_NODES,
    N_OPS,
    OP_NAMES,
    ZERO_OP,
    encode,
    encoding_from_bitstring,
    encoding_to_bitstring,
    decode,
    random_architecture,
)

DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class DeviceModel:
    """Cost model of the simulated inference device (all times in ms)."""

    base_cost_ms: tuple[float, ...]
    fixed_overhead_ms: float
    overlap_gamma: float
    heavy_threshold_ms: float
    contention_kappa: float
    cells: int
    noise_sigma_ms: float

    def __post_init__(self):
        if len(self.base_cost_ms) != N_OPS:
            raise ValueError(f"base_cost_ms needs {N_OPS} entries")
        if self.base_cost_ms[ZERO_OP] != 0.0:
            raise ValueError("Zero op must cost 0")
        if not 0.0 <= self.overlap_gamma <= 1.0:
            raise ValueError("overlap_gamma must lie in [0, 1]")
        if self.noise_sigma_ms < 0.0:
            raise ValueError("noise_sigma_ms must be >= 0")
        skip, conv = self.base_cost_ms[0], self.base_cost_ms[1]
        gcn = [self.base_cost_ms[i] for i in (2, 3, 4, 5, 6, 7, 8)]
        if not skip < conv < min(gcn):
            raise ValueError("cost order must be Skip < Conv-1x1 < GCN-style ops")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "DeviceModel":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown device field(s): {sorted(unknown)}")
        doc = dict(doc)
        doc["base_cost_ms"] = tuple(doc["base_cost_ms"])
        return cls(**doc)

    def with_noise(self, sigma: float) -> "DeviceModel":
        doc = self.to_json()
        doc["noise_sigma_ms"] = sigma
        return DeviceModel.from_json(doc)


# Calibrated so that over 10k uniform samples latency spans roughly 5.6-5.8 ms
# at the low end and 21.8-21.9 ms at the top (mean ~16, sd ~2.5). The cost
# ladder is deliberately bimodal: Skip/Conv sit clearly below the population
# mean and every GCN-style op clearly above it, with pairwise contention among
# the GCN band carrying most of the high tail.
_DEFAULT_BASE = (0.30, 0.38, 0.763, 0.78, 0.747, 0.68, 0.713, 0.697, 0.73, 0.0)


def default_device() -> DeviceModel:
    return DeviceModel(
        base_cost_ms=_DEFAULT_BASE,
        fixed_overhead_ms=0.8,
        overlap_gamma=0.6,
        heavy_threshold_ms=0.66,
        contention_kappa=0.22,
        cells=3,
        noise_sigma_ms=0.05,
    )


def load_device(path) -> DeviceModel:
    with open(path) as fh:
        return DeviceModel.from_json(json.load(fh))


def simulate_latency(arch: Architecture, dev: DeviceModel, noise_seed: int = 0) -> float:
    """Latency in ms for one architecture; deterministic per noise_seed."""
    node_cost = 0.0
    retained_costs = []
    per_node: dict[str, list[float]] = {n: [] for n in INTERMEDIATE_NODES}
    for m, op in arch.edges:
        c = dev.base_cost_ms[op]
        per_node[EDGE_DST[m]].append(c)
        retained_costs.append(c)
    for node in INTERMEDIATE_NODES:
        c1, c2 = per_node[node]
        node_cost += max(c1, c2) + dev.overlap_gamma * min(c1, c2)
    heavy = sum(1 for c in retained_costs if c >= dev.heavy_threshold_ms)
    contention = dev.contention_kappa * heavy * (heavy - 1) / 2
    latency = dev.fixed_overhead_ms + dev.cells * node_cost + dev.cells * contention
    if dev.noise_sigma_ms > 0.0:
        rng = np.random.default_rng(noise_seed)
        latency += dev.noise_sigma_ms * rng.standard_normal()
    return float(latency)


@dataclass
class LatencySample:
    encoding: np.ndarray
    latency_ms: float


@dataclass
class LatencyDataset:
    samples: list[LatencySample]
    split: list[str]
    mu_train: float
    sigma_train: float
    device: DeviceModel
    seed: int
    _matrices: dict = field(default_factory=dict, repr=False)

    def indices(self, split: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.split) if s == split], dtype=int)

    def matrix(self, split: str):
        """(X, y) with X the n x 90 stacked encodings, y latencies in ms."""
        if split not in self._matrices:
            idx = self.indices(split)
            X = np.stack([self.samples[i].encoding.ravel() for i in idx])
            y = np.array([self.samples[i].latency_ms for i in idx])
            self._matrices[split] = (X, y)
        return self._matrices[split]


def _sample_seeds(seed: int, index: int) -> tuple[int, int]:
    # per-sample seed derivation keeps generation order-independent
    state = np.random.SeedSequence(entropy=seed, spawn_key=(index,)).generate_state(2)
    return int(state[0]), int(state[1])


def _generate_range(args) -> list[tuple[str, float]]:
    seed, start, stop, dev_doc = args
    dev = DeviceModel.from_json(dev_doc)
    out = []
    for i in range(start, stop):
        arch_seed, noise_seed = _sample_seeds(seed, i)
        arch = random_architecture(arch_seed)
        lat = simulate_latency(arch, dev, noise_seed)
        out.append((encoding_to_bitstring(encode(arch)), lat))
    return out


def generate_dataset(n: int, dev: DeviceModel, seed: int, jobs: int = 1) -> LatencyDataset:
    """n i.i.d. (architecture, latency) samples with a 60/20/20 split.

    Identical output for any `jobs` value: every sample is seeded from the
    dataset seed and its own index.
    """
    if n < 10:
        raise ValueError("need at least 10 samples to split 60/20/20")
    dev_doc = dev.to_json()
    if jobs > 1:
        bounds = np.linspace(0, n, jobs + 1, dtype=int)
        chunks = [(seed, int(a), int(b), dev_doc) for a, b in zip(bounds[:-1], bounds[1:])]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_generate_range, chunks))
        raw = [rec for part in parts for rec in part]
    else:
        raw = _generate_range((seed, 0, n, dev_doc))
    samples = [LatencySample(encoding_from_bitstring(bits), lat) for bits, lat in raw]

    split_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(n,)))
    order = split_rng.permutation(n)
    n_train = int(round(n * 0.6))
    n_val = int(round(n * 0.2))
    split = [""] * n
    for pos, i in enumerate(order):
        if pos < n_train:
            split[i] = "train"
        elif pos < n_train + n_val:
            split[i] = "val"
        else:
            split[i] = "test"

    train_lat = np.array([s.latency_ms for s, tag in zip(samples, split) if tag == "train"])
    mu = float(train_lat.mean())
    sigma = float(train_lat.std())
    return LatencyDataset(samples, split, mu, sigma, dev, seed)


def save_dataset(ds: LatencyDataset, path) -> None:
    """JSON-lines: header record, then one record per sample."""
    header = {
        "version": DATASET_FORMAT_VERSION,
        "mu": ds.mu_train,
        "sigma": ds.sigma_train,
        "device": ds.device.to_json(),
        "seed": ds.seed,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for sample, tag in zip(ds.samples, ds.split):
            rec = {
                "enc": encoding_to_bitstring(sample.encoding),
                "lat_ms": sample.latency_ms,
                "split": tag,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_dataset(path) -> LatencyDataset:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    for key in ("mu", "sigma", "device", "seed"):
        if key not in header:
            raise ValueError(f"{path}: dataset header misses field '{key}'")
    samples, split = [], []
    for ln in lines[1:]:
        rec = json.loads(ln)
        samples.append(LatencySample(encoding_from_bitstring(rec["enc"]), float(rec["lat_ms"])))
        if rec["split"] not in ("train", "val", "test"):
            raise ValueError(f"{path}: bad split tag {rec['split']!r}")
        split.append(rec["split"])
    return LatencyDataset(
        samples,
        split,
        float(header["mu"]),
        float(header["sigma"]),
        DeviceModel.from_json(header["device"]),
        int(header["seed"]),
    )


def mean_op_cost(arch: Architecture, dev: DeviceModel) -> float:
    """Average base cost of the six retained ops (complexity proxy)."""
    return float(np.mean([dev.base_cost_ms[op] for _, op in arch.edges]))
