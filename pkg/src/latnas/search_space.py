"""Cell search space: DAG topology, discrete architectures, binary encoding.

The cell has two input nodes (in0, in1), three intermediate nodes (n0..n2)
and an implicit output node concatenating n0..n2. Nine candidate edges feed
the intermediate nodes; a discrete architecture retains exactly two incoming
edges per intermediate node, each carrying one non-Zero operation.
"""

import json
import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

OP_NAMES = (
    "Skip-Connect",
    "Conv-1x1",
    "EdgeConv",
    "MRConv",
    "GAT",
    "SemiGCN",
    "GIN",
    "SAGE",
    "RelSAGE",
    "Zero",
)
N_OPS = len(OP_NAMES)
ZERO_OP = 9
N_EDGES = 9
N_RETAINED = 6
EDGES_PER_NODE = 2


class ArchitectureError(ValueError):
    """A discrete architecture violates the cell constraints."""


class InvalidEncodingError(ValueError):
    """A 9x10 matrix is not a valid architecture encoding."""


@dataclass(frozen=True)
class EdgeId:
    index: int
    src: str
    dst: str


_EDGE_TABLE = (
    EdgeId(0, "in0", "n0"),
    EdgeId(1, "in1", "n0"),
    EdgeId(2, "in0", "n1"),
    EdgeId(3, "in1", "n1"),
    EdgeId(4, "n0", "n1"),
    EdgeId(5, "in0", "n2"),
    EdgeId(6, "in1", "n2"),
    EdgeId(7, "n0", "n2"),
    EdgeId(8, "n1", "n2"),
)

INTERMEDIATE_NODES = ("n0", "n1", "n2")
# incoming edge indices per intermediate node, in canonical order
NODE_INCOMING = {
    "n0": (0, 1),
    "n1": (2, 3, 4),
    "n2": (5, 6, 7, 8),
}
EDGE_DST = tuple(e.dst for e in _EDGE_TABLE)


def canonical_edges() -> tuple[EdgeId, ...]:
    """The fixed 9-entry edge table, stable across runs."""
    return _EDGE_TABLE


def _check_edges(edges) -> None:
    if len(edges) != N_RETAINED:
        raise ArchitectureError(f"expected {N_RETAINED} edges, got {len(edges)}")
    indices = [m for m, _ in edges]
    if indices != sorted(indices) or len(set(indices)) != len(indices):
        raise ArchitectureError("edges must be sorted by edge index, without repeats")
    for m, op in edges:
        if not 0 <= m < N_EDGES:
            raise ArchitectureError(f"edge index {m} out of range")
        if not 0 <= op < N_OPS:
            raise ArchitectureError(f"op index {op} out of range")
        if op == ZERO_OP:
            raise ArchitectureError(f"edge {m} carries the Zero op")
    for node, incoming in NODE_INCOMING.items():
        got = sum(1 for m, _ in edges if m in incoming)
        if got != EDGES_PER_NODE:
            raise ArchitectureError(
                f"node {node} has {got} retained incoming edges, needs {EDGES_PER_NODE}"
            )


@dataclass(frozen=True)
class Architecture:
    """Discrete cell: 6 retained (edge, op) pairs, sorted by edge index."""

    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        _check_edges(self.edges)

    def op_on(self, edge_index: int) -> int | None:
        for m, op in self.edges:
            if m == edge_index:
                return op
        return None


def encode(arch: Architecture) -> np.ndarray:
    """Binary 9x10 matrix with a 1 at (edge, op) for each retained edge."""
    bits = np.zeros((N_EDGES, N_OPS))
    for m, op in arch.edges:
        bits[m, op] = 1.0
    return bits


def decode(enc: np.ndarray) -> Architecture:
    """Inverse of encode; raises InvalidEncodingError on malformed input."""
    enc = np.asarray(enc)
    if enc.shape != (N_EDGES, N_OPS):
        raise InvalidEncodingError(f"expected shape (9, 10), got {enc.shape}")
    if not np.isin(enc, (0, 1)).all():
        raise InvalidEncodingError("entries must be 0 or 1")
    total = int(enc.sum())
    if total != N_RETAINED:
        raise InvalidEncodingError(f"expected {N_RETAINED} ones, got {total}")
    if (enc.sum(axis=1) > 1).any():
        raise InvalidEncodingError("a row has more than one op set")
    if enc[:, ZERO_OP].any():
        raise InvalidEncodingError("the Zero op column must stay empty")
    edges = []
    for m in range(N_EDGES):
        row = enc[m]
        if row.any():
            edges.append((m, int(np.argmax(row))))
    try:
        return Architecture(tuple(edges))
    except ArchitectureError as exc:
        raise InvalidEncodingError(str(exc)) from exc


def random_architecture(seed) -> Architecture:
    """Uniform draw: a uniform 2-subset of incoming edges per node, then a
    uniform non-Zero op per retained edge. Deterministic per seed."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    edges = []
    for node in INTERMEDIATE_NODES:
        incoming = NODE_INCOMING[node]
        subsets = list(combinations(incoming, EDGES_PER_NODE))
        chosen = subsets[rng.integers(len(subsets))]
        for m in chosen:
            edges.append((m, int(rng.integers(N_OPS - 1))))
    edges.sort()
    return Architecture(tuple(edges))


def count_cell_architectures(in_degrees, n_ops, retained_per_node=EDGES_PER_NODE) -> int:
    """Architecture count for a generic cell: choose `retained_per_node`
    incoming edges per node, one of `n_ops` ops per retained edge."""
    patterns = 1
    for d in in_degrees:
        patterns *= math.comb(d, retained_per_node)
    return patterns * n_ops ** (retained_per_node * len(in_degrees))


def count_edge_patterns() -> int:
    return count_cell_architectures((2, 3, 4), 1)


def count_architectures(zero_selectable: bool = True) -> int:
    """Size of the search space. With `zero_selectable` the Zero op counts as
    a choosable op on retained edges (the 18-million convention); without it
    only the 9 non-Zero ops count."""
    n_ops = N_OPS if zero_selectable else N_OPS - 1
    return count_cell_architectures((2, 3, 4), n_ops)


def architecture_to_json(arch: Architecture) -> dict:
    return {
        "edges": [
            {
                "edge": m,
                "src": _EDGE_TABLE[m].src,
                "dst": _EDGE_TABLE[m].dst,
                "op": op,
                "op_name": OP_NAMES[op],
            }
            for m, op in arch.edges
        ]
    }


def architecture_from_json(doc: dict) -> Architecture:
    try:
        edges = tuple(sorted((int(e["edge"]), int(e["op"])) for e in doc["edges"]))
    except (KeyError, TypeError) as exc:
        raise ArchitectureError(f"malformed architecture document: {exc}") from exc
    return Architecture(edges)


def save_architecture(arch: Architecture, path) -> None:
    with open(path, "w") as fh:
        json.dump(architecture_to_json(arch), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_architecture(path) -> Architecture:
    with open(path) as fh:
        return architecture_from_json(json.load(fh))


def encoding_to_bitstring(enc: np.ndarray) -> str:
    """Row-major 90-character bitstring (row 0 = edge 0, columns 0..9)."""
    flat = np.asarray(enc).ravel()
    return "".join("1" if v else "0" for v in flat)


def encoding_from_bitstring(bits: str) -> np.ndarray:
    if len(bits) != N_EDGES * N_OPS or set(bits) - {"0", "1"}:
        raise InvalidEncodingError("expected a 90-character bitstring of 0/1")
    flat = np.array([1.0 if c == "1" else 0.0 for c in bits])
    return flat.reshape(N_EDGES, N_OPS)
