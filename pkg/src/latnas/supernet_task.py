"""Synthetic classification task and the differentiable supernet.

The ten candidate operations are toy numeric transforms on a capacity
ladder: Zero outputs zeros, Skip-Connect is the identity, Conv-1x1 is one
linear map, and the GCN-labelled ops are stacks of 1..3 linear+tanh blocks
(deeper along the simulated-cost ladder). The task is a 4-class antipodal
Gaussian mixture: each class occupies two opposite clusters, so a linear
model sits near chance while tanh stacks separate it, giving the search a
real accuracy-latency trade-off.
"""

import json
from dataclasses import dataclass

import numpy as np

from .constraint import AlphaMatrix, softmax_rows
from .search_space import (
    Architecture,
    EDGE_DST,
    INTERMEDIATE_NODES,
    N_EDGES,
    N_OPS,
    NODE_INCOMING,
    ZERO_OP,
    canonical_edges,
)

SKIP_OP = 0
CONV_OP = 1
# blocks of linear+tanh per ladder op; capacity tracks the simulated cost
OP_NUM_BLOCKS = {5: 1, 7: 1, 6: 2, 8: 2, 4: 3, 2: 3, 3: 3}

_EDGE_SRC = tuple(e.src for e in canonical_edges())


@dataclass(frozen=True)
class SyntheticTask:
    dim: int = 8
    classes: int = 4
    n_train: int = 2000
    n_val: int = 1000
    seed: int = 0
    radius: float = 2.0
    noise: float = 0.7
    warp_layers: int = 3
    warp_amp: float = 1.0
    warp_gain: float = 1.5

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.classes > self.dim:
            raise ValueError("class directions need classes <= dim")

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "classes": self.classes,
            "n_train": self.n_train,
            "n_val": self.n_val,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SyntheticTask":
        known = {"dim", "classes", "n_train", "n_val", "seed"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown task field(s): {sorted(unknown)}")
        return cls(**doc)


def load_task(path) -> SyntheticTask:
    with open(path) as fh:
        return SyntheticTask.from_json(json.load(fh))


def make_task_data(task: SyntheticTask):
    """(X_train, y_train, X_val, y_val), fixed per task seed.

    Each class occupies two opposite Gaussian clusters along an orthonormal
    axis, then the features pass through a stack of random residual tanh
    distortions. The antipodal pairing keeps a linear model near chance and
    the deep distortion rewards nonlinear capacity.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=task.seed, spawn_key=(0,)))
    basis, _ = np.linalg.qr(rng.standard_normal((task.dim, task.dim)))
    directions = basis[:, : task.classes]  # orthonormal class axes
    warps = [np.linalg.qr(rng.standard_normal((task.dim, task.dim)))[0]
             for _ in range(task.warp_layers)]

    def draw(n):
        y = rng.integers(0, task.classes, size=n)
        sign = rng.choice((-1.0, 1.0), size=n)
        X = sign[:, None] * task.radius * directions[:, y].T
        X = X + task.noise * rng.standard_normal((n, task.dim))
        for R in warps:
            X = X + task.warp_amp * np.tanh(task.warp_gain * (X @ R.T))
        return X, y

    X_train, y_train = draw(task.n_train)
    X_val, y_val = draw(task.n_val)
    return X_train, y_train, X_val, y_val


class SupernetWeights:
    """Per-(edge, op) parameter blocks plus the classifier head.

    Zero and Skip-Connect carry no parameters; Conv-1x1 one linear map;
    ladder ops lists of (W, b) linear+tanh blocks.
    """

    def __init__(self, edge_params: list[dict[int, list]], head_W, head_b, dim: int):
        self.edge_params = edge_params
        self.head_W = head_W
        self.head_b = head_b
        self.dim = dim

    def copy(self) -> "SupernetWeights":
        edges = [
            {op: [(W.copy(), None if b is None else b.copy()) for W, b in blocks]
             for op, blocks in per_edge.items()}
            for per_edge in self.edge_params
        ]
        return SupernetWeights(edges, self.head_W.copy(), self.head_b.copy(), self.dim)

    def flat_items(self):
        """Deterministic (key, array) iteration over every parameter."""
        for e, per_edge in enumerate(self.edge_params):
            for op in sorted(per_edge):
                for k, (W, b) in enumerate(per_edge[op]):
                    yield (e, op, k, "W"), W
                    if b is not None:
                        yield (e, op, k, "b"), b
        yield ("head", "W"), self.head_W
        yield ("head", "b"), self.head_b


def init_supernet(task: SyntheticTask, seed) -> SupernetWeights:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d = task.dim
    scale = 1.0 / np.sqrt(d)
    edge_params = []
    for _ in range(N_EDGES):
        per_edge: dict[int, list] = {}
        per_edge[CONV_OP] = [(rng.standard_normal((d, d)) * scale, None)]
        for op, k in sorted(OP_NUM_BLOCKS.items()):
            per_edge[op] = [(rng.standard_normal((d, d)) * scale, np.zeros(d))
                            for _ in range(k)]
        edge_params.append(per_edge)
    head_W = rng.standard_normal((task.classes, 3 * d)) * (1.0 / np.sqrt(3 * d))
    head_b = np.zeros(task.classes)
    return SupernetWeights(edge_params, head_W, head_b, d)


def _op_forward(blocks, op: int, H: np.ndarray):
    """Returns (output, cache); cache holds what backward needs."""
    if op == ZERO_OP:
        return None, None
    if op == SKIP_OP:
        return H, None
    if op == CONV_OP:
        W, _ = blocks[0]
        return H @ W.T, (H,)
    cache = []
    z = H
    for W, b in blocks:
        z_in = z
        z = np.tanh(z_in @ W.T + b)
        cache.append((z_in, z))
    return z, cache


def _op_backward(blocks, op: int, cache, gout: np.ndarray, want_weights: bool):
    """Returns (weight_grads or None, grad wrt the op input)."""
    if op == ZERO_OP:
        return None, 0.0
    if op == SKIP_OP:
        return None, gout
    if op == CONV_OP:
        W, _ = blocks[0]
        gW = gout.T @ cache[0] if want_weights else None
        return ([(gW, None)] if want_weights else None), gout @ W
    wgrads = [] if want_weights else None
    g = gout
    for (W, b), (z_in, z_out) in zip(reversed(blocks), reversed(cache)):
        gz = g * (1.0 - z_out * z_out)
        if want_weights:
            wgrads.append((gz.T @ z_in, gz.sum(axis=0)))
        g = gz @ W
    if want_weights:
        wgrads.reverse()
    return wgrads, g


def _forward_cached(w: SupernetWeights, beta: np.ndarray, decided: dict[int, int],
                    X: np.ndarray):
    """Mixture forward over the full 9-edge DAG; caches per-edge op outputs."""
    acts = {"in0": X, "in1": X}
    edge_caches: list = [None] * N_EDGES
    edge_outputs: list = [None] * N_EDGES
    for node in INTERMEDIATE_NODES:
        h = np.zeros((X.shape[0], w.dim))
        for m in NODE_INCOMING[node]:
            src = acts[_EDGE_SRC[m]]
            if m in decided:
                op = decided[m]
                out, cache = _op_forward(w.edge_params[m].get(op), op, src)
                edge_caches[m] = {op: cache}
                edge_outputs[m] = {op: out}
                if out is not None:
                    h += out
            else:
                caches, outs = {}, {}
                for op in range(N_OPS):
                    out, cache = _op_forward(w.edge_params[m].get(op), op, src)
                    caches[op] = cache
                    outs[op] = out
                    if out is not None:
                        h += beta[m, op] * out
                edge_caches[m] = caches
                edge_outputs[m] = outs
        acts[node] = h
    concat = np.concatenate([acts[n] for n in INTERMEDIATE_NODES], axis=1)
    logits = concat @ w.head_W.T + w.head_b
    return logits, acts, concat, edge_caches, edge_outputs


def _softmax_ce(logits: np.ndarray, y: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    n = len(y)
    loss = float(-np.mean(np.log(probs[np.arange(n), y] + 1e-300)))
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    return loss, dlogits / n, probs


def mixture_forward(w: SupernetWeights, a: AlphaMatrix, X: np.ndarray, y: np.ndarray):
    """(logits, cross-entropy loss) of the relaxed supernet on one batch."""
    if X.shape[0] == 0:
        return np.zeros((0, w.head_W.shape[0])), 0.0
    if X.shape[1] != w.dim:
        raise ValueError(f"batch feature width {X.shape[1]} != supernet dim {w.dim}")
    beta = softmax_rows(a)
    logits, _, _, _, _ = _forward_cached(w, beta, a.decided, X)
    loss, _, _ = _softmax_ce(logits, y)
    return logits, loss


def _backward_from_cache(w, beta, decided, X, y, logits, acts, concat,
                         edge_caches, edge_outputs, want_weights, want_alpha):
    loss, dlogits, _ = _softmax_ce(logits, y)
    weight_grads = None
    if want_weights:
        weight_grads = {
            "head_W": dlogits.T @ concat,
            "head_b": dlogits.sum(axis=0),
            "edges": [dict() for _ in range(N_EDGES)],
        }
    dconcat = dlogits @ w.head_W
    d = w.dim
    node_grads = {
        node: dconcat[:, i * d:(i + 1) * d].copy()
        for i, node in enumerate(INTERMEDIATE_NODES)
    }
    gbeta = np.zeros((N_EDGES, N_OPS)) if want_alpha else None

    for node in reversed(INTERMEDIATE_NODES):
        gout = node_grads[node]
        for m in NODE_INCOMING[node]:
            src_name = _EDGE_SRC[m]
            if m in decided:
                op = decided[m]
                wg, gin = _op_backward(w.edge_params[m].get(op), op,
                                       edge_caches[m][op], gout, want_weights)
                if want_weights and wg is not None:
                    weight_grads["edges"][m][op] = wg
                if src_name in node_grads and op != ZERO_OP:
                    node_grads[src_name] += gin
            else:
                for op in range(N_OPS):
                    out = edge_outputs[m][op]
                    if out is None:
                        continue
                    if want_alpha:
                        gbeta[m, op] = float(np.sum(out * gout))
                    b = beta[m, op]
                    wg, gin = _op_backward(w.edge_params[m].get(op), op,
                                           edge_caches[m][op], gout * b, want_weights)
                    if want_weights and wg is not None:
                        weight_grads["edges"][m][op] = wg
                    if src_name in node_grads:
                        node_grads[src_name] += gin

    alpha_grad = None
    if want_alpha:
        alpha_grad = np.zeros((N_EDGES, N_OPS))
        for m in range(N_EDGES):
            if m in decided:
                continue  # decided rows stay frozen
            row = beta[m]
            inner = float(row @ gbeta[m])
            alpha_grad[m] = row * (gbeta[m] - inner)
    return loss, weight_grads, alpha_grad


def supernet_backward(w: SupernetWeights, a: AlphaMatrix, X: np.ndarray,
                      y: np.ndarray, wrt: str = "both"):
    """Exact gradients of the batch cross-entropy.

    wrt: 'weights', 'alpha' or 'both'. Returns (loss, weight_grads,
    alpha_grad); the parts not asked for are None.
    """
    if wrt not in ("weights", "alpha", "both"):
        raise ValueError(f"wrt must be weights|alpha|both, got {wrt!r}")
    if X.shape[0] == 0:
        return 0.0, None, None
    beta = softmax_rows(a)
    logits, acts, concat, caches, outputs = _forward_cached(w, beta, a.decided, X)
    return _backward_from_cache(
        w, beta, a.decided, X, y, logits, acts, concat, caches, outputs,
        want_weights=wrt in ("weights", "both"),
        want_alpha=wrt in ("alpha", "both"),
    )


def discrete_forward(w: SupernetWeights, arch: Architecture, X: np.ndarray):
    """Forward of the derived network: retained edges only, one op each."""
    acts = {"in0": X, "in1": X}
    caches = {}
    for node in INTERMEDIATE_NODES:
        h = np.zeros((X.shape[0], w.dim))
        for m, op in arch.edges:
            if EDGE_DST[m] != node:
                continue
            src = acts[_EDGE_SRC[m]]
            out, cache = _op_forward(w.edge_params[m].get(op), op, src)
            caches[m] = cache
            if out is not None:
                h += out
        acts[node] = h
    concat = np.concatenate([acts[n] for n in INTERMEDIATE_NODES], axis=1)
    return concat @ w.head_W.T + w.head_b, acts, caches, concat


def _discrete_backward(w, arch, X, y, logits, acts, caches, concat):
    loss, dlogits, _ = _softmax_ce(logits, y)
    grads = {
        "head_W": dlogits.T @ concat,
        "head_b": dlogits.sum(axis=0),
        "edges": [dict() for _ in range(N_EDGES)],
    }
    d = w.dim
    dconcat = dlogits @ w.head_W
    node_grads = {
        node: dconcat[:, i * d:(i + 1) * d].copy()
        for i, node in enumerate(INTERMEDIATE_NODES)
    }
    for node in reversed(INTERMEDIATE_NODES):
        gout = node_grads[node]
        for m, op in arch.edges:
            if EDGE_DST[m] != node:
                continue
            wg, gin = _op_backward(w.edge_params[m].get(op), op, caches[m], gout, True)
            if wg is not None:
                grads["edges"][m][op] = wg
            src = _EDGE_SRC[m]
            if src in node_grads and op != ZERO_OP:
                node_grads[src] += gin
    return loss, grads


def _lookup_grad(grads: dict, key):
    if key == ("head", "W"):
        return grads["head_W"]
    if key == ("head", "b"):
        return grads["head_b"]
    e, op, k, kind = key
    if op in grads["edges"][e]:
        gW, gb = grads["edges"][e][op][k]
        return gW if kind == "W" else gb
    return None


def _accuracy(logits: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == y))


def train_derived(arch: Architecture, task: SyntheticTask, epochs: int = 30,
                  seed: int = 0, lr: float = 0.05, momentum: float = 0.9,
                  batch_size: int = 64):
    """Train the derived discrete network from scratch with momentum SGD.

    Returns (best val accuracy, history rows of (epoch, train_loss, val_acc)).
    """
    X_train, y_train, X_val, y_val = make_task_data(task)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    w = init_supernet(task, rng)
    velocity = {key: np.zeros_like(arr) for key, arr in w.flat_items()}

    def apply_sgd(grads):
        for key, arr in w.flat_items():
            g = _lookup_grad(grads, key)
            if g is None:
                continue
            v = velocity[key]
            v *= momentum
            v += g
            arr -= lr * v

    n = len(y_train)
    history = []
    best = 0.0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits, acts, caches, concat = discrete_forward(w, arch, X_train[idx])
            loss, grads = _discrete_backward(w, arch, X_train[idx], y_train[idx],
                                             logits, acts, caches, concat)
            loss_sum += loss * len(idx)
            apply_sgd(grads)
        val_logits, _, _, _ = discrete_forward(w, arch, X_val)
        val_acc = _accuracy(val_logits, y_val)
        best = max(best, val_acc)
        history.append((epoch, loss_sum / n, val_acc))
    return best, history
