"""Latency constraint: binarization, its linearizing mask, and the
closed-form gradient of the latency loss w.r.t. architectural parameters.

Binarization picks 2 incoming edges per intermediate node and the best
non-Zero op per kept edge, which is non-differentiable. Multiplying the
row-softmax by an element-wise mask (1/beta at each chosen entry) reproduces
the binary encoding exactly while staying locally linear in beta, so the
chain rule through the softmax yields a two-case gradient per row.
"""

from dataclasses import dataclass, field

import numpy as np

from .latreg import RegressorParams, latreg_backward, latreg_forward
from .search_space import (
    EDGES_PER_NODE,
    INTERMEDIATE_NODES,
    N_EDGES,
    N_OPS,
    NODE_INCOMING,
    ZERO_OP,
)

LOSS_MODES = ("hinge", "mse", "non_targeted")


@dataclass
class AlphaMatrix:
    """9x10 architectural parameters plus frozen per-edge decisions."""

    alpha: np.ndarray
    decided: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        if self.alpha.shape != (N_EDGES, N_OPS):
            raise ValueError(f"alpha must be 9x10, got {self.alpha.shape}")
        for node, incoming in NODE_INCOMING.items():
            k = sum(1 for m in self.decided if m in incoming)
            if k > EDGES_PER_NODE:
                raise ValueError(f"node {node} has {k} decided incoming edges")
        for m, op in self.decided.items():
            if not 0 <= m < N_EDGES:
                raise ValueError(f"decided edge {m} out of range")
            if op == ZERO_OP or not 0 <= op < N_OPS:
                raise ValueError(f"decided edge {m} has invalid op {op}")

    def copy(self) -> "AlphaMatrix":
        return AlphaMatrix(self.alpha.copy(), dict(self.decided))


def softmax_rows(a: AlphaMatrix) -> np.ndarray:
    """Row-wise softmax of alpha; decided rows become exact one-hots."""
    z = a.alpha - a.alpha.max(axis=1, keepdims=True)
    e = np.exp(z)
    beta = e / e.sum(axis=1, keepdims=True)
    for m, op in a.decided.items():
        beta[m] = 0.0
        beta[m, op] = 1.0
    return beta


def binarize(a: AlphaMatrix) -> tuple[np.ndarray, dict[int, int]]:
    """Discrete encoding from alpha.

    Decided edges are always kept with their frozen op. Remaining slots per
    node go to the undecided incoming edges with the largest non-Zero beta;
    each kept edge takes its argmax non-Zero op. Ties break to the lowest
    index. Dropped edges give all-zero rows.
    """
    beta = softmax_rows(a)
    non_zero = beta[:, :ZERO_OP]
    enc = np.zeros((N_EDGES, N_OPS))
    chosen: dict[int, int] = {}
    for node in INTERMEDIATE_NODES:
        incoming = NODE_INCOMING[node]
        decided_in = [m for m in incoming if m in a.decided]
        undecided = [m for m in incoming if m not in a.decided]
        slots = EDGES_PER_NODE - len(decided_in)
        # stable sort keeps the lowest index first on ties
        ranked = sorted(undecided, key=lambda m: -non_zero[m].max())
        for m in decided_in:
            chosen[m] = a.decided[m]
        for m in ranked[:slots]:
            chosen[m] = int(np.argmax(non_zero[m]))
    for m, op in chosen.items():
        enc[m, op] = 1.0
    return enc, chosen


def zeta_mask(beta: np.ndarray, enc: np.ndarray) -> np.ndarray:
    """Mask with 1/beta at each chosen (edge, op) entry, 0 elsewhere, so that
    beta * zeta reproduces the binary encoding."""
    zeta = np.zeros_like(beta)
    rows, cols = np.nonzero(enc)
    zeta[rows, cols] = 1.0 / beta[rows, cols]
    return zeta


@dataclass(frozen=True)
class LatencyLossSpec:
    mode: str
    lam: float
    target_ms: float = 0.0

    def __post_init__(self):
        if self.mode not in LOSS_MODES:
            raise ValueError(f"mode must be one of {LOSS_MODES}, got {self.mode!r}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.mode in ("hinge", "mse") and self.target_ms <= 0:
            raise ValueError(f"{self.mode} mode needs a positive target_ms")


def latency_loss(spec: LatencyLossSpec, prediction_ms: float) -> float:
    if spec.mode == "hinge":
        return spec.lam * max(prediction_ms - spec.target_ms, 0.0)
    if spec.mode == "mse":
        return spec.lam * (prediction_ms - spec.target_ms) ** 2
    return spec.lam * prediction_ms


def loss_grad_pred(spec: LatencyLossSpec, prediction_ms: float) -> float:
    """dL/d(prediction). The hinge subgradient at prediction == target is 0,
    keeping the inactive region exactly gradient-free."""
    if spec.mode == "hinge":
        return spec.lam if prediction_ms > spec.target_ms else 0.0
    if spec.mode == "mse":
        return 2.0 * spec.lam * (prediction_ms - spec.target_ms)
    return spec.lam


def grad_from_parts(g: float, input_grad: np.ndarray, beta: np.ndarray,
                    chosen: dict[int, int], decided: dict[int, int]) -> np.ndarray:
    """Assemble the two-case gradient row by row.

    For a retained, undecided edge with chosen op n*:
      d/dalpha[n*] = g * input_grad[n*] * (1 - beta[n*])
      d/dalpha[n]  = -g * input_grad[n*] * beta[n]   for n != n*
    Dropped and decided rows stay zero.
    """
    grad = np.zeros((N_EDGES, N_OPS))
    for m, n_star in chosen.items():
        if m in decided:
            continue
        scale = input_grad[m, n_star]
        row = -beta[m] * scale
        row[n_star] = (1.0 - beta[m, n_star]) * scale
        grad[m] = g * row
    return grad


def latency_loss_grad_alpha(spec: LatencyLossSpec, p: RegressorParams,
                            a: AlphaMatrix) -> np.ndarray:
    """Closed-form d(latency loss)/d(alpha) through the binarized encoding."""
    beta = softmax_rows(a)
    enc, chosen = binarize(a)
    pred = latreg_forward(p, enc)
    g = loss_grad_pred(spec, pred)
    _, input_grad = latreg_backward(p, enc, pred)
    return grad_from_parts(g, input_grad, beta, chosen, a.decided)


def predicted_latency(p: RegressorParams, a: AlphaMatrix) -> float:
    enc, _ = binarize(a)
    return latreg_forward(p, enc)


def surrogate_loss(spec: LatencyLossSpec, p: RegressorParams, alpha: np.ndarray,
                   decided: dict[int, int], zeta: np.ndarray) -> float:
    """Frozen-selection surrogate: loss(LatReg(softmax(alpha) * zeta)) with the
    mask (and thus the edge/op selection) held fixed. Finite differences of
    this function are what the closed form linearizes."""
    beta = softmax_rows(AlphaMatrix(alpha, dict(decided)))
    return latency_loss(spec, latreg_forward(p, beta * zeta))


def alpha_to_json(a: AlphaMatrix) -> dict:
    return {
        "alpha": a.alpha.tolist(),
        "decided": {str(m): op for m, op in sorted(a.decided.items())},
    }


def alpha_from_json(doc: dict) -> AlphaMatrix:
    if "alpha" not in doc:
        raise ValueError("alpha document misses field 'alpha'")
    decided = {int(m): int(op) for m, op in doc.get("decided", {}).items()}
    return AlphaMatrix(np.array(doc["alpha"], dtype=float), decided)
