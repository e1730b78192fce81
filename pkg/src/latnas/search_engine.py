"""Bi-level search loop with the latency constraint and greedy edge decisions.

Alternates one SGD step on the supernet weights (train batch) with one Adam
step on the architectural parameters (val-batch cross-entropy gradient plus
the closed-form latency gradient). Starting at the warmup epoch, one edge is
fixed every `decision_period` epochs, scored by edge importance, selection
certainty and selection stability; after six decisions the discrete cell is
fully determined.
"""

from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from .constraint import (
    AlphaMatrix,
    LatencyLossSpec,
    binarize,
    grad_from_parts,
    latency_loss,
    loss_grad_pred,
    softmax_rows,
)
from .device_sim import DeviceModel, simulate_latency
from .latreg import RegressorParams, latreg_backward, latreg_forward
from .search_space import (
    Architecture,
    EDGES_PER_NODE,
    N_EDGES,
    N_OPS,
    NODE_INCOMING,
    ZERO_OP,
    encode,
)
from .supernet_task import (
    SyntheticTask,
    init_supernet,
    make_task_data,
    supernet_backward,
    train_derived,
    _lookup_grad,
)

N_DECISIONS = 6


@dataclass
class SearchConfig:
    target_ms: float = 12.0
    lam: float = 0.5
    loss_mode: str = "hinge"
    epochs: int = 50
    warmup_epochs: int = 9
    decision_period: int = 7
    history_window: int = 4
    batch_size: int = 28
    batch_growth: int = 4
    w_lr: float = 0.005
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    alpha_lr: float = 3e-4
    alpha_beta1: float = 0.5
    alpha_beta2: float = 0.999
    alpha_weight_decay: float = 1e-3
    alpha_init_scale: float = 1e-3
    derive_epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        last_decision = self.warmup_epochs + (N_DECISIONS - 1) * self.decision_period
        if last_decision > self.epochs:
            raise ValueError(
                f"schedule overruns: last decision at epoch {last_decision} "
                f"> {self.epochs} epochs"
            )
        if self.loss_mode != "non_targeted" and self.target_ms <= 0:
            raise ValueError("target_ms must be positive")

    def loss_spec(self) -> LatencyLossSpec:
        return LatencyLossSpec(self.loss_mode, self.lam, self.target_ms)

    def decision_epochs(self) -> list[int]:
        return [self.warmup_epochs + k * self.decision_period for k in range(N_DECISIONS)]


@dataclass
class SearchState:
    weights: object
    alpha: AlphaMatrix
    adam_m: np.ndarray
    adam_v: np.ndarray
    adam_t: int
    velocity: dict
    beta_history: deque
    decisions: list
    batch_size: int
    epoch: int = 0


@dataclass
class SearchResult:
    architecture: Architecture
    decisions: list
    epoch_log: list
    step_rows: list
    achieved_ms: float
    predicted_ms: float
    accuracy: float
    final_alpha: AlphaMatrix
    config: SearchConfig

    def to_json(self) -> dict:
        from .search_space import architecture_to_json

        return {
            "architecture": architecture_to_json(self.architecture),
            "decisions": [
                {"epoch": e, "edge": m, "op": op} for e, m, op in self.decisions
            ],
            "achieved_ms": self.achieved_ms,
            "predicted_ms": self.predicted_ms,
            "accuracy": self.accuracy,
            "config": asdict(self.config),
        }


def _nonzero_profile(beta: np.ndarray) -> np.ndarray:
    """Per-edge distribution over non-Zero ops (rows sum to 1)."""
    p = beta[:, :ZERO_OP].copy()
    p /= p.sum(axis=1, keepdims=True)
    return p


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi - lo < 1e-12:
        return np.ones_like(values)
    return (values - lo) / (hi - lo)


def sgas_scores(state: SearchState) -> dict[int, float]:
    """Edge score = normalized(edge importance) * normalized(selection
    certainty) * selection stability, over the undecided edges."""
    if not state.beta_history:
        raise ValueError("score needs at least one epoch of history")
    beta = state.beta_history[-1][0]
    undecided = [m for m in range(N_EDGES) if m not in state.alpha.decided]
    if not undecided:
        return {}
    p_cur = state.beta_history[-1][1]
    ei = np.array([1.0 - beta[m, ZERO_OP] for m in undecided])
    ln_k = np.log(ZERO_OP)  # 9 non-Zero ops
    sc = np.array([
        1.0 - float(-(p_cur[m] * np.log(p_cur[m] + 1e-300)).sum()) / ln_k
        for m in undecided
    ])
    profiles = [entry[1] for entry in state.beta_history]
    if len(profiles) < 2:
        ss = np.ones(len(undecided))
    else:
        ss = np.array([
            float(np.mean([
                np.minimum(a[m], b[m]).sum()
                for a, b in zip(profiles[:-1], profiles[1:])
            ]))
            for m in undecided
        ])
    score = _minmax(ei) * _minmax(sc) * ss
    return dict(zip(undecided, score))


def _eligible_edges(decided: dict[int, int]) -> list[int]:
    out = []
    for node, incoming in NODE_INCOMING.items():
        n_done = sum(1 for m in incoming if m in decided)
        if n_done >= EDGES_PER_NODE:
            continue
        out.extend(m for m in incoming if m not in decided)
    return sorted(out)


def decide_edge(state: SearchState, epoch: int, batch_growth: int = 0) -> tuple[int, int, int]:
    """Fix the best-scoring eligible edge to its argmax non-Zero op, freeze
    its alpha row and grow the batch size."""
    eligible = _eligible_edges(state.alpha.decided)
    if not eligible:
        raise RuntimeError("no eligible edge left to decide")
    scores = sgas_scores(state)
    best_edge = min(eligible, key=lambda m: (-scores[m], m))
    beta = softmax_rows(state.alpha)
    op = int(np.argmax(beta[best_edge, :ZERO_OP]))
    state.alpha.decided[best_edge] = op
    state.adam_m[best_edge] = 0.0
    state.adam_v[best_edge] = 0.0
    state.decisions.append((epoch, best_edge, op))
    state.batch_size += batch_growth
    return epoch, best_edge, op


def search(cfg: SearchConfig, task: SyntheticTask, device: DeviceModel,
           regressor: RegressorParams) -> SearchResult:
    """Run the full constrained search; fully deterministic per cfg.seed."""
    w_rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1,)))
    a_rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(2,)))
    batch_rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(3,)))

    X_train, y_train, X_val, y_val = make_task_data(task)
    weights = init_supernet(task, w_rng)
    alpha = AlphaMatrix(cfg.alpha_init_scale * a_rng.standard_normal((N_EDGES, N_OPS)))
    state = SearchState(
        weights=weights,
        alpha=alpha,
        adam_m=np.zeros((N_EDGES, N_OPS)),
        adam_v=np.zeros((N_EDGES, N_OPS)),
        adam_t=0,
        velocity={key: np.zeros_like(arr) for key, arr in weights.flat_items()},
        beta_history=deque(maxlen=cfg.history_window),
        decisions=[],
        batch_size=cfg.batch_size,
    )
    spec = cfg.loss_spec()
    decision_epochs = set(cfg.decision_epochs())
    n_train, n_val = len(y_train), len(y_val)

    step_rows: list[dict] = []
    epoch_log: list[dict] = []

    def sgd_step(grads):
        for key, arr in weights.flat_items():
            g = _lookup_grad(grads, key)
            if g is None:
                continue
            v = state.velocity[key]
            v *= cfg.w_momentum
            v += g + cfg.w_weight_decay * arr
            arr -= cfg.w_lr * v

    def adam_step_alpha(grad):
        state.adam_t += 1
        undecided = [m for m in range(N_EDGES) if m not in state.alpha.decided]
        if not undecided:
            return
        rows = np.array(undecided)
        g = grad[rows]
        state.adam_m[rows] = cfg.alpha_beta1 * state.adam_m[rows] + (1 - cfg.alpha_beta1) * g
        state.adam_v[rows] = cfg.alpha_beta2 * state.adam_v[rows] + (1 - cfg.alpha_beta2) * g * g
        m_hat = state.adam_m[rows] / (1 - cfg.alpha_beta1 ** state.adam_t)
        v_hat = state.adam_v[rows] / (1 - cfg.alpha_beta2 ** state.adam_t)
        update = m_hat / (np.sqrt(v_hat) + 1e-8)
        # decoupled weight decay on undecided rows only
        state.alpha.alpha[rows] -= cfg.alpha_lr * (update + cfg.alpha_weight_decay
                                                   * state.alpha.alpha[rows])

    for epoch in range(1, cfg.epochs + 1):
        state.epoch = epoch
        train_order = batch_rng.permutation(n_train)
        val_order = batch_rng.permutation(n_val)
        val_pos = 0
        val_loss_sum = 0.0
        n_steps = 0
        pred_ms = lat_loss = 0.0
        for start in range(0, n_train, state.batch_size):
            idx = train_order[start:start + state.batch_size]
            _, w_grads, _ = supernet_backward(weights, state.alpha,
                                              X_train[idx], y_train[idx], wrt="weights")
            sgd_step(w_grads)

            if val_pos + state.batch_size > n_val:
                val_order = batch_rng.permutation(n_val)
                val_pos = 0
            vidx = val_order[val_pos:val_pos + state.batch_size]
            val_pos += state.batch_size
            val_loss, _, ce_grad = supernet_backward(weights, state.alpha,
                                                     X_val[vidx], y_val[vidx], wrt="alpha")
            beta = softmax_rows(state.alpha)
            enc, chosen = binarize(state.alpha)
            pred_ms = latreg_forward(regressor, enc)
            lat_loss = latency_loss(spec, pred_ms)
            g = loss_grad_pred(spec, pred_ms)
            _, input_grad = latreg_backward(regressor, enc, pred_ms)
            lat_grad = grad_from_parts(g, input_grad, beta, chosen, state.alpha.decided)
            adam_step_alpha(ce_grad + lat_grad)

            n_steps += 1
            val_loss_sum += val_loss
            step_rows.append({
                "epoch": epoch,
                "step": n_steps,
                "val_loss": val_loss,
                "pred_lat_ms": pred_ms,
                "lat_loss": lat_loss,
                "decision_edge": "",
                "decision_op": "",
                "batch_size": state.batch_size,
            })

        beta = softmax_rows(state.alpha)
        state.beta_history.append((beta, _nonzero_profile(beta)))

        decision = None
        if epoch in decision_epochs and len(state.decisions) < N_DECISIONS:
            _, m, op = decide_edge(state, epoch, cfg.batch_growth)
            decision = (epoch, m, op)
            step_rows[-1]["decision_edge"] = m
            step_rows[-1]["decision_op"] = op

        epoch_log.append({
            "epoch": epoch,
            "val_loss": val_loss_sum / max(n_steps, 1),
            "pred_lat_ms": pred_ms,
            "lat_loss": lat_loss,
            "decision": decision,
            "batch_size": state.batch_size,
        })

    if len(state.decisions) != N_DECISIONS:
        raise RuntimeError(f"search ended with {len(state.decisions)} decisions")
    arch = Architecture(tuple(sorted((m, op) for _, m, op in state.decisions)))
    achieved = simulate_latency(arch, device.with_noise(0.0))
    predicted = latreg_forward(regressor, encode(arch))
    derive_seed = int(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(4,)).generate_state(1)[0])
    accuracy, _ = train_derived(arch, task, epochs=cfg.derive_epochs, seed=derive_seed)
    return SearchResult(arch, list(state.decisions), epoch_log, step_rows,
                        achieved, predicted, accuracy, state.alpha.copy(), cfg)


DEFAULT_TARGETS = (6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0)


def _sweep_one(args) -> dict:
    cfg_doc, target, task_doc, dev_doc, reg_arrays = args
    cfg = SearchConfig(**{**cfg_doc, "target_ms": target})
    task = SyntheticTask(**task_doc)
    device = DeviceModel.from_json(dev_doc)
    regressor = RegressorParams(**reg_arrays)
    result = search(cfg, task, device, regressor)
    return {
        "target_ms": target,
        "achieved_ms": result.achieved_ms,
        "predicted_ms": result.predicted_ms,
        "accuracy": result.accuracy,
        "architecture": result.to_json()["architecture"],
    }


def sweep_targets(cfg_base: SearchConfig, targets, task: SyntheticTask,
                  device: DeviceModel, regressor: RegressorParams,
                  jobs: int = 1) -> list[dict]:
    """One search per target with shared device/regressor/task; rows in
    target order regardless of worker count."""
    if not targets:
        raise ValueError("targets must be nonempty")
    cfg_doc = asdict(cfg_base)
    task_doc = {f: getattr(task, f) for f in
                ("dim", "classes", "n_train", "n_val", "seed")}
    reg_arrays = {**regressor.arrays(), "mu_ms": regressor.mu_ms,
                  "sigma_ms": regressor.sigma_ms}
    work = [(cfg_doc, float(t), task_doc, device.to_json(), reg_arrays) for t in targets]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_one, work))
    return [_sweep_one(w) for w in work]
