"""Latency regressor: a 3-layer MLP over the vectorized 9x10 encoding.

Layers of 256/128/1 units with logistic sigmoids after the first two; the
output stays linear because targets are normalized to (lat - mu) / sigma and
can be negative. Forward, backward and Adam are hand-rolled so the search
can ask for d(prediction)/d(encoding) directly.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .device_sim import LatencyDataset
from .search_space import N_EDGES, N_OPS

CHECKPOINT_FORMAT_VERSION = 1
HIDDEN_SIZES = (256, 128)
INPUT_SIZE = N_EDGES * N_OPS

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


@dataclass
class RegressorParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    mu_ms: float
    sigma_ms: float

    def __post_init__(self):
        if self.sigma_ms <= 0:
            raise ValueError("sigma_ms must be positive")

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}


def init_params(seed, mu_ms: float, sigma_ms: float,
                sizes=(INPUT_SIZE, *HIDDEN_SIZES, 1)) -> RegressorParams:
    """Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) weights, zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    arrays = {}
    for layer, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
        bound = np.sqrt(1.0 / fan_in)
        arrays[f"W{layer}"] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        arrays[f"b{layer}"] = np.zeros(fan_out)
    return RegressorParams(mu_ms=mu_ms, sigma_ms=sigma_ms, **arrays)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_batch(p: RegressorParams, X: np.ndarray):
    H1 = _sigmoid(X @ p.W1.T + p.b1)
    H2 = _sigmoid(H1 @ p.W2.T + p.b2)
    y = H2 @ p.W3.T + p.b3
    return y[:, 0], H1, H2


def predict_batch(p: RegressorParams, X: np.ndarray) -> np.ndarray:
    """Predictions in ms for X of shape (n, input_size)."""
    y_norm, _, _ = _forward_batch(p, X)
    return y_norm * p.sigma_ms + p.mu_ms


def latreg_forward(p: RegressorParams, enc) -> float:
    """Prediction in ms for one (possibly real-valued) encoding matrix."""
    x = np.asarray(enc, dtype=float).ravel()
    return float(predict_batch(p, x[None, :])[0])


def latreg_backward(p: RegressorParams, enc, target_ms: float):
    """Gradients for one sample.

    Returns (param_grads, input_grad): param_grads are d/dtheta of the
    normalized squared error (y_norm - t_norm)^2; input_grad is
    d(prediction_ms)/d(encoding), shaped like the encoding. The input
    gradient belongs to the prediction, not the loss, so the latency
    constraint can scale it by its own dL/dpred.
    """
    x = np.asarray(enc, dtype=float).ravel()
    y_norm, H1, H2 = _forward_batch(p, x[None, :])
    y = float(y_norm[0])
    h1, h2 = H1[0], H2[0]
    t_norm = (target_ms - p.mu_ms) / p.sigma_ms

    dy = 2.0 * (y - t_norm)
    gW3 = dy * h2[None, :]
    gb3 = np.array([dy])
    dh2 = dy * p.W3[0]
    dz2 = dh2 * h2 * (1.0 - h2)
    gW2 = np.outer(dz2, h1)
    gb2 = dz2
    dh1 = dz2 @ p.W2
    dz1 = dh1 * h1 * (1.0 - h1)
    gW1 = np.outer(dz1, x)
    gb1 = dz1
    grads = {"W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2, "W3": gW3, "b3": gb3}

    # d(pred_ms)/dx: same chain with dy replaced by sigma (pred = sigma*y + mu)
    dz2_p = p.W3[0] * h2 * (1.0 - h2)
    dz1_p = (dz2_p @ p.W2) * h1 * (1.0 - h1)
    input_grad = p.sigma_ms * (dz1_p @ p.W1)
    return grads, input_grad.reshape(np.asarray(enc).shape)


def prediction_input_grad(p: RegressorParams, enc) -> np.ndarray:
    """d(prediction_ms)/d(encoding) without the loss-side gradients."""
    _, input_grad = latreg_backward(p, enc, p.mu_ms)
    return input_grad


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update, in place on `params`."""
    state.t += 1
    t = state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        params[name] -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


@dataclass
class TrainReport:
    train_mse: list[float]
    val_mse: list[float]
    test_mae_ms: float

    def to_csv(self) -> str:
        lines = ["epoch,train_mse,val_mse"]
        for e, (tr, va) in enumerate(zip(self.train_mse, self.val_mse), start=1):
            lines.append(f"{e},{tr!r},{va!r}")
        return "\n".join(lines) + "\n"


class DegenerateDatasetError(ValueError):
    """Training targets have zero spread; normalization is undefined."""


def train_latreg(ds: LatencyDataset, epochs: int = 70, batch_size: int = 256,
                 lr: float = 0.001, seed: int = 0):
    """Minibatch Adam on the normalized MSE; returns (params, TrainReport)."""
    if ds.sigma_train == 0:
        raise DegenerateDatasetError("sigma_train is 0")
    X_train, y_train = ds.matrix("train")
    X_val, y_val = ds.matrix("val")
    t_train = (y_train - ds.mu_train) / ds.sigma_train
    t_val = (y_val - ds.mu_train) / ds.sigma_train

    rng = np.random.default_rng(seed)
    p = init_params(rng, ds.mu_train, ds.sigma_train)
    state = AdamState(lr=lr)
    arrays = p.arrays()

    n = len(t_train)
    train_mse, val_mse = [], []
    for _ in range(epochs):
        order = rng.permutation(n)
        sq_sum = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            Xb, tb = X_train[idx], t_train[idx]
            yb, H1, H2 = _forward_batch(p, Xb)
            resid = yb - tb
            sq_sum += float(resid @ resid)
            dy = 2.0 * resid / len(idx)
            gW3 = dy[None, :] @ H2
            gb3 = np.array([dy.sum()])
            dz2 = np.outer(dy, p.W3[0]) * H2 * (1.0 - H2)
            gW2 = dz2.T @ H1
            gb2 = dz2.sum(axis=0)
            dz1 = (dz2 @ p.W2) * H1 * (1.0 - H1)
            gW1 = dz1.T @ Xb
            gb1 = dz1.sum(axis=0)
            adam_step(state, arrays, {"W1": gW1, "b1": gb1, "W2": gW2,
                                      "b2": gb2, "W3": gW3, "b3": gb3})
        train_mse.append(sq_sum / n)
        yv, _, _ = _forward_batch(p, X_val)
        val_mse.append(float(np.mean((yv - t_val) ** 2)))
    report = TrainReport(train_mse, val_mse, eval_latreg(p, ds, "test").mae_ms)
    return p, report


@dataclass
class EvalResult:
    mae_ms: float
    measured: np.ndarray
    predicted: np.ndarray
    slope: float


def eval_latreg(p: RegressorParams, ds: LatencyDataset, split: str) -> EvalResult:
    """MAE in ms plus (measured, predicted) pairs and the least-squares slope
    of predicted vs measured."""
    X, y = ds.matrix(split)
    if len(y) == 0:
        raise ValueError(f"split {split!r} is empty")
    pred = predict_batch(p, X)
    mae = float(np.mean(np.abs(pred - y)))
    ym = y - y.mean()
    denom = float(ym @ ym)
    slope = float(ym @ (pred - pred.mean()) / denom) if denom > 0 else float("nan")
    return EvalResult(mae, y, pred, slope)


def dataset_fingerprint(ds: LatencyDataset) -> str:
    h = hashlib.sha256()
    for s, tag in zip(ds.samples, ds.split):
        h.update(f"{s.latency_ms!r}|{tag}|".encode())
        h.update(np.asarray(s.encoding, dtype=np.int8).tobytes())
    return h.hexdigest()


def save_checkpoint(p: RegressorParams, path, meta: dict | None = None) -> None:
    doc = {
        "version": CHECKPOINT_FORMAT_VERSION,
        "mu": p.mu_ms,
        "sigma": p.sigma_ms,
        "meta": meta or {},
    }
    for name, arr in p.arrays().items():
        doc[name] = arr.ravel().tolist()
        doc[name + "_shape"] = list(arr.shape)
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> RegressorParams:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    arrays = {}
    for name in PARAM_NAMES:
        if name not in doc:
            raise ValueError(f"{path}: checkpoint misses field '{name}'")
        arrays[name] = np.array(doc[name]).reshape(doc[name + "_shape"])
    return RegressorParams(mu_ms=float(doc["mu"]), sigma_ms=float(doc["sigma"]), **arrays)
