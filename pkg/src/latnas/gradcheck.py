"""Finite-difference suites for every hand-written gradient in the package.

Central differences with a relative tolerance and a small absolute floor;
each suite returns its worst |analytic - fd| / tolerance ratio, so anything
below 1.0 passes.
"""

from dataclasses import dataclass

import numpy as np

from . import constraint as ct
from . import latreg as lr
from . import supernet_task as sn


@dataclass
class CheckResult:
    name: str
    worst_ratio: float
    passed: bool

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{self.name}: worst ratio {self.worst_ratio:.4f} [{status}]"


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f over a flat copy of x."""
    x = x.copy()
    grad = np.zeros_like(x)
    flat = x.ravel()
    g = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def _ratio(analytic: np.ndarray, fd: np.ndarray, rtol: float, atol: float) -> float:
    diff = np.abs(analytic - fd)
    tol = atol + rtol * np.maximum(np.abs(analytic), np.abs(fd))
    return float((diff / tol).max()) if diff.size else 0.0


def check_latreg(seed: int = 0, n_instances: int = 5,
                 rtol: float = 1e-4, atol: float = 1e-7) -> CheckResult:
    """Parameter and input gradients of the regressor vs finite differences.

    Parameter grads are probed on down-sized layers (same code path);
    the input gradient is probed at the real 9x10 input.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_instances):
        p = lr.init_params(rng, mu_ms=15.0 + rng.uniform(-2, 2),
                           sigma_ms=2.0 + rng.uniform(0, 1),
                           sizes=(12, 9, 5, 1))
        enc = rng.uniform(0, 1, size=12)
        target = 10.0 + rng.uniform(0, 10)
        grads, _ = lr.latreg_backward(p, enc, target)

        t_norm = (target - p.mu_ms) / p.sigma_ms
        for name, arr in p.arrays().items():
            def loss_at(x, name=name, arr=arr):
                backup = arr.copy()
                arr[...] = x
                y = (lr.latreg_forward(p, enc) - p.mu_ms) / p.sigma_ms
                arr[...] = backup
                return (y - t_norm) ** 2
            fd = central_diff(loss_at, arr)
            worst = max(worst, _ratio(grads[name], fd, rtol, atol))

        p_full = lr.init_params(rng, mu_ms=15.0, sigma_ms=2.4)
        enc_full = rng.uniform(0, 1, size=(9, 10))
        _, input_grad = lr.latreg_backward(p_full, enc_full, 14.0)
        fd_in = central_diff(lambda x: lr.latreg_forward(p_full, x), enc_full)
        worst = max(worst, _ratio(input_grad, fd_in, rtol, atol))
    return CheckResult("latreg param+input grads", worst, worst < 1.0)


def check_softmax_jacobian(seed: int = 0, n_instances: int = 20,
                           rtol: float = 1e-4, atol: float = 1e-6) -> CheckResult:
    """Row-softmax Jacobian entries b_n - b_n^2 (diag) and -b_n b_k."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    h = 1e-6
    for _ in range(n_instances):
        alpha = rng.standard_normal((9, 10))
        a = ct.AlphaMatrix(alpha)
        beta = ct.softmax_rows(a)
        m = int(rng.integers(9))
        for n in range(10):
            analytic = np.where(
                np.arange(10) == n,
                beta[m, n] - beta[m, n] ** 2,
                -beta[m, n] * beta[m],
            )
            ap = alpha.copy(); ap[m, n] += h
            am = alpha.copy(); am[m, n] -= h
            fd = (ct.softmax_rows(ct.AlphaMatrix(ap))[m]
                  - ct.softmax_rows(ct.AlphaMatrix(am))[m]) / (2 * h)
            worst = max(worst, _ratio(analytic, fd, rtol, atol))
    return CheckResult("softmax row jacobian", worst, worst < 1.0)


def check_constraint_grad(seed: int = 0, n_instances: int = 10,
                          rtol: float = 1e-4, atol: float = 1e-8) -> CheckResult:
    """Closed-form latency gradient vs finite differences of the frozen
    surrogate (selection and mask held fixed), across all three loss modes."""
    rng = np.random.default_rng(seed)
    p = lr.init_params(rng, mu_ms=15.0, sigma_ms=2.4)
    worst = 0.0
    for k in range(n_instances):
        alpha = rng.standard_normal((9, 10))
        decided = {4: 2} if k % 3 == 0 else {}
        a = ct.AlphaMatrix(alpha, decided)
        pred = ct.predicted_latency(p, a)
        mode = ("hinge", "mse", "non_targeted")[k % 3]
        if mode == "hinge":
            spec = ct.LatencyLossSpec("hinge", 0.7, target_ms=max(pred - 2.0, 0.5))
        elif mode == "mse":
            spec = ct.LatencyLossSpec("mse", 0.7, target_ms=pred + 2.0)
        else:
            spec = ct.LatencyLossSpec("non_targeted", 0.7)
        grad = ct.latency_loss_grad_alpha(spec, p, a)
        beta = ct.softmax_rows(a)
        enc, _ = ct.binarize(a)
        zeta = ct.zeta_mask(beta, enc)
        fd = central_diff(
            lambda x: ct.surrogate_loss(spec, p, x, a.decided, zeta), alpha
        )
        worst = max(worst, _ratio(grad, fd, rtol, atol))
        row_sum = float(np.abs(grad.sum(axis=1)).max())
        if row_sum > 1e-10:
            worst = max(worst, row_sum / 1e-10)
    return CheckResult("latency-loss alpha grad vs frozen surrogate", worst, worst < 1.0)


def check_supernet(seed: int = 0, rtol: float = 1e-4, atol: float = 1e-7) -> CheckResult:
    """Supernet weight and alpha gradients on a dim=3 toy instance."""
    rng = np.random.default_rng(seed)
    task = sn.SyntheticTask(dim=3, classes=2, n_train=16, n_val=8, seed=int(rng.integers(100)))
    w = sn.init_supernet(task, rng)
    alpha = 0.5 * rng.standard_normal((9, 10))
    a = ct.AlphaMatrix(alpha, {7: 5})
    X = rng.standard_normal((5, 3))
    y = rng.integers(0, 2, size=5)
    _, w_grads, a_grad = sn.supernet_backward(w, a, X, y, wrt="both")

    worst = 0.0
    fd_a = central_diff(
        lambda x: sn.mixture_forward(w, ct.AlphaMatrix(x, dict(a.decided)), X, y)[1],
        alpha, h=1e-6,
    )
    worst = max(worst, _ratio(a_grad, fd_a, rtol, atol))

    for key, arr in w.flat_items():
        g = sn._lookup_grad(w_grads, key)
        if g is None:
            continue
        def loss_at(x, arr=arr):
            backup = arr.copy()
            arr[...] = x
            out = sn.mixture_forward(w, a, X, y)[1]
            arr[...] = backup
            return out
        fd = central_diff(loss_at, arr, h=1e-6)
        worst = max(worst, _ratio(g, fd, rtol, atol))
    return CheckResult("supernet weight+alpha grads", worst, worst < 1.0)


def run_all(seed: int = 0) -> list[CheckResult]:
    return [
        check_latreg(seed),
        check_softmax_jacobian(seed),
        check_constraint_grad(seed),
        check_supernet(seed),
    ]
