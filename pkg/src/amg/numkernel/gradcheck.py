"""Central finite-difference gradient checking."""
import numpy as np

from .tensor import backward, default_dtype, no_grad


def relative_error(analytic, numeric):
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def grad_check(f, params, eps=1e-3, tolerance=None, oracle_dtype=None):
    """Compare analytic and central-difference gradients of ``f``.

    ``f`` takes no arguments and returns a scalar Tensor computed from
    ``params`` (a dict of name -> leaf Tensor). Returns a dict mapping each
    parameter name to its max relative error; when ``tolerance`` is given the
    result is ``{"errors": ..., "passed": bool}``.

    With ``oracle_dtype`` set, the finite differences are evaluated on copies
    of the parameter values cast to that dtype, while the analytic gradient
    keeps the parameters' own precision.
    """
    for p in params.values():
        p.grad = None
    backward(f())
    saved = None
    if oracle_dtype is not None:
        saved = {k: p.data for k, p in params.items()}
        for p in params.values():
            p.data = p.data.astype(oracle_dtype)
    try:
        report = _numeric_errors(f, params, eps, oracle_dtype)
    finally:
        if saved is not None:
            for k, p in params.items():
                p.data = saved[k]
    if tolerance is not None:
        report = {"errors": report, "passed": all(v < tolerance for v in report.values())}
    return report


def _numeric_errors(f, params, eps, oracle_dtype):
    if oracle_dtype is None:
        with no_grad():
            return _fd_loop(f, params, eps)
    with no_grad(), default_dtype(oracle_dtype):
        return _fd_loop(f, params, eps)


def _fd_loop(f, params, eps):
    report = {}
    for name, p in params.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
        numeric = np.zeros(p.shape)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().data)
            flat[i] = orig - eps
            down = float(f().data)
            flat[i] = orig
            numeric.flat[i] = (up - down) / (2 * eps)
        err = relative_error(analytic, numeric)
        report[name] = float(err.max()) if err.size else 0.0
    return report

