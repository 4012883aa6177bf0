"""Shared test utilities: the central finite-difference gradient oracle.

The oracle is independent of the tape: it re-runs the forward function with
perturbed float64 inputs and compares analytic gradients elementwise.
"""

import numpy as np

from moe_mamba.tensor import Tensor


def central_difference(f, arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """d f / d arr via (f(x+h) - f(x-h)) / 2h, one element at a time.

    ``f`` takes no arguments and reads ``arr`` in place; it must return a
    python float.
    """
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor).

    The floor turns the comparison absolute for near-zero elements: central
    differences with step 1e-6 on an O(1) loss only resolve about 1e-10, so
    a pure relative test there would measure oracle noise, not gradient
    error. With floor 1e-3 and tolerance 1e-5, small elements still must
    agree to 1e-8, two orders above the noise.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(build_loss, tensors: dict[str, Tensor], h: float = 1e-6,
                    floor: float = 1e-3) -> float:
    """Compare tape gradients of ``build_loss()`` against central differences
    for every tensor in ``tensors``. Returns the worst relative error.

    ``build_loss`` must construct a fresh graph from the tensors' current
    data and return a scalar Tensor.
    """
    for t in tensors.values():
        assert t.data.dtype == np.float64, "gradient checks run in float64"
        t.grad = None
    loss = build_loss()
    loss.backward()
    worst = 0.0
    for name, t in tensors.items():
        assert t.grad is not None, f"no gradient reached {name}"
        analytic = t.grad.copy()
        numeric = central_difference(lambda: float(build_loss().data), t.data, h=h)
        err = relative_error(analytic, numeric, floor=floor)
        worst = max(worst, err)
    return worst


def weighted_sum(out: Tensor, seed: int = 0) -> Tensor:
    """Scalar probe: random fixed projection of the output, so gradient
    errors cannot cancel the way a plain sum can."""
    from moe_mamba import tensor as T

    w = np.random.default_rng(seed ^ 0x5EED).uniform(0.5, 1.5, size=out.shape)
    return T.sum_all(T.mul(out, T.constant(w, dtype=out.dtype)))


def param64(rng: np.random.Generator, *shape, lo: float = -2.0, hi: float = 2.0) -> Tensor:
    t = Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)
    return t
