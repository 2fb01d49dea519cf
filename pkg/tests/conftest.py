from __future__ import annotations

import numpy as np
import pytest

from stcnet.autodiff import Tape, Tensor, mul, parameter, sum_all


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar-valued f at x (64-bit)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.copy()
    for i in range(flat.size):
        orig = flat.flat[i]
        flat.flat[i] = orig + h
        f_plus = f(flat)
        flat.flat[i] = orig - h
        f_minus = f(flat)
        flat.flat[i] = orig
        g.flat[i] = (f_plus - f_minus) / (2.0 * h)
    return g


def max_rel_err(ad: np.ndarray, fd: np.ndarray, atol: float = 1e-7) -> float:
    """Worst relative disagreement, ignoring entries both sides agree are ~0."""
    ad = np.asarray(ad, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), 1.0)
    significant = np.abs(ad - fd) > atol
    if not np.any(significant):
        return 0.0
    return float((np.abs(ad - fd) / denom)[significant].max())


def check_op_gradients(build_op, arrays: dict[str, np.ndarray], rtol: float = 1e-4,
                       seed: int = 0) -> None:
    """Autodiff-vs-finite-difference check for every input of an op.

    ``build_op`` maps {name: Tensor} to the op output; the loss is a fixed
    random weighting of the output so all gradient entries are exercised.
    """
    rng = np.random.default_rng(seed)
    leaves = {name: parameter(arr) for name, arr in arrays.items()}
    with Tape() as tape:
        out = build_op(leaves)
        weights = Tensor(rng.normal(size=out.shape))
        loss = sum_all(mul(out, weights))
    grads = tape.backward(loss)

    for name, arr in arrays.items():
        def f(x, name=name):
            trial = {n: Tensor(a if n != name else x) for n, a in arrays.items()}
            return float(np.sum(build_op(trial).data * weights.data))

        fd = numeric_grad(f, arr)
        ad = grads.get(leaves[name], np.zeros_like(arr))
        err = max_rel_err(ad, fd)
        assert err < rtol, f"gradient of {name!r}: max rel err {err:.3e} >= {rtol}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
