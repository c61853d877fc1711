"""Central finite-difference checks for the autodiff core."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def numeric_gradient(loss: Callable[[], float], arr: np.ndarray, entries=None, h: float = 1e-5) -> np.ndarray:
    """d loss / d arr[e] for each flat entry ``e`` by central differences, perturbing ``arr`` in place."""
    flat = arr.reshape(-1)
    entries = range(flat.size) if entries is None else entries
    out = []
    for e in entries:
        old = flat[e]
        flat[e] = old + h
        up = loss()
        flat[e] = old - h
        down = loss()
        flat[e] = old
        out.append((up - down) / (2 * h))
    return np.asarray(out)


def check_function(fn: Callable[..., ad.Tensor], inputs: Sequence[np.ndarray], rng: np.random.Generator,
                   h: float = 1e-5, wrt: Sequence[int] | None = None) -> list[float]:
    """Relative error between reverse-mode and finite-difference gradients, per input.

    ``fn`` maps tensors to a tensor; the scalar checked is its dot product with
    a fixed random cotangent.  Runs in float64.
    """
    wrt = range(len(inputs)) if wrt is None else wrt
    with ad.precision(np.float64):
        arrays = [np.array(x, dtype=np.float64) for x in inputs]
        tensors = [ad.Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
        out = fn(*tensors)
        cot = rng.standard_normal(out.shape)
        out.backward(cot)

        def loss():
            return float(np.sum(fn(*[ad.Tensor(a) for a in arrays]).data * cot))

        return [relative_error(tensors[i].grad, numeric_gradient(loss, arrays[i], h=h)) for i in wrt]


def check_parameters(loss_fn: Callable[[], ad.Tensor], params: dict, rng: np.random.Generator,
                     per_param: int = 8, h: float = 1e-5) -> dict[str, float]:
    """Spot-check ``per_param`` random entries of each parameter of a scalar loss.

    Parameters must already be float64.
    """
    for p in params.values():
        p.zero_grad()
    loss_fn().backward()
    errors = {}
    for name, p in params.items():
        # prefer live entries: a dead unit has zero gradient and leaves only round-off to compare
        live = np.flatnonzero(p.grad.reshape(-1) != 0)
        pool = live if len(live) else np.arange(p.data.size)
        entries = rng.choice(pool, size=min(per_param, len(pool)), replace=False)
        analytic = p.grad.reshape(-1)[entries].copy()
        numeric = numeric_gradient(lambda: float(loss_fn().data), p.data, entries, h)
        errors[name] = relative_error(analytic, numeric)
    return errors


def _random_csr(rng, n, max_deg=4):
    indptr, indices = [0], []
    for _ in range(n):
        indices.extend(rng.integers(0, n, rng.integers(0, max_deg + 1)).tolist())
        indptr.append(len(indices))
    return np.array(indptr), np.array(indices, dtype=np.int64)


def primitive_cases(rng: np.random.Generator) -> dict:
    """Name -> ``(fn, inputs)`` for every differentiable primitive, sized for finite differences."""
    relu_in = rng.standard_normal((5, 4))
    relu_in[np.abs(relu_in) < 0.05] = 0.5  # keep clear of the kink
    indptr, indices = _random_csr(rng, 7)
    t = rng.integers(0, 4, 6)
    w = rng.uniform(0.2, 5.0, 4)
    return {
        "matmul": (ad.matmul, [rng.standard_normal((4, 3)), rng.standard_normal((3, 5))]),
        "matmul_t": (lambda a, b: ad.matmul(a, b, trans_b=True),
                     [rng.standard_normal((4, 3)), rng.standard_normal((5, 3))]),
        "add_bias": (ad.add_bias, [rng.standard_normal((4, 3)), rng.standard_normal(3)]),
        "relu": (ad.relu, [relu_in]),
        "concat": (lambda a, b: ad.concat([a, b]), [rng.standard_normal((4, 2)), rng.standard_normal((4, 3))]),
        "neighbor_max": (lambda x: ad.neighbor_max(x, indptr, indices), [rng.standard_normal((7, 3))]),
        "conv3d_k3": (lambda x, k, b: ad.conv3d(x, k, b, padding=1),
                      [rng.standard_normal((2, 4, 3, 4)), rng.standard_normal((3, 2, 3, 3, 3)),
                       rng.standard_normal(3)]),
        "conv3d_k5": (lambda x, k, b: ad.conv3d(x, k, b, padding=2),
                      [rng.standard_normal((2, 4, 4, 3)), rng.standard_normal((2, 2, 5, 5, 5)),
                       rng.standard_normal(2)]),
        "softmax": (ad.softmax, [rng.standard_normal((4, 4))]),
        "log": (ad.log, [rng.uniform(0.5, 2.0, (3, 4))]),
        "to_rows": (ad.to_rows, [rng.standard_normal((4, 2, 3, 2))]),
        "cross_entropy": (lambda z: ad.weighted_cross_entropy(z, t), [rng.standard_normal((6, 4))]),
        "weighted_cross_entropy": (lambda z: ad.weighted_cross_entropy(z, t, w), [rng.standard_normal((6, 4))]),
    }
