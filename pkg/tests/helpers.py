"""Shared test utilities: central finite differences as the gradient oracle."""

import numpy as np

from rwkvir.tensor import Tensor, no_grad

FD_EPS = 1e-5
FD_RTOL = 1e-4


def numeric_grad(forward, arrays, wrt, seed_grad, eps=FD_EPS):
    """Central finite differences of sum(forward() * seed_grad) w.r.t. arrays[wrt].

    `forward` must recompute from the (mutated) arrays on every call.
    """
    x = arrays[wrt]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        fp = float((forward() * seed_grad).sum())
        x[i] = orig - eps
        fm = float((forward() * seed_grad).sum())
        x[i] = orig
        g[i] = (fp - fm) / (2 * eps)
        it.iternext()
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.linalg.norm((a - b).ravel()) / max(np.linalg.norm(b.ravel()), 1e-30)


def check_module_grads(forward, tensors, rng=None, rtol=FD_RTOL, eps=FD_EPS):
    """Finite-difference check for a stateful module.

    `forward()` must rebuild the graph from the current `.data` of every
    tensor in `tensors` (leaf parameters and inputs) on each call.
    """
    items = list(tensors.items()) if isinstance(tensors, dict) else list(enumerate(tensors))
    out = forward()
    seed = rng.standard_normal(out.data.shape) if rng is not None else np.ones(out.data.shape)
    for _, t in items:
        t.zero_grad()
    out.backward(seed)

    def fwd():
        with no_grad():
            return forward().data

    errs = {}
    for name, t in items:
        fd = numeric_grad(fwd, [t.data], 0, seed, eps=eps)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        err = rel_err(analytic, fd)
        assert err <= rtol, f"param {name}: rel err {err:.3e} > {rtol}"
        errs[name] = err
    return errs


def check_grads(build_op, arrays, rng=None, rtol=FD_RTOL, eps=FD_EPS):
    """Assert analytic gradients of every input match finite differences."""
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = build_op(*tensors)
    seed = rng.standard_normal(out.data.shape) if rng is not None else np.ones(out.data.shape)
    out.backward(seed)
    datas = [t.data for t in tensors]

    def forward():
        with no_grad():
            return build_op(*[Tensor(d) for d in datas]).data

    errs = []
    for i, t in enumerate(tensors):
        fd = numeric_grad(forward, datas, i, seed, eps=eps)
        analytic = t.grad if t.grad is not None else np.zeros_like(datas[i])
        err = rel_err(analytic, fd)
        assert err <= rtol, f"input {i}: rel err {err:.3e} > {rtol}"
        errs.append(err)
    return errs
