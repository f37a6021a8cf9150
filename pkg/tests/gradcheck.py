"""Central finite-difference gradient oracle used across the test suite.

Independent of the tape: losses are re-evaluated as plain numpy through
the same ops with tracking off, so the comparison only trusts forward
arithmetic, never the vjp closures under test.
"""

import numpy as np

from fbm import autodiff as ad


def _fd_flat(f, x, eps):
    flat = x.reshape(-1)
    g = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * eps)
    return g


def _rel_err(ga, gf):
    denom = np.maximum(np.maximum(np.abs(ga), np.abs(gf)), 1e-6)
    return float(np.max(np.abs(ga - gf) / denom)) if ga.size else 0.0


def input_grad_err(build_loss, arrays, eps=1e-5):
    """Worst relative error of d(loss)/d(input) over all input arrays.

    build_loss takes a list of Tensors and returns a scalar Tensor.
    """
    arrays = [np.asarray(a, dtype=np.float64).copy() for a in arrays]
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    ad.backward(build_loss(tensors))
    worst = 0.0
    for j, base in enumerate(arrays):
        ga = tensors[j].grad
        ga = np.zeros_like(base) if ga is None else ga

        def f():
            with ad.no_grad():
                vals = [ad.Tensor(a) for a in arrays]
                return float(build_loss(vals).value)

        gf = _fd_flat(f, base, eps).reshape(base.shape)
        worst = max(worst, _rel_err(ga, gf))
    return worst


def param_grad_err(make_loss, params, eps=1e-5):
    """Worst relative error of d(loss)/d(p) over the given Parameters.

    make_loss() must rebuild the scalar loss from current param values.
    """
    ad.zero_grads(params)
    ad.backward(make_loss())
    grads = [None if p.grad is None else p.grad.copy() for p in params]

    def f():
        with ad.no_grad():
            return float(make_loss().value)

    worst = 0.0
    for p, ga in zip(params, grads):
        gf = _fd_flat(f, p.value, eps).reshape(p.value.shape)
        ga = np.zeros_like(gf) if ga is None else ga
        worst = max(worst, _rel_err(ga, gf))
    return worst
