import numpy as np

from ..errors import NumericError
from .graph import Graph


def _evaluate(f, arrays, requires_grad):
    g = Graph()
    leaves = {k: g.leaf(v, requires_grad=requires_grad, name=k) for k, v in arrays.items()}
    root = f(g, leaves)
    val = float(np.asarray(root.value).reshape(()))
    if not np.isfinite(val):
        raise NumericError(f"function value is not finite ({val})")
    return g, leaves, root, val


def grad_check(f, x, h=1e-5, coords=None, return_details=False):
    """Max relative error of reverse-mode gradients against central differences.

    ``f(graph, leaves)`` builds a scalar root from ``leaves`` (a dict of leaf tensors
    mirroring ``x``).  ``x`` is an array or a dict of named arrays.  The error for
    each coordinate is ``|analytic - fd| / max(1, |fd|)``.  ``coords`` optionally
    limits the check to a list of (name, flat index) pairs.
    """
    single = not isinstance(x, dict)
    arrays = {"x": np.array(x, dtype=np.float64)} if single else {k: np.array(v, dtype=np.float64) for k, v in x.items()}
    call = (lambda g, leaves: f(g, leaves["x"])) if single else f

    g, leaves, root, _ = _evaluate(call, arrays, True)
    grads = g.backward(root)
    analytic = {k: grads[t] for k, t in leaves.items()}

    if coords is None:
        coords = [(k, i) for k, v in arrays.items() for i in range(v.size)]
    worst = 0.0
    details = []
    for name, i in coords:
        base = arrays[name]
        flat = base.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        fp = _evaluate(call, arrays, False)[3]
        flat[i] = orig - h
        fm = _evaluate(call, arrays, False)[3]
        flat[i] = orig
        fd = (fp - fm) / (2 * h)
        an = float(analytic[name].reshape(-1)[i])
        err = abs(an - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
        if return_details:
            details.append((name, i, an, fd, err))
    return (worst, details) if return_details else worst
