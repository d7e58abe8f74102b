import numpy as np

from hlgp import tensor as T


def check_grads(build_loss, params, eps=1e-5, tol=1e-5):
    """Compare tape gradients with central finite differences.

    ``build_loss()`` must rebuild the whole forward pass from the params'
    current data and return the scalar loss Tensor. Returns the max
    relative error over all params.
    """
    for p in params:
        p.zero_grad()
    with T.Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    worst = 0.0
    for p in params:
        fd = T.finite_diff_grad(lambda: build_loss().item(), p, eps)
        err = T.max_relative_error(p.grad, fd)
        assert err < tol, f"{p.name or 'param'}: rel err {err:.3e} >= {tol}"
        worst = max(worst, err)
    return worst


def rng(seed=0):
    return np.random.default_rng(seed)
