"""Shared test utilities: finite-difference gradient oracle."""

import numpy as np

from sparsefusion import autodiff as ad


def numeric_grads(build_loss, arrays, h=1e-5):
    """Central finite differences of build_loss w.r.t. every array entry.

    ``build_loss`` maps a list of plain ndarrays to a float and must be a
    pure function of them (re-seed any rng inside).
    """
    grads = []
    for ai, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = build_loss(arrays)
            flat[i] = orig - h
            down = build_loss(arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def check_grads(build_graph, arrays, rtol=1e-6, atol=1e-8, h=1e-5):
    """Compare reverse-mode grads of build_graph against finite differences.

    ``build_graph`` maps a list of Tensors to a scalar loss Tensor. Returns
    the worst relative error observed.
    """
    params = [ad.parameter(a.copy()) for a in arrays]
    loss = build_graph(params)
    ad.backward(loss)

    def loss_value(arrs):
        ts = [ad.constant(a) for a in arrs]
        return build_graph(ts).item()

    numeric = numeric_grads(loss_value, [p.data.copy() for p in params], h=h)
    worst = 0.0
    for p, n in zip(params, numeric):
        a = np.zeros_like(p.data) if p.grad is None else p.grad
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), atol / rtol)
        err = float((np.abs(a - n) / denom).max()) if a.size else 0.0
        worst = max(worst, err)
        np.testing.assert_allclose(a, n, rtol=rtol, atol=atol)
    return worst
