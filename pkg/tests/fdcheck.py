"""Central finite-difference oracles shared by the gradient tests."""

import numpy as np

from tinyaction.net import forward, init_model


def rel_err(a, b, floor=1e-12):
    """Max-norm relative error between two arrays."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def numeric_grad(f, x, step):
    """Central differences of scalar ``f`` at every entry of ``x`` (perturbed in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        hi = f()
        x[i] = old - step
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * step)
    return g


def random_net_case(seed):
    """A small model, batch, upstream gradient and mask seed with D, H, C <= 8 and B <= 2."""
    r = np.random.default_rng(seed)
    D, H, C = (int(v) for v in r.integers(1, 9, size=3))
    B = int(r.integers(0, 3))
    N = int(r.integers(1, 6))
    dropout, drop_path = (0.0, 0.0) if seed % 3 == 0 else (0.3, 0.25)
    model = init_model(D, H, B, C, dropout, drop_path, seed=seed)
    for k in model.params:  # nonzero biases so every path is exercised
        model.params[k] = model.params[k] + 0.1 * r.standard_normal(model.params[k].shape)
    x = r.standard_normal((N, D))
    g = r.standard_normal((N, C))
    return model, x, g, seed + 1000


def net_grad_error(seed, step=1e-5):
    """Max relative error of backward() against finite differences over all parameters."""
    from tinyaction.net import backward
    model, x, g, mask_seed = random_net_case(seed)
    mode = "train" if model.dropout or model.drop_path else "eval"

    def run():
        rng = np.random.default_rng(mask_seed)
        return forward(model, x, mode, rng)

    def scalar():
        return float((run()[0] * g).sum())

    _, cache = run()
    grads = backward(model, cache, g)
    return max(rel_err(grads[k], numeric_grad(scalar, model.params[k], step)) for k in model.params)
