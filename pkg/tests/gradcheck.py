"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np

from modtune import tensor as T


def numeric_grad(f, arrays, h=1e-5):
    """d f / d array for each array, by central differences; ``f`` takes ndarrays, returns float."""
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = f(*arrays)
            flat[i] = old - h
            down = f(*arrays)
            flat[i] = old
            gf[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    """Normwise (max-abs) relative error between two gradient arrays."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def check_op(build, arrays, rng, h=1e-5):
    """Max relative error of ``build(*tensors)`` gradients against finite differences.

    The output is contracted with a fixed random weighting so any output
    shape yields a scalar loss.
    """
    params = [T.parameter(a.copy()) for a in arrays]
    probe = build(*[T.constant(a) for a in arrays])
    weight = rng.standard_normal(probe.shape)

    with T.Graph() as g:
        out = build(*params)
        loss = T.sum_all(T.mul(out, T.constant(weight)))
    g.backward(loss)

    def f(*arrs):
        return float((build(*[T.constant(a) for a in arrs]).data * weight).sum())

    work = [a.copy() for a in arrays]
    num = numeric_grad(f, work, h)
    return max(relative_error(p.grad, n) for p, n in zip(params, num))


def _rand(rng, *shape):
    return rng.standard_normal(shape)


OPS = {
    "matmul": lambda r: (lambda a, b: T.matmul(a, b), [_rand(r, 3, 4), _rand(r, 4, 2)]),
    "matmul_batched": lambda r: (lambda a, b: T.matmul(a, b), [_rand(r, 2, 3, 4), _rand(r, 2, 4, 2)]),
    "linear": lambda r: (lambda x, w, b: T.linear(x, w, b), [_rand(r, 2, 3, 4), _rand(r, 4, 5), _rand(r, 5)]),
    "add": lambda r: (lambda a, b: T.add(a, b), [_rand(r, 3, 4), _rand(r, 3, 4)]),
    "add_bias": lambda r: (lambda a, b: T.add(a, b), [_rand(r, 2, 3, 4), _rand(r, 4)]),
    "mul": lambda r: (lambda a, b: T.mul(a, b), [_rand(r, 3, 4), _rand(r, 3, 4)]),
    "scale": lambda r: (lambda a: T.scale(a, -1.7), [_rand(r, 5)]),
    "reshape": lambda r: (lambda a: T.reshape(a, (6, 2)), [_rand(r, 3, 4)]),
    "transpose": lambda r: (lambda a: T.transpose(a, (1, 2, 0)), [_rand(r, 2, 3, 4)]),
    "select": lambda r: (lambda a: T.select(a, 1, 0), [_rand(r, 2, 3, 4)]),
    "gather_rows": lambda r: (lambda a: T.gather_rows(a, [0, 2, 2]), [_rand(r, 4, 3)]),
    "gelu": lambda r: (lambda a: T.gelu(a), [_rand(r, 4, 5) * 2]),
    "softmax": lambda r: (lambda a: T.softmax(a), [_rand(r, 3, 5)]),
    "softmax_axis0": lambda r: (lambda a: T.softmax(a, axis=0), [_rand(r, 3, 5)]),
    "embed": lambda r: (lambda t: T.embed(t, np.array([[0, 3], [3, 1]])), [_rand(r, 4, 3)]),
    "dropout": lambda r: (lambda a: T.dropout(a, 0.3, np.random.default_rng(5)), [_rand(r, 4, 6)]),
    "layer_norm": lambda r: (lambda x, g, b: T.layer_norm(x, g, b, 1e-12),
                             [_rand(r, 3, 6), 1 + 0.3 * _rand(r, 6), _rand(r, 6)]),
    "sum_all": lambda r: (lambda a: T.sum_all(a), [_rand(r, 3, 2)]),
    "softmax_cross_entropy": lambda r: (lambda a: T.softmax_cross_entropy(a, [1, 0, 3]), [_rand(r, 3, 4)]),
    "mse_loss": lambda r: (lambda a: T.mse_loss(a, [0.5, -1.0, 2.0]), [_rand(r, 3)]),
}


def model_probe_error(model, ids, segments, mask, gold, rng, probes=20, h=1e-5):
    """Worst per-entry relative error of backprop through ``model`` over random parameter probes."""
    def loss_value():
        return T.softmax_cross_entropy(model.forward(ids, segments, mask), gold).item()

    model.zero_grad()
    with T.Graph() as graph:
        loss = T.softmax_cross_entropy(model.forward(ids, segments, mask), gold)
    graph.backward(loss)
    grads = {g.name: g.tensor.grad.copy() for g in model.registry}

    used = np.unique(ids)
    hidden = model.config.hidden
    candidates = [g for g in model.registry if g.name != "embeddings.position"]
    worst = 0.0
    for _ in range(probes):
        g = candidates[rng.integers(len(candidates))]
        flat = g.tensor.data.reshape(-1)
        if g.name == "embeddings.word":
            # only rows of tokens present in the batch carry gradient
            i = int(rng.choice(used)) * hidden + int(rng.integers(hidden))
        else:
            i = int(rng.integers(flat.size))
        old = flat[i]
        flat[i] = old + h
        up = loss_value()
        flat[i] = old - h
        down = loss_value()
        flat[i] = old
        num = (up - down) / (2 * h)
        ana = grads[g.name].reshape(-1)[i]
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-6))
    return worst
