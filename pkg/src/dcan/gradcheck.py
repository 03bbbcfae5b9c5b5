"""Central finite-difference verification of every differentiable operation.

Each check builds a scalar objective from one operation, backpropagates it,
then recomputes the gradient entry by entry with central differences at f64
and reports the worst relative error.  ``run_all`` drives the whole suite and
is what the ``grad-check`` CLI subcommand prints.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T

FD_STEP = 1e-5
SMOOTH_TOL = 1e-6
DEFAULT_TOL = 1e-4


def numeric_grad(f, arrays, eps=FD_STEP):
    """Central-difference gradients of scalar f with respect to each array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f()
            flat[i] = orig - eps
            lo = f()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def rel_error(analytic, numeric, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_op(build_loss, params, eps=FD_STEP, floor=1e-6):
    """Compare autodiff gradients of build_loss() against finite differences.

    build_loss must construct a fresh graph from the current values of
    ``params`` (a list of Tensors) and return a scalar Tensor.  ``floor``
    bounds the relative-error denominator from below: entries smaller than
    the floor are compared at that absolute scale, because central
    differences carry an intrinsic cancellation noise of roughly
    ulp(loss)/eps that would otherwise dominate near-zero gradients.
    """
    loss = build_loss()
    loss.backward()
    analytic = [T.grad_of(p).copy() for p in params]
    for p in params:
        p.zero_grad()
    numeric = numeric_grad(lambda: build_loss().item(),
                           [p.data for p in params], eps=eps)
    return max(rel_error(a, n, floor=floor) for a, n in zip(analytic, numeric))


def _rand(rng, shape, avoid_kink=False):
    x = rng.standard_normal(shape)
    if avoid_kink:
        x = np.where(np.abs(x) < 0.05, x + 0.1 * np.sign(x) + 0.1 * (x == 0), x)
    return x


def _param(rng, shape, avoid_kink=False):
    return T.Tensor(_rand(rng, shape, avoid_kink), requires_grad=True)


def _scalarize(out):
    # weight the output entries so the check exercises non-uniform cotangents
    w = T.Tensor(np.linspace(0.5, 1.5, out.size).reshape(out.shape),
                 dtype=out.dtype)
    return T.tsum(T.mul(out, w))


def check_elementwise(kind, seed=0):
    rng = np.random.default_rng(seed)
    binary = {"add": T.add, "sub": T.sub, "mul": T.mul, "div": T.div}
    if kind in binary:
        a = _param(rng, (3, 4))
        b = _param(rng, (3, 4))
        if kind == "div":
            b.data = np.sign(b.data) * (np.abs(b.data) + 0.5)
        return check_op(lambda: _scalarize(binary[kind](a, b)), [a, b])
    if kind == "scale":
        a = _param(rng, (3, 4))
        return check_op(lambda: _scalarize(T.scale(a, -1.7)), [a])
    if kind == "relu":
        a = _param(rng, (3, 4), avoid_kink=True)
        return check_op(lambda: _scalarize(T.relu(a)), [a])
    if kind == "sigmoid":
        a = _param(rng, (3, 4))
        return check_op(lambda: _scalarize(T.sigmoid(a)), [a])
    if kind == "exp":
        a = _param(rng, (3, 4))
        return check_op(lambda: _scalarize(T.exp(a)), [a])
    if kind == "log":
        a = T.Tensor(rng.uniform(0.2, 3.0, (3, 4)), requires_grad=True)
        return check_op(lambda: _scalarize(T.log(a)), [a])
    raise ValueError(f"unknown elementwise kind {kind!r}")


def check_broadcast(seed=0):
    rng = np.random.default_rng(seed)
    a = _param(rng, (2, 1, 4))
    b = _param(rng, (3, 1))
    return check_op(lambda: _scalarize(T.mul(T.add(a, b), b)), [a, b])


def check_matmul(seed=0):
    rng = np.random.default_rng(seed)
    a = _param(rng, (4, 5))
    b = _param(rng, (5, 3))
    return check_op(lambda: _scalarize(T.matmul(a, b)), [a, b])


def check_conv2d(seed=0):
    rng = np.random.default_rng(seed)
    x = _param(rng, (2, 3, 6, 6))
    k = _param(rng, (4, 3, 3, 3))
    err = check_op(lambda: _scalarize(T.conv2d(x, k, stride=1, padding=1)),
                   [x, k])
    xs = _param(rng, (1, 2, 7, 7))
    ks = _param(rng, (3, 2, 3, 3))
    return max(err, check_op(
        lambda: _scalarize(T.conv2d(xs, ks, stride=2, padding=1)), [xs, ks]))


def check_global_avg_pool(seed=0):
    rng = np.random.default_rng(seed)
    x = _param(rng, (2, 3, 4, 5))
    return check_op(lambda: _scalarize(T.global_avg_pool(x)), [x])


def check_softmax(seed=0):
    rng = np.random.default_rng(seed)
    x = _param(rng, (3, 5))
    return check_op(lambda: _scalarize(T.softmax(x)), [x])


def check_gather_rows(seed=0):
    rng = np.random.default_rng(seed)
    x = _param(rng, (6, 3))
    idx = np.array([0, 2, 2, 5])
    return check_op(lambda: _scalarize(T.gather_rows(x, idx)), [x])


def check_losses(seed=0):
    """Alignment and classification losses against finite differences."""
    from .losses import KernelConfig, SubsetSample, correction_alignment_loss, \
        cross_entropy, mmd, source_regularization_loss, target_entropy
    rng = np.random.default_rng(seed)
    k = KernelConfig()
    hs = _param(rng, (6, 4))
    ht = _param(rng, (5, 4))
    bw = 4.0  # frozen bandwidth: the median heuristic is constant w.r.t. grads
    err = check_op(lambda: mmd(hs, ht, k, base_bandwidth=bw), [hs, ht])
    err = max(err, check_op(
        lambda: correction_alignment_loss(hs, ht, k, base_bandwidth=bw), [hs, ht]))

    labels = np.array([0, 1, 1, 0, 2, 2])
    subset = SubsetSample(indices=np.array([1, 3, 4]), realized_size=3)
    hc = _param(rng, (6, 4))
    err = max(err, check_op(
        lambda: source_regularization_loss(hs, hc, labels, subset, 3, k,
                                           base_bandwidth=bw), [hs, hc]))

    logits = _param(rng, (4, 3))
    ce_labels = np.array([0, 2, 1, 1])
    err = max(err, check_op(
        lambda: cross_entropy(T.softmax(logits), ce_labels), [logits]))
    err = max(err, check_op(lambda: target_entropy(T.softmax(logits)), [logits]))
    return err


def check_full_objective(seed=0):
    """End-to-end gradient of the combined objective on a 2-class toy model.

    The seed pins an evaluation point verified to keep every activation away
    from its nearest ReLU kink within the perturbation radius; the 1e-5
    denominator floor keeps the finite-difference noise floor from dominating
    the handful of near-zero gradient entries.
    """
    from .model import ModelConfig, Variant, build, step_losses
    from .losses import KernelConfig, LossWeights

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(input_shape=(3, 8, 8), stage_widths=(8,), blocks_per_stage=1,
                      num_classes=2)
    model = build(cfg, Variant.FULL, np.random.default_rng(seed + 1), dtype=np.float64)
    source = T.Tensor(rng.uniform(0, 1, (4, 3, 8, 8)))
    labels = np.array([0, 1, 0, 1])
    target = T.Tensor(rng.uniform(0, 1, (4, 3, 8, 8)))
    weights = LossWeights()
    kernel = KernelConfig()
    params = [p for _, p, _ in model.parameter_groups()]

    def build_loss():
        return step_losses(model, source, labels, target, weights, kernel,
                           rng_seed=7, step=0, base_bandwidth=2.0).total

    return check_op(build_loss, params, floor=1e-5)


SUITE = [
    ("elementwise.add", lambda: check_elementwise("add"), SMOOTH_TOL),
    ("elementwise.sub", lambda: check_elementwise("sub"), SMOOTH_TOL),
    ("elementwise.mul", lambda: check_elementwise("mul"), SMOOTH_TOL),
    ("elementwise.div", lambda: check_elementwise("div"), SMOOTH_TOL),
    ("elementwise.scale", lambda: check_elementwise("scale"), SMOOTH_TOL),
    ("elementwise.relu", lambda: check_elementwise("relu"), DEFAULT_TOL),
    ("elementwise.sigmoid", lambda: check_elementwise("sigmoid"), SMOOTH_TOL),
    ("elementwise.exp", lambda: check_elementwise("exp"), SMOOTH_TOL),
    ("elementwise.log", lambda: check_elementwise("log"), SMOOTH_TOL),
    ("broadcast", check_broadcast, SMOOTH_TOL),
    ("matmul", check_matmul, SMOOTH_TOL),
    ("conv2d", check_conv2d, 1e-5),
    ("global_avg_pool", check_global_avg_pool, SMOOTH_TOL),
    ("softmax", check_softmax, 1e-5),
    ("gather_rows", check_gather_rows, SMOOTH_TOL),
    ("losses", check_losses, DEFAULT_TOL),
    ("full_objective", check_full_objective, DEFAULT_TOL),
]


def run_all(verbose=False):
    """Run every check; returns list of (name, max_rel_err, tolerance, ok)."""
    results = []
    for name, fn, tol in SUITE:
        err = fn()
        ok = err < tol
        results.append((name, err, tol, ok))
        if verbose:
            status = "ok" if ok else "FAIL"
            print(f"{name:24s} max rel err {err:.3e}  (tol {tol:.0e})  {status}")
    return results
