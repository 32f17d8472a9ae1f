"""Central finite-difference verification of tape gradients.

All checks run in float64: the h^2 truncation error of central differences
(h = 1e-5) sits near 1e-10, far below the 1e-6 per-op tolerance, while
float32 rounding alone would exceed it.
"""

import numpy as np

from .tensor import Tensor, backward

FD_STEP = 1e-5
PER_OP_TOL = 1e-6
COMPOSED_TOL = 1e-4


def rel_error(a, b):
    """Elementwise |a-b| / max(|a|+|b|, 1), reduced to the worst entry."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(b), 1.0)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def fd_gradient(build_loss, tensor, h=FD_STEP):
    """Full central-difference gradient of build_loss() wrt one tensor."""
    flat = tensor.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = build_loss().item()
        flat[i] = orig - h
        fm = build_loss().item()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(tensor.data.shape)


def check_gradients(build_loss, tensors, h=FD_STEP, samples=None, rng=None):
    """Compare tape gradients of build_loss() against central differences.

    tensors: dict name -> Tensor (all requires_grad).  With ``samples`` set,
    only that many randomly chosen entries per tensor are probed, which keeps
    whole-model checks tractable; None probes every entry.
    Returns the worst relative error over all probed entries.
    """
    for t in tensors.values():
        t.zero_grad()
    loss = build_loss()
    backward(loss)
    analytic = {name: t.grad.copy() for name, t in tensors.items()}

    worst = 0.0
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        if samples is None or samples >= flat.size:
            idxs = np.arange(flat.size)
        else:
            idxs = rng.choice(flat.size, size=samples, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = build_loss().item()
            flat[i] = orig - h
            fm = build_loss().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = rel_error(ga[i], numeric)
            if err > worst:
                worst = err
    return worst


# -- the op-by-op and whole-model check suite ---------------------------------


def _t64(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def _kink_free(t, margin=0.1):
    """Push values away from zero so relu's kink cannot straddle the FD step."""
    t.data += np.where(t.data >= 0, margin, -margin)
    return t


def _op_cases(rng):
    """(name, build_loss, tensors) triple per differentiable op.

    Each loss is a scalar reduction of the op under test; shapes are small
    enough for exhaustive entry-by-entry differencing.
    """
    from . import tensor as T

    a, b = _t64(rng, 3, 4), _t64(rng, 3, 4)
    row = _t64(rng, 4)
    m1, m2 = _t64(rng, 2, 3, 4), _t64(rng, 2, 4, 2)
    act = _kink_free(_t64(rng, 3, 4))
    img = _t64(rng, 1, 2, 6, 6)
    cw = _t64(rng, 3, 2, 3, 3)
    cb = _t64(rng, 3)
    tw = _t64(rng, 2, 3, 2, 2)
    pool_in = _t64(rng, 1, 2, 4, 4)
    att = _t64(rng, 2, 3, 4)
    pts = _t64(rng, 1, 5, 3)
    idx = np.array([[[0, 2], [4, 1], [3, 3]]])
    pred_src = _t64(rng, 2, 5)
    target = (rng.random((2, 5)) > 0.5).astype(np.float64)
    cat_a, cat_b = _t64(rng, 1, 2, 3, 3), _t64(rng, 1, 4, 3, 3)
    flat_in = _t64(rng, 1, 3, 2, 4)
    nar = _t64(rng, 2, 6)

    def red(x):
        return T.tsum(T.mul(x, x))

    return [
        ("add", lambda: red(T.add(a, row)), {"a": a, "row": row}),
        ("mul", lambda: red(T.mul(a, b)), {"a": a, "b": b}),
        ("matmul", lambda: red(T.matmul(m1, m2)), {"m1": m1, "m2": m2}),
        ("relu", lambda: red(T.relu(act)), {"act": act}),
        ("sigmoid", lambda: red(T.sigmoid(a)), {"a": a}),
        ("reshape", lambda: red(T.reshape(a, (4, 3))), {"a": a}),
        ("transpose", lambda: red(T.transpose(m1, (2, 0, 1))), {"m1": m1}),
        ("concat", lambda: red(T.concat([a, b], axis=1)), {"a": a, "b": b}),
        ("narrow", lambda: red(T.narrow(nar, 1, 2, 3)), {"nar": nar}),
        ("tsum", lambda: red(T.tsum(m1, axis=1)), {"m1": m1}),
        ("mean", lambda: T.mean(T.mul(a, a)), {"a": a}),
        ("reduce_max", lambda: red(T.reduce_max(m1, axis=2)), {"m1": m1}),
        ("softmax_rows", lambda: red(T.softmax_rows(att)), {"att": att}),
        ("gather_points", lambda: red(T.gather_points(pts, idx)), {"pts": pts}),
        ("conv2d", lambda: red(T.conv2d(img, cw, cb, padding=1)),
         {"img": img, "cw": cw, "cb": cb}),
        ("transpose_conv2x2", lambda: red(T.transpose_conv2x2(img, tw, cb)),
         {"img": img, "tw": tw, "cb": cb}),
        ("maxpool2x2", lambda: red(T.maxpool2x2(pool_in)), {"pool_in": pool_in}),
        ("concat_channels", lambda: red(T.concat_channels(cat_a, cat_b)),
         {"cat_a": cat_a, "cat_b": cat_b}),
        ("flatten_spatial", lambda: red(T.flatten_spatial(flat_in)),
         {"flat_in": flat_in}),
        ("bce_loss", lambda: T.bce_loss(T.sigmoid(pred_src), target),
         {"pred_src": pred_src}),
    ]


def gradcheck_model_case(seed=0):
    """Small full-pipeline config for composed checking: 32px input, two
    2D stages, two point levels, 16-wide fusion, 64 points."""
    from . import tensor as T
    from .geometry import PointCloud
    from .model import ModelConfig, init_model_params, model_forward
    from .optim import make_rng
    from .pointnet import SALevelConfig

    cfg = ModelConfig(base_channels=4, depth=2, dim=16, max_points=64,
                      sa_levels=(SALevelConfig(16, 4, (8, 8)),
                                 SALevelConfig(4, 4, (16, 16))))
    rng = make_rng(seed)
    params = init_model_params(rng, cfg)
    for p in params.values():
        p.data = p.data.astype(np.float64)
    images = Tensor(rng.standard_normal((1, cfg.in_channels, 32, 32)))
    coords = rng.standard_normal((1, cfg.max_points, 3))
    feats = Tensor(coords.copy(), dtype=np.float64)
    cloud = PointCloud(coords, feats, np.array([cfg.max_points]))
    target = (rng.random((1, 1, 32, 32)) > 0.9).astype(np.float64)

    def build_loss():
        return T.bce_loss(model_forward(images, cloud, cfg, params), target)

    return build_loss, params


def run_gradcheck_suite(seed=0, samples=2):
    """Finite-difference audit: every op exhaustively, then the whole model.

    Returns (rows, ok) where each row is a dict with the op name, measured
    worst relative error, its tolerance, and a pass flag.  The composed row
    probes ``samples`` random entries of every parameter tensor.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for name, build_loss, tensors in _op_cases(rng):
        err = check_gradients(build_loss, tensors)
        rows.append({"op": name, "max_rel_err": err, "tol": PER_OP_TOL,
                     "pass": err < PER_OP_TOL})
    build_loss, params = gradcheck_model_case(seed)
    err = check_gradients(build_loss, params, samples=samples, rng=rng)
    rows.append({"op": "composed_model", "max_rel_err": err, "tol": COMPOSED_TOL,
                 "pass": err < COMPOSED_TOL})
    return rows, all(r["pass"] for r in rows)
