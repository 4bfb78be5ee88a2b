"""Central finite-difference verification of every differentiable operator.

The checker is deliberately independent of the tape: it re-evaluates the
forward map at nudged inputs and compares the quotient against the analytic
gradient. Used by the test suite and by the ``jexpand gradcheck`` command.
"""

from __future__ import annotations

import time

import numpy as np

from . import tensor as T
from .tensor import Tensor


def numerical_grad(f, arrays, wrt, h=1e-3):
    """Central-difference gradient of scalar ``f(*arrays)`` w.r.t. ``arrays[wrt]``."""
    base = [a.copy() for a in arrays]
    g = np.zeros_like(base[wrt], dtype=np.float64)
    flat = base[wrt].reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = np.float32(orig + h)
        fp = float(f(*base))
        flat[i] = np.float32(orig - h)
        fm = float(f(*base))
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_error(analytic, numeric):
    """max |a - n| / max(1, |a|, |n|), elementwise; scale-guarded for float32."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom))


def check_op(build, arrays, h=1e-3):
    """Compare tape gradients of ``build(*tensors)`` against finite differences.

    ``build`` maps Tensors to a scalar Tensor. Returns the max relative error
    over all inputs.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    if out.data.shape != ():
        raise ValueError("check_op expects a scalar-valued build function")
    out.backward()
    worst = 0.0
    for i, t in enumerate(tensors):
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)

        def f(*arrs):
            ts = [Tensor(a) for a in arrs]
            return build(*ts).item()

        num = numerical_grad(f, [t.data for t in tensors], i, h=h)
        worst = max(worst, max_rel_error(ana, num))
    return worst


def _away_from_kinks(rng, shape, margin=0.05):
    # keep finite-difference probes off ReLU-style kinks
    a = rng.standard_normal(shape).astype(np.float32)
    a = a + np.sign(a) * margin
    a[a == 0.0] = margin
    return a


def _suite(rng):
    """(name, builder, input arrays, tolerance) for every differentiable op."""
    cases = []

    def rand(*shape):
        return rng.standard_normal(shape).astype(np.float32)

    def probe_for(build_op, *arrays):
        # fixed random linear scalarization: less float32 cancellation than
        # squaring, and its gradient is exactly one Jacobian-transpose apply
        out = build_op(*(Tensor(a) for a in arrays))
        r = rng.standard_normal(out.data.shape).astype(np.float32)
        probe = Tensor(r)
        return lambda *ts: T.mean(T.mul(build_op(*ts), probe))

    for i in range(5):
        N, C, F = 1 + i % 2, 1 + i, 2 + (i % 3)
        H = 5 + i
        k, s, p = (3, 1, 1) if i % 2 == 0 else (4, 2, 1)
        conv_in = [rand(N, C, H, H), rand(F, C, k, k), rand(F)]
        conv_op = lambda x, w, b, s=s, p=p: T.conv2d(x, w, b, stride=s, pad=p)
        cases.append(("conv2d", probe_for(conv_op, *conv_in), conv_in, 1e-3))
        ct_in = [rand(N, F, 4 + i % 3, 4 + i % 3), rand(F, C, k, k), rand(C)]
        ct_op = lambda x, w, b, s=s, p=p: T.conv_transpose2d(x, w, b, stride=s, pad=p)
        cases.append(("conv_transpose2d", probe_for(ct_op, *ct_in), ct_in, 1e-3))
        cases.append((
            "instance_norm",
            lambda x, g, b: T.mean(T.square(T.instance_norm(x, g, b, eps=1e-4))),
            [rand(1 + i % 2, 1 + i % 3, 3 + i % 2, 3), rand(1 + i % 3), rand(1 + i % 3)],
            1e-3,
        ))
        cases.append((
            "batch_norm",
            lambda x, g, b: T.mean(T.square(
                T.batch_norm(x, g, b, None, training=True, eps=1e-4))),
            [rand(2 + i % 2, 1 + i % 3, 3, 3 + i % 2), rand(1 + i % 3), rand(1 + i % 3)],
            1e-3,
        ))
        cases.append((
            "relu",
            lambda x: T.mean(T.square(T.relu(x))),
            [_away_from_kinks(rng, (3, 4 + i))],
            1e-3,
        ))
        cases.append((
            "leaky_relu",
            lambda x: T.mean(T.square(T.leaky_relu(x, 0.2))),
            [_away_from_kinks(rng, (2, 5 + i))],
            1e-3,
        ))
        cases.append((
            "tanh",
            lambda x: T.mean(T.square(T.tanh(x))),
            [rand(3, 3 + i)],
            1e-3,
        ))
        cases.append((
            "softplus",
            lambda x: T.mean(T.square(T.softplus(x))),
            [rand(2, 4 + i)],
            1e-3,
        ))
        cases.append((
            "sqrt",
            lambda x: T.mean(T.sqrt(x)),
            [np.abs(rand(3, 3 + i)) + 0.5],
            1e-3,
        ))
        cases.append((
            "elementwise",
            lambda a, b: T.mean(T.square(T.mul(T.add(a, b), T.sub(a, 0.5)))),
            [rand(3, 2 + i), rand(3, 2 + i)],
            1e-3,
        ))
    return cases


def loss_suite(rng):
    """Gradient checks for the loss heads (charbonnier, lsgan, ssim, bce, l1)."""
    from . import losses

    def rand(*shape):
        return rng.standard_normal(shape).astype(np.float32)

    cases = []
    for i in range(5):
        shape = (2, 1, 4 + i, 4 + i)
        cases.append((
            "charbonnier",
            lambda p, t: losses.charbonnier(p, t, eps=1e-3),
            [rand(*shape), rand(*shape)],
            1e-3,
        ))
        cases.append((
            "lsgan_d_loss",
            lambda r, f: losses.lsgan_d_loss(r, f),
            [rand(2, 1, 3 + i, 3), rand(2, 1, 3 + i, 3)],
            1e-3,
        ))
        cases.append((
            "lsgan_g_adv_loss",
            lambda f: losses.lsgan_g_adv_loss(f),
            [rand(2, 1, 3, 3 + i)],
            1e-3,
        ))
        tgt = rand(*shape)
        cases.append((
            "l1_loss",
            lambda p, t: losses.l1_loss(p, t),
            # keep the residual away from the |.| kink so the quotient is clean
            [tgt + _away_from_kinks(rng, shape), tgt],
            1e-3,
        ))
        cases.append((
            "bce_adv",
            lambda r, f: T.add(*losses.bce_adv_losses(r, f)),
            [rand(2, 1, 3, 3), rand(2, 1, 3, 3)],
            1e-3,
        ))
    # ssim_loss is heavier; 5 shapes but a single size class
    for i in range(5):
        img = rng.uniform(-0.8, 0.8, size=(1, 1, 16, 16)).astype(np.float32)
        tgt = rng.uniform(-0.8, 0.8, size=(1, 1, 16, 16)).astype(np.float32)
        cases.append((
            "ssim_loss",
            lambda p, t: losses.ssim_loss(p, t, peak=2.0),
            [img, tgt],
            1e-3,
        ))
    return cases


def run_suite(ops="all", seed=0, include_losses=True):
    """Run the whole gradient suite; returns (results, elapsed_seconds).

    ``results`` is a list of (op_name, max_rel_err, tolerance, passed).
    """
    rng = np.random.default_rng(seed)
    cases = _suite(rng)
    if include_losses:
        cases += loss_suite(rng)
    if ops != "all":
        cases = [c for c in cases if c[0] == ops]
        if not cases:
            raise KeyError(f"unknown op name: {ops!r}")
    t0 = time.perf_counter()
    worst = {}
    for name, build, arrays, tol in cases:
        err = check_op(build, arrays)
        prev = worst.get(name, (0.0, tol))
        worst[name] = (max(prev[0], err), tol)
    results = [(name, err, tol, err < tol) for name, (err, tol) in sorted(worst.items())]
    return results, time.perf_counter() - t0
