"""Adam with bias correction, one state per named parameter set."""

from __future__ import annotations

import logging

import numpy as np

logger = logging.getLogger(__name__)


class AdamState:
    """Per-parameter first/second moment buffers plus shared step count.

    lr/beta1/beta2/eps are plain config fields; the conditional-GAN
    convention beta1=0.5 is the default, not a constant.
    """

    def __init__(self, params, lr, beta1=0.5, beta2=0.999, eps=1e-8):
        if lr <= 0.0:
            raise ValueError("Adam lr must be positive")
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ValueError("Adam betas must lie in (0, 1)")
        if eps <= 0.0:
            raise ValueError("Adam eps must be positive")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.skipped_steps = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}


def adam_step(params, state):
    """One bias-corrected update, in place, from each parameter's ``.grad``.

    A missing gradient counts as zero. Any non-finite gradient skips the
    whole update (moments and step count untouched) and bumps
    ``state.skipped_steps`` with a warning, so a single bad batch cannot
    poison the moments.
    """
    grads = {}
    for name, t in params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if g.shape != t.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} != parameter shape {t.data.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            state.skipped_steps += 1
            logger.warning("adam_step skipped: non-finite gradient in %r "
                           "(%d skips so far)", name, state.skipped_steps)
            return False
        grads[name] = g

    state.step_count += 1
    t = state.step_count
    b1, b2 = np.float32(state.beta1), np.float32(state.beta2)
    bc1 = np.float32(1.0 - state.beta1 ** t)
    bc2 = np.float32(1.0 - state.beta2 ** t)
    lr = np.float32(state.lr)
    eps = np.float32(state.eps)
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (np.float32(1.0) - b1) * g
        v *= b2
        v += (np.float32(1.0) - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        params[name].data -= lr * mhat / (np.sqrt(vhat) + eps)
    return True


def zero_grads(params):
    for t in params.values():
        t.grad = None
