"""Adam with bias correction."""

from __future__ import annotations

import logging

import numpy as np

from ..errors import NumericError

log = logging.getLogger(__name__)


class AdamState:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(state: AdamState, params, grads, on_nonfinite="skip") -> bool:
    """One in-place Adam update; returns False when the step was skipped.

    A ``None`` gradient counts as zero.  Non-finite gradients either skip the
    step (logged) or raise, per ``on_nonfinite``.
    """
    if len(params) != len(state.m):
        raise ValueError("parameter list does not match optimizer state")
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    if not all(np.all(np.isfinite(g)) for g in grads):
        if on_nonfinite == "raise":
            raise NumericError("non-finite gradient in optimizer step")
        log.warning("skipping optimizer step %d: non-finite gradient", state.step_count + 1)
        return False
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(p.data.dtype, copy=False)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.data.dtype, copy=False)
    return True


class Adam:
    """Convenience wrapper reading ``.grad`` from the parameter tensors."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, on_nonfinite="skip"):
        self.params = list(params)
        self.state = AdamState(self.params, lr, betas[0], betas[1], eps)
        self.on_nonfinite = on_nonfinite

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = float(value)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self) -> bool:
        return adam_step(self.state, self.params, [p.grad for p in self.params], self.on_nonfinite)

    def state_arrays(self, prefix):
        out = {}
        for i, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            out[f"{prefix}.m{i}"] = m
            out[f"{prefix}.v{i}"] = v
        return out

    def load_state_arrays(self, prefix, arrays, step_count):
        for i in range(len(self.state.m)):
            self.state.m[i] = np.array(arrays[f"{prefix}.m{i}"], dtype=self.state.m[i].dtype)
            self.state.v[i] = np.array(arrays[f"{prefix}.v{i}"], dtype=self.state.v[i].dtype)
        self.state.step_count = int(step_count)
