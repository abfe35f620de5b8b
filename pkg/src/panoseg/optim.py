"""AdamW with a polynomial learning-rate schedule."""

from __future__ import annotations

import warnings

import numpy as np

from .autodiff import NumericError, Tensor


def poly_lr(step, base_lr, max_iter, power=0.9):
    """base_lr * (1 - step/max_iter)^power, clamped to 0 past max_iter."""
    if step > max_iter:
        warnings.warn(
            f"poly_lr: step {step} exceeds max_iter {max_iter}; learning rate clamped to 0",
            RuntimeWarning,
        )
        return 0.0
    return base_lr * (1.0 - step / max_iter) ** power


class AdamW:
    """Decoupled-weight-decay Adam over named parameters.

    Holds the per-parameter first/second moments and the step counter, and
    exposes the poly schedule through `current_lr()`. Updates are
    deterministic given identical inputs. A non-finite gradient aborts the
    whole step (no parameter is touched) and reports the offending
    parameter by name.
    """

    def __init__(self, named_params, base_lr, weight_decay=1e-4, max_iter=1000,
                 power=0.9, betas=(0.9, 0.999), eps=1e-8):
        if isinstance(named_params, dict):
            named_params = list(named_params.items())
        self.params: list[tuple[str, Tensor]] = list(named_params)
        self.base_lr = float(base_lr)
        self.weight_decay = float(weight_decay)
        self.max_iter = int(max_iter)
        self.power = float(power)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def current_lr(self):
        return poly_lr(self.step_count, self.base_lr, self.max_iter, self.power)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        for name, p in self.params:
            g = p.grad
            if g is None:
                raise NumericError(f"parameter '{name}' has no gradient; call backward first")
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter '{name}'; step aborted")
        lr = self.current_lr()
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params:
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p.data -= lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data)
