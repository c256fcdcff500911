"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import warnings
from typing import Callable

import numpy as np

from .tensor import OpaqueTape, Tensor, backward, no_grad, opaque_tape


class NonSmoothWarning(UserWarning):
    """The checked function passes a grad-requiring input through min/max."""


def grad_check(fn: Callable[[Tensor], Tensor], x, epsilon: float = 1e-6,
               freeze_nonsmooth: bool = False) -> float | None:
    """Max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.

    The input is promoted to float64. ``fn`` must return a single-element
    tensor and must be deterministic.

    If ``fn`` routes a grad-requiring value through a min/max reduction the
    function is not smooth in the usual sense. By default the check is then
    skipped (a :class:`NonSmoothWarning` is issued and ``None`` returned). With
    ``freeze_nonsmooth=True`` the min/max results of the unperturbed call are
    replayed during the finite-difference calls, which checks exactly the
    gradient the engine computes (those statistics held constant).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    tape = OpaqueTape()
    with opaque_tape(tape):
        out = fn(xt)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    if tape.flagged and not freeze_nonsmooth:
        warnings.warn(
            f"function uses {tape.flagged} min/max reduction(s) on the checked input; "
            "gradient check skipped",
            NonSmoothWarning,
            stacklevel=2,
        )
        return None
    if out.requires_grad:
        backward(out)
        analytic = xt.grad if xt.grad is not None else np.zeros_like(base)
    else:
        analytic = np.zeros_like(base)

    def evaluate(arr: np.ndarray) -> float:
        with no_grad():
            if freeze_nonsmooth:
                with opaque_tape(tape.replay()):
                    return fn(Tensor(arr)).item()
            return fn(Tensor(arr)).item()

    worst = 0.0
    flat = base.reshape(-1)
    a_flat = analytic.reshape(-1)
    for i in range(flat.size):
        plus = flat.copy()
        plus[i] += epsilon
        minus = flat.copy()
        minus[i] -= epsilon
        numeric = (evaluate(plus.reshape(base.shape)) - evaluate(minus.reshape(base.shape))) / (2 * epsilon)
        err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]))
        worst = max(worst, err)
    return worst
