"""Adaptive-step gradient ascent used by the E- and M-steps.

Sign-based per-parameter step adaptation: steps grow while the objective
improves and the gradient keeps its sign, shrink on sign flips, and a
whole proposal is rejected (backtracked) whenever it would decrease the
objective.  Deterministic given the starting point.
"""

import numpy as np

from .exceptions import TrainingError

GROW = 1.2
SHRINK = 0.5
STEP_MIN = 1e-12
STEP_MAX = 1e2


def ascend(value_and_grad, x0, n_iter, init_step=0.05, tol=0.0):
    """Maximize a differentiable objective.

    Parameters
    ----------
    value_and_grad : callable
        Maps a parameter vector to ``(value, gradient)``.
    x0 : array
        Starting point.
    n_iter : int
        Number of proposal rounds.
    init_step : float
        Initial per-parameter step size.
    tol : float
        Early exit when the best value improves by less than ``tol``
        over a round (0 disables).

    Returns
    -------
    (x_best, value_best, trace) where trace lists the accepted values.
    """
    x = np.asarray(x0, dtype=float).copy()
    value, grad = value_and_grad(x)
    if not np.isfinite(value):
        raise TrainingError("objective not finite at the starting point")
    steps = np.full(x.shape, init_step)
    prev_sign = np.zeros_like(x)
    trace = [value]
    for _ in range(int(n_iter)):
        sign = np.sign(grad)
        proposal = x + steps * sign
        new_value, new_grad = value_and_grad(proposal)
        if np.isfinite(new_value) and new_value >= value:
            flipped = (sign * prev_sign) < 0
            steps[flipped] *= SHRINK
            steps[~flipped] *= GROW
            np.clip(steps, STEP_MIN, STEP_MAX, out=steps)
            improvement = new_value - value
            x, value, grad = proposal, new_value, new_grad
            prev_sign = sign
            trace.append(value)
            if tol > 0 and improvement < tol:
                break
        else:
            # Backtrack: keep the iterate, shrink every step.
            steps *= SHRINK
            np.clip(steps, STEP_MIN, STEP_MAX, out=steps)
            trace.append(value)
            if np.all(steps <= STEP_MIN):
                break
    return x, value, trace
