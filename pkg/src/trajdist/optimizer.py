"""Historical gradient-projection optimizer.

Each step augments plain SGD on the head parameters with the projection of
the current gradient onto a subspace built from recently collected gradients:

    theta <- theta - eta * (g + (1/kappa) * M M^T g)

which is the (1/kappa) * (M M^T + kappa I) form rewritten. Until the first
subspace exists the step is plain SGD. The gradient is pushed into the
historical buffer after the step; when the buffer fills, the projector is
rebuilt from it and the buffer cleared.

Backbone parameters are owned by the caller and take plain SGD steps; only
the buffered head-gradient space is projected.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import linalg, trajectory
from .errors import DegenerateInputError, ValidationError

logger = logging.getLogger(__name__)


@dataclass
class OptState:
    """Single-owner optimizer state; steps are strictly sequential."""

    eta: float
    kappa: float
    tau: float
    buffer: trajectory.GradientBuffer
    projector: trajectory.Projector | None = None
    renewals: int = 0
    iteration: int = 0

    def __post_init__(self):
        if self.eta <= 0:
            raise ValidationError(f"eta must be positive, got {self.eta}")
        if self.kappa <= 0:
            raise ValidationError(f"kappa must be positive, got {self.kappa}")


def make_state(eta: float, kappa: float, tau: float, capacity: int) -> OptState:
    return OptState(
        eta=eta,
        kappa=kappa,
        tau=tau,
        buffer=trajectory.GradientBuffer(
            trajectory.BufferGroup.HISTORICAL, capacity=capacity
        ),
    )


def step(state: OptState, params: np.ndarray, g_tilde: np.ndarray) -> np.ndarray:
    """One update of the flattened head-parameter view; returns new params.

    With a projector: theta - eta * (g + (1/kappa) M M^T g); without: plain
    SGD. g_tilde is buffered after the update.
    """
    g = linalg.as_vector(g_tilde, "g_tilde")
    params = linalg.as_vector(params, "params")
    if g.shape != params.shape:
        raise ValidationError(
            f"gradient length {g.shape[0]} mismatches params {params.shape[0]}"
        )
    direction = g.copy()
    if state.projector is not None:
        direction += state.projector.apply(g) / state.kappa
    new_params = params - state.eta * direction
    state.buffer.push(g)
    state.iteration += 1
    return new_params


def maybe_renew(state: OptState) -> None:
    """Rebuild the historical projector when the buffer is full, then clear.

    A degenerate (all-zero) buffer keeps the previous projector and logs a
    warning; the buffer is still cleared to restart collection.
    """
    if not state.buffer.full:
        return
    try:
        state.projector = trajectory.build_projector(
            state.buffer, state.tau, build_iteration=state.iteration
        )
        state.renewals += 1
    except DegenerateInputError:
        logger.warning("historical buffer all-zero; keeping previous projector")
    state.buffer.clear()
