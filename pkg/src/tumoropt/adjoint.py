"""Discrete adjoint: exact transpose of the linearized time stepping.

The multiplier of the step-k residual is computed by marching backwards,
transposing each step operator in the trapezoid-weighted inner product and
transporting the next multiplier with the transposed coupling between
levels.  The stored snapshots are rescaled by the time quadrature weights so
that the reduced gradient reads pointwise as (-h(phi) p + b0 u1, r + b0 u2);
with this convention the duality identity between the linearized and adjoint
solves holds to round-off by construction.

Terminal data are kept in dedicated fields: p(T) = 0, r(T) = 0 and
q(T) = b2 (phi(T) - target) / beta, so (p + beta q)(T) matches the tracking
misfit exactly and vanishes when b2 = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Control, CostSpec
from .problem import ControlProblem
from .sensitivity import StepFactors
from .state import StateTrajectory


@dataclass(eq=False)
class AdjointTrajectory:
    """Adjoint snapshots (p, q, r) plus exact terminal-time fields.

    p, q, r hold the weight-rescaled multipliers on levels 1..N_t; level 0 is
    zero (no step residual pairs with it).  terminal_p/q/r carry the discrete
    terminal conditions at t = T.
    """

    p: np.ndarray
    q: np.ndarray
    r: np.ndarray
    terminal_p: np.ndarray
    terminal_q: np.ndarray
    terminal_r: np.ndarray

    def multiplier(self, k: int, wt: np.ndarray) -> np.ndarray:
        """Raw step-k multiplier (undo the quadrature rescaling)."""
        return wt[k] * np.concatenate([self.p[k], self.q[k], self.r[k]])


def solve_adjoint(problem: ControlProblem, state: StateTrajectory,
                  ubar: Control, cost: CostSpec | None = None,
                  factors: StepFactors | None = None) -> AdjointTrajectory:
    """Backward march of the transposed linearized system.

    The sources are the tracking misfits: b1 w_k (phi_k - target_Q_k) on
    every level and additionally b2 (phi_N - target_Omega) at the final one.
    Zero sources short-circuit to exactly zero multipliers.
    """
    cost = cost or problem.cost
    if factors is None:
        factors = StepFactors(problem, state, ubar, lam1=1)
    elif factors.lam1 != 1:
        raise ValueError("adjoint march needs factors with l1 = 1")
    stepper = factors.stepper
    n = problem.grid.n
    n_steps = problem.tgrid.steps
    wt = problem.tgrid.weights()
    target_q = (cost.target_Q if cost.target_Q is not None
                else np.zeros((n_steps + 1, n)))
    target_omega = (cost.target_Omega if cost.target_Omega is not None
                    else np.zeros(n))

    p = np.zeros((n_steps + 1, n))
    q = np.zeros((n_steps + 1, n))
    r = np.zeros((n_steps + 1, n))

    misfit_T = state.phi[n_steps] - target_omega
    lam_next = np.zeros(3 * n)
    zeros = np.zeros(n)
    for k in range(n_steps, 0, -1):
        src_q = cost.b1 * wt[k] * (state.phi[k] - target_q[k])
        if k == n_steps:
            src_q = src_q + cost.b2 * misfit_T
        rhs = np.concatenate([zeros, src_q, zeros])
        rhs = rhs + stepper.transport_adjoint(lam_next)
        if np.any(rhs):
            lam = stepper.solve_adjoint_step(factors.lu(k), rhs)
        else:
            lam = np.zeros(3 * n)
        p[k], q[k], r[k] = stepper.split(lam / wt[k])
        lam_next = lam

    return AdjointTrajectory(
        p=p, q=q, r=r,
        terminal_p=np.zeros(n),
        terminal_q=cost.b2 * misfit_T / problem.params.beta,
        terminal_r=np.zeros(n))
