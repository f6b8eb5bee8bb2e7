"""Shared assembly for one implicit time step and its linearizations.

The backward Euler step for the three coupled fields x = (mu, phi, sigma)
solves R(x; x_prev, u) = 0 with

    R1 = a/dt (mu-mu-) + 1/dt (phi-phi-) - Lap mu - P(phi) m + h(phi) u1
    R2 = b/dt (phi-phi-) - Lap phi + F'(phi) - mu - chi sigma
    R3 = 1/dt (sigma-sigma-) - Lap sigma + chi Lap phi + P(phi) m - u2

where m = sigma + chi (1 - phi) - mu.  The Jacobian of R at a state snapshot
doubles as the step operator of the linearized, bilinearized and adjoint
systems.  A switch lam1 multiplies exactly the reaction and coupling entries
(P, P', F'', h' u1, and the chi sigma coupling in the second equation), while
the transport and diffusion structure stays; this reproduces the generalized
linear problem whose lam-flag specializations are the linearized system, the
pure-source system, and the initial-value system.

All inner products are trapezoid-weighted, and every Jacobian block is
self-adjoint with respect to those weights.  The adjoint step can therefore
reuse a factorization of the forward Jacobian: solving A* y = s amounts to
y = W^-1 A^-T (W s), which `scipy`'s LU object provides via trans="T".
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sps
from scipy.sparse.linalg import splu

from .errors import ConfigError
from .grid import Grid
from .model import (ModelParams, NonlinearitySpec, PotentialSpec,
                    _f1_eval, _f2_eval, prox_f1, yosida_derivative,
                    yosida_second, yosida_third)


class Stepper:
    """Residuals, Jacobians and transport for one backward Euler step."""

    def __init__(self, grid: Grid, params: ModelParams, potential: PotentialSpec,
                 nonlin: NonlinearitySpec, dt: float,
                 yosida_eps: float | None = None):
        if dt <= 0.0:
            raise ValueError("time step must be positive")
        if potential.kind == "obstacle" and yosida_eps is None:
            raise ConfigError(
                "the obstacle potential can only be stepped through its "
                "Yosida regularization; set a positive yosida_eps")
        if yosida_eps is not None and yosida_eps <= 0.0:
            raise ConfigError("yosida_eps must be positive")
        self.grid = grid
        self.params = params
        self.potential = potential
        self.nonlin = nonlin
        self.dt = float(dt)
        self.yosida_eps = yosida_eps

        n = grid.n
        self.n = n
        self.s_a = params.alpha / dt
        self.s_b = params.beta / dt
        self.s = 1.0 / dt
        self.chi = params.chi

        eye = sps.identity(n, format="csr")
        lap = grid.lap
        # lam1-independent structure of the Jacobian
        self._K = sps.bmat([
            [self.s_a * eye - lap, self.s * eye, None],
            [-eye, self.s_b * eye - lap, None],
            [None, self.chi * lap, self.s * eye - lap],
        ], format="csc")
        self.w3 = np.concatenate([grid.weights] * 3)
        # scale of residual entries, used for convergence thresholds
        row_abs = np.abs(lap).sum(axis=1).max()
        self.coef_scale = float((params.alpha + params.beta + 1.0) / dt
                                + 3.0 * row_abs
                                + nonlin.sup_P * (1.0 + params.chi)
                                + nonlin.sup_H)

    # -- potential derivatives, Yosida-aware ------------------------------

    def fvalue(self, phi: np.ndarray) -> np.ndarray:
        if self.yosida_eps is None:
            return (_f1_eval(self.potential, phi, 0)
                    + _f2_eval(self.potential, phi, 0))
        eps = self.yosida_eps
        s = prox_f1(self.potential, eps, phi)
        envelope = _f1_eval(self.potential, s, 0) + (phi - s) ** 2 / (2.0 * eps)
        return envelope + _f2_eval(self.potential, phi, 0)

    def fprime(self, phi: np.ndarray) -> np.ndarray:
        if self.yosida_eps is None:
            f1 = _f1_eval(self.potential, phi, 1)
        else:
            f1 = yosida_derivative(self.potential, self.yosida_eps, phi)
        return f1 + _f2_eval(self.potential, phi, 1)

    def fsecond(self, phi: np.ndarray) -> np.ndarray:
        if self.yosida_eps is None:
            f1 = _f1_eval(self.potential, phi, 2)
        else:
            f1 = yosida_second(self.potential, self.yosida_eps, phi)
        return f1 + _f2_eval(self.potential, phi, 2)

    def fthird(self, phi: np.ndarray) -> np.ndarray:
        if self.yosida_eps is None:
            f1 = _f1_eval(self.potential, phi, 3)
        else:
            f1 = yosida_third(self.potential, self.yosida_eps, phi)
        return f1 + _f2_eval(self.potential, phi, 3)

    # -- residual and Jacobian ---------------------------------------------

    @staticmethod
    def split(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = x.size // 3
        return x[:n], x[n:2 * n], x[2 * n:]

    def m_field(self, mu, phi, sigma) -> np.ndarray:
        return sigma + self.chi * (1.0 - phi) - mu

    def residual(self, x: np.ndarray, x_prev: np.ndarray,
                 u1k: np.ndarray, u2k: np.ndarray) -> np.ndarray:
        mu, phi, sigma = self.split(x)
        mu0, phi0, sigma0 = self.split(x_prev)
        lap = self.grid.lap
        m = self.m_field(mu, phi, sigma)
        pv = self.nonlin.eval("P", phi)
        hv = self.nonlin.eval("h", phi)
        lphi = lap @ phi
        r1 = (self.s_a * (mu - mu0) + self.s * (phi - phi0)
              - lap @ mu - pv * m + hv * u1k)
        r2 = (self.s_b * (phi - phi0) - lphi + self.fprime(phi)
              - mu - self.chi * sigma)
        r3 = (self.s * (sigma - sigma0) - lap @ sigma + self.chi * lphi
              + pv * m - u2k)
        return np.concatenate([r1, r2, r3])

    def assemble(self, mu, phi, sigma, u1k, lam1: float = 1.0) -> sps.csc_matrix:
        """Jacobian of the step residual with the reaction entries scaled by lam1."""
        if lam1 == 0.0:
            return self._K.copy()
        m = self.m_field(mu, phi, sigma)
        pv = self.nonlin.eval("P", phi)
        dpm = self.nonlin.eval("P", phi, 1) * m
        hpu = self.nonlin.eval("h", phi, 1) * u1k
        dg = sps.diags
        ones = np.ones(self.n)
        d = sps.bmat([
            [dg(pv), dg(-dpm + self.chi * pv + hpu), dg(-pv)],
            [None, dg(self.fsecond(phi)), dg(-self.chi * ones)],
            [dg(-pv), dg(dpm - self.chi * pv), dg(pv)],
        ], format="csc")
        return (self._K + lam1 * d).tocsc()

    def factorize(self, mu, phi, sigma, u1k, lam1: float = 1.0):
        return splu(self.assemble(mu, phi, sigma, u1k, lam1))

    def solve_adjoint_step(self, lu, rhs: np.ndarray) -> np.ndarray:
        """Solve A* y = rhs where A* is the weighted-inner-product transpose."""
        return lu.solve(self.w3 * rhs, trans="T") / self.w3

    # -- transport between consecutive levels ------------------------------

    def transport(self, x: np.ndarray) -> np.ndarray:
        mu, phi, sigma = self.split(x)
        return np.concatenate([
            self.s_a * mu + self.s * phi,
            self.s_b * phi,
            self.s * sigma,
        ])

    def transport_adjoint(self, lam: np.ndarray) -> np.ndarray:
        l1, l2, l3 = self.split(lam)
        return np.concatenate([
            self.s_a * l1,
            self.s * l1 + self.s_b * l2,
            self.s * l3,
        ])
