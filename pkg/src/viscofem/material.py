"""Generalized Maxwell (Wiechert) material model.

An elastic branch (Lame parameters mu, lambda) in parallel with M
spring-dashpot arms, each carrying a shear-type modulus kappa_m and a
relaxation time tau_m. Arm m contributes the deviatoric stress
kappa_m * dev(u_ve_m), where the internal field u_ve_m is the
exponentially weighted running integral of the velocity.

Also provides the per-timestep update coefficients of the internal-field
recursion and an adaptive-quadrature convolution used as an oracle for
the discrete update.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad


def lame_from_engineering(E, nu):
    """Lame parameters (mu, lam) from Young's modulus and Poisson ratio."""
    if E <= 0:
        raise ValueError("Young's modulus must be positive")
    if not -1.0 < nu < 0.5:
        raise ValueError("Poisson ratio must lie in (-1, 0.5)")
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


def engineering_from_lame(mu, lam):
    """Inverse of lame_from_engineering."""
    E = mu * (3.0 * lam + 2.0 * mu) / (lam + mu)
    nu = lam / (2.0 * (lam + mu))
    return E, nu


@dataclass(frozen=True)
class MaxwellArm:
    kappa: float  # arm stiffness modulus [Pa]
    tau: float  # relaxation time [s]

    def __post_init__(self):
        if self.kappa <= 0 or self.tau <= 0:
            raise ValueError("arm modulus and relaxation time must be positive")


@dataclass(frozen=True)
class MaterialModel:
    """Density, elastic Lame pair, and the Maxwell arms."""

    rho: float
    mu: float
    lam: float
    arms: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("density must be positive")
        if self.mu <= 0 or self.lam < 0:
            raise ValueError("need mu > 0 and lam >= 0")
        object.__setattr__(
            self,
            "arms",
            tuple(a if isinstance(a, MaxwellArm) else MaxwellArm(*a) for a in self.arms),
        )

    @classmethod
    def from_engineering(cls, rho, E, nu, arms=()):
        mu, lam = lame_from_engineering(E, nu)
        return cls(rho, mu, lam, tuple(arms))

    @property
    def engineering(self):
        return engineering_from_lame(self.mu, self.lam)

    @property
    def n_arms(self):
        return len(self.arms)


@dataclass(frozen=True)
class StepCoefficients:
    """Per-arm update coefficients for one timestep k.

    alpha = k / (2 + k/tau),  beta = (2 - k/tau) / (2 + k/tau); the
    internal field advances as
    u_ve(t_n) = alpha*(u1(t_n) + u1(t_{n-1})) + beta*u_ve(t_{n-1}).
    """

    k: float
    alpha: np.ndarray
    beta: np.ndarray


def step_coefficients(arms, k) -> StepCoefficients:
    if k <= 0:
        raise ValueError("timestep must be positive")
    taus = np.array([arm.tau for arm in arms], dtype=float)
    alpha = k / (2.0 + k / taus) if len(taus) else np.zeros(0)
    beta = (2.0 - k / taus) / (2.0 + k / taus) if len(taus) else np.zeros(0)
    return StepCoefficients(float(k), alpha, beta)


def duhamel_stress(arm: MaxwellArm, strain_rate_history, t, rtol=1e-10):
    """Arm stress via the convolution integral, starting from zero stress.

    sigma(t) = integral_0^t kappa * exp(-(t-s)/tau) * rate(s) ds,
    evaluated componentwise with adaptive quadrature to relative
    tolerance ``rtol``. ``strain_rate_history(s)`` may return a scalar
    or an arbitrary fixed-shape array.
    """
    if t < 0:
        raise ValueError("time must be nonnegative")
    probe = np.asarray(strain_rate_history(0.0), dtype=float)
    out = np.zeros_like(probe, dtype=float)
    if t == 0:
        return out if probe.shape else 0.0
    flat = out.reshape(-1)
    for i in range(flat.size):
        def integrand(s, i=i):
            rate = np.asarray(strain_rate_history(s), dtype=float).reshape(-1)
            return np.exp(-(t - s) / arm.tau) * rate[i]

        val, _ = quad(integrand, 0.0, t, epsabs=0.0, epsrel=rtol, limit=200)
        flat[i] = arm.kappa * val
    return out if probe.shape else float(flat[0])
