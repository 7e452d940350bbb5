"""Time integration for viscoelastic elastodynamics.

Trial functions are continuous piecewise linear in time, test functions
piecewise constant, so each step is algebraically a midpoint rule. The
primary path eliminates all internal fields before the solve:

* one SPD Schur solve per step for the new velocity,
      (M + k^2/4 K_E + sum_m k/2 alpha_m K_m) u1_new = rhs,
* the displacement update u0_new = u0 + k/2 (u1_new + u1),
* the per-arm reconstruction
      uve_new = alpha (u1_new + u1) + beta uve.

A full coupled (2+M)-block stepper solving velocities, displacements and
all internal fields simultaneously is kept as a cross-validation oracle;
both paths produce identical states up to solver tolerance.

With zero loads the step satisfies an exact energy identity: the change
of kinetic + elastic + viscoelastic energy equals minus the dissipation
increment sum_m (2 k / tau_m) * |||midpoint uve_m|||^2, which the energy
ledger tracks.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import (
    assemble_deviatoric,
    assemble_elastic,
    assemble_mass,
    assemble_traction_load,
    assemble_volume_load,
    load_degree,
)
from .fespace import Constraints, FeSpace
from .material import MaterialModel, step_coefficients


class SolverError(RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class LinearSolver:
    """Sparse symmetric solver: direct (sparse LU) below a size
    threshold, Jacobi-preconditioned CG above it.

    method: 'auto' (default), 'direct', 'cg', or 'dense'.
    """

    def __init__(self, method="auto", rtol=1e-12, cap_factor=10, direct_threshold=3000):
        if method not in ("auto", "direct", "cg", "dense"):
            raise ValueError(f"unknown solver method {method!r}")
        self.method = method
        self.rtol = rtol
        self.cap_factor = cap_factor
        self.direct_threshold = direct_threshold

    def _resolve(self, n):
        if self.method == "auto":
            return "direct" if n <= self.direct_threshold else "cg"
        return self.method

    def prepare(self, matrix):
        """Factorize once; returns solve(b) reusable across timesteps."""
        n = matrix.shape[0]
        method = self._resolve(n)
        if n == 0:
            return lambda b: np.zeros(0)
        if method == "dense":
            from scipy.linalg import lu_factor, lu_solve

            lu = lu_factor(matrix.toarray())
            return lambda b: lu_solve(lu, b)
        if method == "direct":
            factor = spla.splu(matrix.tocsc())
            return factor.solve
        diag = matrix.diagonal()
        if np.any(diag <= 0):
            raise SolverError("CG requires a positive definite matrix")
        precond = spla.LinearOperator((n, n), matvec=lambda x: x / diag)
        maxiter = max(1, int(self.cap_factor * n))
        state = {"x0": None}

        def solve(b):
            x, info = spla.cg(
                matrix, b, x0=state["x0"], rtol=self.rtol, atol=0.0,
                maxiter=maxiter, M=precond,
            )
            if info != 0:
                res = float(np.linalg.norm(matrix @ x - b))
                raise SolverError(
                    f"CG did not converge within {maxiter} iterations "
                    f"(residual {res:.3e})",
                    residual=res,
                )
            state["x0"] = x
            return x

        return solve

    def solve(self, matrix, b):
        return self.prepare(matrix)(b)


@dataclass(frozen=True)
class State:
    """Nodal coefficients at a time node: velocity, displacement, and the
    per-arm internal fields."""

    t: float
    u1: np.ndarray
    u0: np.ndarray
    uve: tuple = field(default_factory=tuple)

    @classmethod
    def zero(cls, space: FeSpace, n_arms, t=0.0):
        n = space.n_dofs
        return cls(t, np.zeros(n), np.zeros(n), tuple(np.zeros(n) for _ in range(n_arms)))


@dataclass(frozen=True)
class TimeGrid:
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if len(nodes) < 2 or np.any(np.diff(nodes) <= 0):
            raise ValueError("time nodes must be strictly increasing")
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, t_start, t_end, n_steps):
        return cls(np.linspace(t_start, t_end, int(n_steps) + 1))

    @property
    def steps(self):
        return np.diff(self.nodes)


@dataclass(frozen=True)
class EnergyReport:
    """Squared-norm energy terms of a state plus accumulated dissipation."""

    t: float
    kinetic: float
    elastic: float
    viscoelastic: tuple
    dissipated: float = 0.0

    @property
    def viscoelastic_total(self):
        return float(sum(self.viscoelastic))

    @property
    def total(self):
        return self.kinetic + self.elastic + self.viscoelastic_total


class OperatorSet:
    """Assembled mass, elastic, and per-arm deviatoric operators."""

    def __init__(self, space: FeSpace, material: MaterialModel, degree=None):
        self.space = space
        self.material = material
        self.mass = assemble_mass(space, material.rho, degree)
        self.elastic = assemble_elastic(space, material.mu, material.lam, degree)
        self.deviatoric = tuple(
            assemble_deviatoric(space, arm.kappa, degree) for arm in material.arms
        )


def energy(state: State, operators: OperatorSet, dissipated=0.0) -> EnergyReport:
    """Kinetic, elastic and per-arm viscoelastic squared energy norms."""
    kin = float(state.u1 @ (operators.mass @ state.u1))
    ela = float(state.u0 @ (operators.elastic @ state.u0))
    ve = tuple(
        float(u @ (K @ u)) for u, K in zip(state.uve, operators.deviatoric)
    )
    return EnergyReport(state.t, kin, ela, ve, dissipated)


def dissipation_increment(prev: State, nxt: State, operators: OperatorSet, k):
    """Dissipated work of one step: sum_m (2 k / tau_m) |||mid uve_m|||^2
    where the midpoint is the interval average of the linear-in-time field."""
    out = 0.0
    for arm, K, a, b in zip(
        operators.material.arms, operators.deviatoric, prev.uve, nxt.uve
    ):
        mid = 0.5 * (a + b)
        out += (2.0 / arm.tau) * float(k) * float(mid @ (K @ mid))
    return out


def reconstruct_ve(u1_prev, u1_next, uve_prev, coeffs):
    """Per-arm internal-field update for one timestep."""
    s = u1_prev + u1_next
    return tuple(
        a * s + b * u for a, b, u in zip(coeffs.alpha, coeffs.beta, uve_prev)
    )


def load_time_integral(loads, space: FeSpace, t_prev, t_next, degree=None):
    """Integral of the load functional over one time interval.

    The body force is integrated with 2-point Gauss in time (exact for
    quadratic-in-time f); the traction uses the trapezoidal rule on its
    endpoint values, which integrates the piecewise-linear-in-time
    interpolant of g exactly.
    """
    k = t_next - t_prev
    if k <= 0:
        raise ValueError("need t_next > t_prev")
    out = np.zeros(space.n_dofs)
    if loads is None:
        return out
    degree = load_degree(space) if degree is None else degree
    if loads.body_force is not None:
        mid = 0.5 * (t_prev + t_next)
        off = 0.5 * k / np.sqrt(3.0)
        for tg in (mid - off, mid + off):
            out += 0.5 * k * assemble_volume_load(space, loads.body_force, tg, degree)
    if loads.traction is not None:
        for te in (t_prev, t_next):
            out += 0.5 * k * assemble_traction_load(
                space, loads.traction, te, degree, loads.traction_labels
            )
    return out


def _constraint_velocities(con: Constraints, state: State, t_next, k):
    """Velocity values at the fixed frame dofs, chosen so the trapezoidal
    displacement update reproduces the prescribed displacement exactly."""
    if len(con.fixed) == 0:
        return np.zeros(0)
    d_prev = con.fixed_values(state.t)
    d_next = con.fixed_values(t_next)
    u1_prev = con.to_frame(state.u1)[con.fixed]
    return 2.0 * (d_next - d_prev) / k - u1_prev


class ReducedStepper:
    """Primary time stepper with the internal fields eliminated.

    The Schur operator is assembled and factorized once per (k,
    constraint set); stepping costs one back-substitution plus sparse
    matrix-vector products.
    """

    def __init__(self, operators: OperatorSet, constraints: Constraints, k,
                 loads=None, solver=None, quad_degree=None):
        self.ops = operators
        self.con = constraints
        self.k = float(k)
        self.loads = loads
        self.solver = solver or LinearSolver()
        self.quad_degree = quad_degree
        self.coeffs = step_coefficients(operators.material.arms, self.k)
        k2 = self.k
        schur = operators.mass + (k2 * k2 / 4.0) * operators.elastic
        for a, K in zip(self.coeffs.alpha, operators.deviatoric):
            schur = schur + (k2 / 2.0) * a * K
        self.system = constraints.reduce(schur.tocsr())
        self._solve_free = self.solver.prepare(self.system.matrix)

    def rhs(self, state: State, load_integral=None):
        ops, k = self.ops, self.k
        b = ops.mass @ state.u1 - (k * k / 4.0) * (ops.elastic @ state.u1)
        b -= k * (ops.elastic @ state.u0)
        for a, beta, K, uve in zip(
            self.coeffs.alpha, self.coeffs.beta, ops.deviatoric, state.uve
        ):
            b -= (k / 2.0) * (a * (K @ state.u1) + (1.0 + beta) * (K @ uve))
        if load_integral is not None:
            b = b + load_integral
        elif self.loads is not None:
            b = b + load_time_integral(
                self.loads, ops.space, state.t, state.t + k, self.quad_degree
            )
        return b

    def step(self, state: State) -> State:
        con, k = self.con, self.k
        t_next = state.t + k
        b = self.rhs(state)
        w_fixed = _constraint_velocities(con, state, t_next, k)
        w = np.zeros(con.space.n_dofs)
        w[con.free] = self._solve_free(self.system.reduced_rhs(b, w_fixed))
        w[con.fixed] = w_fixed
        u1_next = con.from_frame(w)
        u0_next = state.u0 + (k / 2.0) * (u1_next + state.u1)
        uve_next = reconstruct_ve(state.u1, u1_next, state.uve, self.coeffs)
        return State(t_next, u1_next, u0_next, uve_next)


class FullStepper:
    """Coupled (2+M)-block midpoint stepper; cross-validation oracle.

    Solves velocities, displacements, and every internal field
    simultaneously with a sparse direct factorization. Requires a
    nonempty Dirichlet set so the displacement and internal blocks are
    definite.
    """

    def __init__(self, operators: OperatorSet, constraints: Constraints, k,
                 loads=None, solver=None, quad_degree=None):
        self.ops = operators
        self.con = constraints
        self.k = float(k)
        self.loads = loads
        self.quad_degree = quad_degree
        self.coeffs = step_coefficients(operators.material.arms, self.k)
        arms = operators.material.arms
        m_arms = len(arms)
        n_blocks = 2 + m_arms
        kk = self.k
        blocks = [[None] * n_blocks for _ in range(n_blocks)]
        blocks[0][0] = operators.mass
        blocks[0][1] = (kk / 2.0) * operators.elastic
        blocks[1][0] = (-kk / 2.0) * operators.elastic
        blocks[1][1] = operators.elastic
        for m, (arm, K) in enumerate(zip(arms, operators.deviatoric)):
            blocks[0][2 + m] = (kk / 2.0) * K
            blocks[2 + m][0] = (-kk / 2.0) * K
            blocks[2 + m][2 + m] = (1.0 + kk / (2.0 * arm.tau)) * K
        big = sp.bmat(blocks, format="csr")

        n = operators.space.n_dofs
        rot = constraints.rotation
        self._rot_big = sp.block_diag([rot] * n_blocks, format="csr")
        fixed = constraints.fixed
        self._fixed_big = np.concatenate(
            [fixed + i * n for i in range(n_blocks)]
        ) if len(fixed) else np.zeros(0, dtype=np.int64)
        mask = np.ones(n_blocks * n, dtype=bool)
        mask[self._fixed_big] = False
        self._free_big = np.nonzero(mask)[0]
        reduced = (self._rot_big.T @ big @ self._rot_big).tocsr()
        self._a_ff = reduced[self._free_big][:, self._free_big].tocsc()
        self._a_fx = reduced[self._free_big][:, self._fixed_big].tocsr()
        if self._a_ff.shape[0]:
            self._lu = spla.splu(self._a_ff)
        self._n_blocks = n_blocks

    def step(self, state: State) -> State:
        ops, con, k = self.ops, self.con, self.k
        t_next = state.t + k
        n = ops.space.n_dofs
        r0 = ops.mass @ state.u1 - (k / 2.0) * (ops.elastic @ state.u0)
        for K, uve in zip(ops.deviatoric, state.uve):
            r0 -= (k / 2.0) * (K @ uve)
        if self.loads is not None:
            r0 += load_time_integral(
                self.loads, ops.space, state.t, t_next, self.quad_degree
            )
        r1 = ops.elastic @ (state.u0 + (k / 2.0) * state.u1)
        rhs = [r0, r1]
        for arm, K, uve in zip(ops.material.arms, ops.deviatoric, state.uve):
            rhs.append(K @ ((k / 2.0) * state.u1 + (1.0 - k / (2.0 * arm.tau)) * uve))
        rhs = np.concatenate(rhs)

        # prescribed values per block: trapezoidal velocities, prescribed
        # displacements at t_next, and the internal-field recursion
        v_fix = _constraint_velocities(con, state, t_next, k)
        d_fix = con.fixed_values(t_next)
        u1_prev = con.to_frame(state.u1)[con.fixed]
        fixed_vals = [v_fix, d_fix]
        for a, b, uve in zip(self.coeffs.alpha, self.coeffs.beta, state.uve):
            uve_prev = con.to_frame(uve)[con.fixed]
            fixed_vals.append(a * (v_fix + u1_prev) + b * uve_prev)
        fixed_vals = np.concatenate(fixed_vals) if len(con.fixed) else np.zeros(0)

        b_frame = (self._rot_big.T @ rhs)[self._free_big]
        if len(fixed_vals):
            b_frame = b_frame - self._a_fx @ fixed_vals
        w = np.zeros(self._n_blocks * n)
        if self._a_ff.shape[0]:
            w[self._free_big] = self._lu.solve(b_frame)
        w[self._fixed_big] = fixed_vals
        x = self._rot_big @ w
        u1 = x[:n]
        u0 = x[n : 2 * n]
        uve = tuple(x[(2 + m) * n : (3 + m) * n] for m in range(len(ops.deviatoric)))
        return State(t_next, u1, u0, uve)


def step_reduced(state, k, operators, loads=None, constraints=None, solver=None):
    """Advance one timestep with the reduced method (one-off wrapper)."""
    constraints = constraints or Constraints(operators.space, {})
    return ReducedStepper(operators, constraints, k, loads, solver).step(state)


def step_full(state, k, operators, loads=None, constraints=None, solver=None):
    """Advance one timestep with the full coupled method (oracle path)."""
    constraints = constraints or Constraints(operators.space, {})
    return FullStepper(operators, constraints, k, loads, solver).step(state)


def static_solve(operators: OperatorSet, constraints: Constraints, loads=None,
                 t=0.0, solver=None):
    """Elastostatic displacement with the given essential constraints."""
    space = operators.space
    rhs = np.zeros(space.n_dofs)
    if loads is not None:
        if loads.body_force is not None:
            rhs += assemble_volume_load(space, loads.body_force, t)
        if loads.traction is not None:
            rhs += assemble_traction_load(
                space, loads.traction, t, labels=loads.traction_labels
            )
    system = constraints.reduce(operators.elastic)
    return system.solve(rhs, constraints.fixed_values(t), solver or LinearSolver())


def save_state(state: State, path):
    """Checkpoint a State (time plus all coefficient vectors) to .npz."""
    arrays = {"t": np.array(state.t), "u1": state.u1, "u0": state.u0}
    for m, u in enumerate(state.uve):
        arrays[f"uve{m}"] = u
    np.savez(path, n_arms=np.array(len(state.uve)), **arrays)


def load_state(path) -> State:
    with np.load(path) as data:
        n_arms = int(data["n_arms"])
        return State(
            float(data["t"]),
            data["u1"].copy(),
            data["u0"].copy(),
            tuple(data[f"uve{m}"].copy() for m in range(n_arms)),
        )


@dataclass
class SimulationResult:
    states: list
    ledger: list

    @property
    def final(self):
        return self.states[-1]


def simulate(operators: OperatorSet, constraints: Constraints, grid: TimeGrid,
             loads=None, state0=None, solver=None, keep_states=False,
             quad_degree=None, callback=None, stepper="reduced"):
    """March the dynamics over a time grid, tracking the energy ledger.

    The stepper is rebuilt only when the step size changes. ``callback``
    (if given) is invoked with each new State. Returns the ledger and,
    when ``keep_states``, every state; otherwise first and final only.
    """
    space = operators.space
    if state0 is None:
        state0 = State.zero(space, len(operators.deviatoric))
        state0 = State(
            float(grid.nodes[0]), state0.u1, state0.u0, state0.uve
        )
    cls = ReducedStepper if stepper == "reduced" else FullStepper
    state = state0
    ledger = [energy(state, operators, 0.0)]
    states = [state]
    current = None
    stepper_obj = None
    dissipated = 0.0
    for k in np.diff(grid.nodes):
        if current is None or abs(k - current) > 1e-14 * max(k, current):
            stepper_obj = cls(
                operators, constraints, k, loads, solver, quad_degree
            )
            current = k
        nxt = stepper_obj.step(state)
        dissipated += dissipation_increment(state, nxt, operators, k)
        ledger.append(energy(nxt, operators, dissipated))
        if keep_states:
            states.append(nxt)
        if callback is not None:
            callback(nxt)
        state = nxt
    if not keep_states:
        states = [state0, state]
    return SimulationResult(states, ledger)
