"""Robust value over a controlled family and its second-order decomposition.

The value ``V_k = max_u T_u(V_{k+1})`` takes the pointwise maximum over the
finite control set of the one-step backward operator

    T_u(W)(x) = E_u[W] - f(t_k, x, T_u(W), sigma_u Z_u, a_u, b_u) dt,

which over feedback policies equals the supremum of the single-measure
solutions by dynamic programming. Under a policy ``P`` the residual
``dK^P_k = V_k - T_{u_P}(V_{k+1})`` is the increment of the non-decreasing
process of the decomposition; it vanishes under the argmax policy, which is
the minimality certificate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .bsde_solver import (
    DEFAULT_PICARD_TOL,
    half_and_pinv,
    lattice_one_step,
    picard_step,
    solve_bsde,
)
from .errors import DecompositionViolationError, InvalidParametersError
from .generators import GeneratorSpec, TerminalClaim
from .lattice import Lattice
from .market_paths import ControlPolicy, DiffusionFamily, TimeGrid, simulate
from .regression import RegressionBasis
from .reports import Report

K_TOL = 1e-10


@dataclass
class RobustSolution:
    """Discrete robust value with argmax controls and ``Z`` at the argmax.

    ``V`` has shape ``(N+1, n)``, ``ustar`` ``(N, n)`` and ``Z`` ``(N, n, d)``,
    where ``n`` counts lattice nodes (lattice mode) or paths (path mode).
    """

    V: np.ndarray
    ustar: np.ndarray
    Z: np.ndarray
    mode: str
    value0: float
    stderr0: float
    family: DiffusionFamily = field(repr=False)
    grid: TimeGrid = field(repr=False)
    generator: GeneratorSpec = field(repr=False)
    claim: Optional[TerminalClaim] = field(repr=False)
    source: object = field(repr=False)
    picard_iters: np.ndarray = field(repr=False)
    models: Optional[list] = field(default=None, repr=False)
    terminal_fn: Optional[Callable] = field(default=None, repr=False)
    picard_tol: float = DEFAULT_PICARD_TOL
    clip_m: Optional[float] = None
    basis: Optional[RegressionBasis] = None

    @property
    def n_controls(self) -> int:
        return len(self.family.control_set)

    @property
    def states(self) -> np.ndarray:
        """States at which ``V`` is tabulated: ``(n, d)`` nodes or ``(M, N+1, d)`` paths."""
        return self.source.x if self.mode == "lattice" else self.source.X

    # -- one-step operator ----------------------------------------------------

    def one_step(self, k: int, u, x=None):
        """``(T_u(V_{k+1}), Z_u)`` at lattice nodes, or at states ``x`` in path mode.

        ``u`` is a control index or a per-state array of indices.
        """
        if self.mode == "lattice":
            controls = np.broadcast_to(np.asarray(u, dtype=int), (self.source.size,))
            y, z, _, _ = lattice_one_step(self.source, k, controls, self.V[k + 1],
                                          self.generator, self.picard_tol, self.clip_m)
            return y, z[:, None]
        x = np.asarray(x, dtype=float).reshape(-1, self.family.dim)
        controls = np.broadcast_to(np.asarray(u, dtype=int), (len(x),))
        y = np.empty(len(x))
        Z = np.empty((len(x), self.family.dim))
        for v in np.unique(controls):
            rows = controls == v
            y[rows], Z[rows] = _path_one_step(self, k, int(v), x[rows])
        return y, Z

    def _all_controls(self, k, x):
        ys, zs = [], []
        for u in range(self.n_controls):
            y, z = _path_one_step(self, k, u, x)
            ys.append(y)
            zs.append(z)
        return np.array(ys), np.array(zs)

    # -- evaluation off the tabulated states ------------------------------------

    def value_at(self, k: int, x) -> np.ndarray:
        if self.mode == "lattice":
            return self.source.interpolate(self.V[k], x)
        x = np.asarray(x, dtype=float).reshape(-1, self.family.dim)
        if k == self.grid.steps:
            return self._terminal(x)
        ys, _ = self._all_controls(k, x)
        return ys.max(axis=0)

    def control_at(self, k: int, x) -> np.ndarray:
        """Argmax control index (lowest index on ties); nearest node in lattice mode."""
        if self.mode == "lattice":
            return self.argmax_policy().lookup(k, x)
        x = np.asarray(x, dtype=float).reshape(-1, self.family.dim)
        ys, _ = self._all_controls(k, x)
        return np.argmax(ys, axis=0)

    def z_at(self, k: int, x) -> np.ndarray:
        """``Z_k`` at the argmax control; linear interpolation in lattice mode,
        held constant past the grid ends."""
        if self.mode == "lattice":
            return self.source.interpolate(self.Z[k, :, 0], x, extend=False)[:, None]
        x = np.asarray(x, dtype=float).reshape(-1, self.family.dim)
        ys, zs = self._all_controls(k, x)
        best = np.argmax(ys, axis=0)
        return zs[best, np.arange(len(x))]

    def _terminal(self, x):
        vals = self.terminal_fn(x) if self.terminal_fn is not None else self.claim(x)
        if self.clip_m is not None:
            vals = np.clip(vals, -self.clip_m, self.clip_m)
        return vals

    def argmax_policy(self) -> ControlPolicy:
        if self.mode == "lattice":
            return self.source.node_bucket_policy(self.ustar, name="argmax")
        return ControlPolicy.feedback(self.control_at, name="argmax")

    def constant_policies(self) -> list:
        return [ControlPolicy.constant(u, name=self.family.control_set.labels[u])
                for u in range(self.n_controls)]

    # -- output ----------------------------------------------------------------

    def surface_rows(self, stride: int = 1, points: int = 51):
        """Rows ``(k, bucket, state, V, u*, Z)``; lattice nodes or path-state quantiles."""
        rows = []
        N = self.grid.steps
        for k in list(range(0, N, stride)) + [N]:
            if self.mode == "lattice":
                xs = self.source.x[:, 0]
                vals = self.V[k]
                us = self.ustar[k] if k < N else None
                zs = self.Z[k, :, 0] if k < N else None
            else:
                xk = self.source.X[:, k, 0]
                xs = np.unique(np.quantile(xk, np.linspace(0.01, 0.99, points)))
                states = np.repeat(xs[:, None], self.family.dim, axis=1)
                if self.family.dim > 1:
                    states[:, 1:] = self.source.X[:, k, 1:].mean(axis=0)
                vals = self.value_at(k, states)
                us = self.control_at(k, states) if k < N else None
                zs = self.z_at(k, states)[:, 0] if k < N else None
            for j, s in enumerate(xs):
                rows.append((k, j, float(s), float(vals[j]),
                             "" if us is None else int(us[j]),
                             "" if zs is None else float(zs[j])))
        return rows

    def to_csv(self, path, stride: int = 1):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "bucket", "state", "V", "ustar", "Z"])
            for k, j, s, v, u, z in self.surface_rows(stride):
                writer.writerow([k, j, repr(s), repr(v), u, "" if z == "" else repr(z)])

    def summary(self) -> dict:
        out = {"mode": self.mode, "value0": self.value0, "stderr0": self.stderr0,
               "steps": self.grid.steps, "horizon": self.grid.horizon,
               "controls": list(self.family.control_set.labels),
               "generator": self.generator.name,
               "claim": None if self.claim is None else self.claim.name}
        if self.mode == "lattice":
            out["nodes"] = self.source.size
            out["ustar0"] = int(self.ustar[0, self.source.center])
        else:
            out["paths"] = self.source.M
        return out


def _path_one_step(rs: RobustSolution, k: int, u: int, x):
    model_mean, model_cov = rs.models[k][u]
    d = rs.family.dim
    mean = model_mean.predict(x)
    cov = model_cov.predict(x).reshape(len(x), d)
    t = rs.grid.time(k)
    mu, sig = rs.family.coefficients(t, x, u)
    a = sig @ np.swapaxes(sig, 1, 2)
    half, pinv = half_and_pinv(a)
    Z = np.einsum("nij,nj->ni", pinv, cov)
    z = np.einsum("nji,nj->ni", half, Z)
    y, _, _ = picard_step(rs.generator, t, x, mean, z, a, mu, rs.grid.dt, k,
                          rs.picard_tol, rs.clip_m)
    return y, Z


# -- solvers -------------------------------------------------------------------

def _robust_lattice(lattice: Lattice, gen, claim, tol, clip_m, terminal=None):
    N, J = lattice.grid.steps, lattice.size
    n_u = len(lattice.family.control_set)
    V = np.empty((N + 1, J))
    ustar = np.zeros((N, J), dtype=int)
    Z = np.zeros((N, J, 1))
    iters = np.zeros(N, dtype=int)
    V[N] = claim(lattice.x) if terminal is None else terminal
    if clip_m is not None:
        V[N] = np.clip(V[N], -clip_m, clip_m)
    for k in reversed(range(N)):
        best = None
        for u in range(n_u):
            y, z, it, _ = lattice_one_step(lattice, k, np.full(J, u), V[k + 1], gen, tol, clip_m)
            iters[k] = max(iters[k], it)
            if best is None:
                best, zbest = y, z
                continue
            better = y > best
            best = np.where(better, y, best)
            zbest = np.where(better, z, zbest)
            ustar[k, better] = u
        V[k], Z[k, :, 0] = best, zbest
    return RobustSolution(V, ustar, Z, "lattice", float(V[0, lattice.center]), 0.0,
                          lattice.family, lattice.grid, gen, claim, lattice, iters,
                          picard_tol=tol, clip_m=clip_m)


def reference_control(family: DiffusionFamily, x0) -> int:
    """Control with the largest volatility norm at ``(0, x0)``; paths are drawn under it."""
    x = np.broadcast_to(np.asarray(x0, dtype=float), (1, family.dim))
    norms = [np.linalg.norm(family.coefficients(0.0, x, u)[1][0])
             for u in range(len(family.control_set))]
    return int(np.argmax(norms))


def _robust_paths(family, grid, gen, claim, x0, M, seed, basis, tol, clip_m, n_jobs=1,
                  increments="gaussian", terminal_fn=None):
    ref = reference_control(family, x0)
    ens = simulate(family, ControlPolicy.constant(ref), grid, M, x0, seed, n_jobs, increments)
    N, d, dt = grid.steps, family.dim, grid.dt
    n_u = len(family.control_set)
    V = np.empty((N + 1, M))
    ustar = np.zeros((N, M), dtype=int)
    Z = np.zeros((N, M, d))
    iters = np.zeros(N, dtype=int)
    rs = RobustSolution(V, ustar, Z, "path", 0.0, 0.0, family, grid, gen, claim, ens, iters,
                        models=[None] * N, terminal_fn=terminal_fn, picard_tol=tol,
                        clip_m=clip_m, basis=basis)
    V[N] = rs._terminal(ens.X[:, N])
    child_sd = np.zeros(n_u)
    for k in reversed(range(N)):
        Xk = ens.X[:, k]
        t = grid.time(k)
        per_u = []
        for u in range(n_u):
            mu, sig = family.coefficients(t, Xk, u)
            dXc = np.einsum("mij,mj->mi", sig, ens.dW[:, k])
            v = rs.value_at(k + 1, Xk + mu * dt + dXc)
            model_mean = basis.make().fit(Xk, v)
            resid = v - model_mean.predict(Xk)
            model_cov = basis.make().fit(Xk, resid[:, None] * dXc / dt)
            per_u.append((model_mean, model_cov))
            if k == 0:
                child_sd[u] = np.std(v, ddof=1) if M > 1 else 0.0
        rs.models[k] = per_u
        ys, zs = rs._all_controls(k, Xk)
        best = np.argmax(ys, axis=0)
        V[k] = ys[best, np.arange(M)]
        ustar[k] = best
        Z[k] = zs[best, np.arange(M)]
    rs.value0 = float(np.mean(V[0]))
    rs.stderr0 = float(child_sd[ustar[0, 0]] / np.sqrt(M))
    return rs


def robust_value(family: DiffusionFamily, grid: TimeGrid, gen: GeneratorSpec,
                 claim: Optional[TerminalClaim], mode: str = "lattice", x0=None, *,
                 lattice: Optional[Lattice] = None, nodes: int = 3201, n_std: float = 8.0,
                 M: int = 10_000, seed: int = 0, basis: Optional[RegressionBasis] = None,
                 picard_tol: float = DEFAULT_PICARD_TOL, clip_m: Optional[float] = None,
                 n_jobs: int = 1, increments: str = "gaussian", terminal=None) -> RobustSolution:
    """Robust value ``V_0 = sup_P Y_0^P`` by per-step maximization.

    Lattice mode builds (or reuses) a :class:`Lattice`; ``terminal`` then
    replaces the claim by grid values. Path mode draws ``M`` paths under the
    control of largest volatility and evaluates every control's one-step
    operator on them by regression; ``terminal`` is then a function of states.
    """
    if len(family.control_set) == 0:
        raise InvalidParametersError("control set is empty")
    if gen.lipschitz * grid.dt >= 0.5:
        raise InvalidParametersError(
            f"L*dt = {gen.lipschitz * grid.dt:.3g} must be below 1/2 for the per-step contraction"
        )
    if mode == "lattice":
        if lattice is None:
            if x0 is None:
                raise InvalidParametersError("x0 is required to build a lattice")
            lattice = Lattice(family, grid, x0, nodes=nodes, n_std=n_std)
        return _robust_lattice(lattice, gen, claim, picard_tol, clip_m, terminal)
    if mode == "path":
        if x0 is None:
            raise InvalidParametersError("x0 is required in path mode")
        return _robust_paths(family, grid, gen, claim, x0, M, seed, basis or RegressionBasis(),
                             picard_tol, clip_m, n_jobs, increments, terminal)
    raise InvalidParametersError(f"unknown mode {mode!r}; expected 'lattice' or 'path'")


# -- verifiers ---------------------------------------------------------------------

@dataclass
class DppReport:
    direct_value: float
    nested_value: float
    gap: float
    tolerance: float
    passed: bool
    k_mid: int
    details: dict = field(default_factory=dict)

    def to_report(self) -> Report:
        return Report("dpp", self.passed, self.gap, self.tolerance,
                      dict(self.details, direct=self.direct_value, nested=self.nested_value,
                           k_mid=self.k_mid))


def _batch_seeds(seed, count):
    ss = np.random.SeedSequence([seed, 0xD99])
    return [int(s) for s in ss.generate_state(count, np.uint64)]


def verify_dpp(rs: RobustSolution, k_mid: int, fresh_seed: Optional[int] = None,
               batches: int = 10, bias_allowance: float = 0.0) -> DppReport:
    """Nested robust solve on ``[0, t_kmid]`` with terminal data ``V_kmid``.

    Lattice mode compares every node. Path mode re-solves on an independent
    ensemble; its standard error comes from ``batches`` independent
    sub-ensembles, and the tolerance is ``3 sqrt(2) stderr + bias_allowance``
    because the direct value carries the same noise over ``[0, t_kmid]``.
    """
    N = rs.grid.steps
    if not 0 < k_mid < N:
        raise ValueError(f"k_mid must lie strictly between 0 and {N}")
    if rs.mode == "lattice":
        short = rs.source.truncate(k_mid)
        nested = _robust_lattice(short, rs.generator, None, rs.picard_tol, rs.clip_m,
                                 terminal=rs.V[k_mid])
        gap_all = float(np.max(np.abs(nested.V[0] - rs.V[0])))
        gap = abs(nested.value0 - rs.value0)
        tol = 1e-10
        return DppReport(rs.value0, nested.value0, gap, tol, gap <= tol and gap_all <= tol, k_mid,
                         {"mode": "lattice", "max_node_gap": gap_all})
    ens = rs.source
    seed = ens.seed + 1 if fresh_seed is None else fresh_seed
    short = rs.grid.truncate(k_mid)
    x0 = ens.X[0, 0]
    terminal = lambda x: rs.value_at(k_mid, x)  # noqa: E731
    nested = _robust_paths(rs.family, short, rs.generator, None, x0, ens.M, seed, rs.basis,
                           rs.picard_tol, rs.clip_m, increments=ens.increments,
                           terminal_fn=terminal)
    m_b = max(ens.M // batches, 2)
    values = [
        _robust_paths(rs.family, short, rs.generator, None, x0, m_b, s, rs.basis,
                      rs.picard_tol, rs.clip_m, increments=ens.increments,
                      terminal_fn=terminal).value0
        for s in _batch_seeds(seed, batches)
    ]
    se = float(np.std(values, ddof=1) / np.sqrt(batches) * np.sqrt(m_b * batches / ens.M))
    tol = 3.0 * np.sqrt(2.0) * se + bias_allowance
    gap = abs(nested.value0 - rs.value0)
    return DppReport(rs.value0, nested.value0, gap, tol, gap <= tol, k_mid,
                     {"mode": "path", "stderr": se, "batches": batches, "paths": ens.M,
                      "batch_values": values})


def extract_K(rs: RobustSolution, policy: ControlPolicy, states=None,
              tol: float = K_TOL) -> np.ndarray:
    """Increments ``dK_k = V_k - T_{u_P}(V_{k+1})`` under ``policy``.

    Lattice mode returns ``(N, J)`` node values. Path mode evaluates along
    ``states`` of shape ``(M, N+1, d)`` (default: the solution's own paths).
    Raises :class:`DecompositionViolationError` if an increment is below
    ``-tol``.
    """
    N = rs.grid.steps
    if rs.mode == "lattice":
        dK = np.empty((N, rs.source.size))
        for k in range(N):
            y, _ = rs.one_step(k, rs.source.policy_controls(policy, k))
            dK[k] = rs.V[k] - y
    else:
        X = rs.source.X if states is None else np.asarray(states, dtype=float)
        dK = np.empty((N, X.shape[0]))
        for k in range(N):
            ys, _ = rs._all_controls(k, X[:, k])
            u = policy.lookup(k, X[:, k])
            dK[k] = ys.max(axis=0) - ys[u, np.arange(len(u))]
    worst = float(dK.min(initial=0.0))
    if worst < -tol:
        k, j = np.unravel_index(np.argmin(dK), dK.shape)
        raise DecompositionViolationError(
            f"K increment {worst:.3g} below -{tol:g} at step {k}, node {j} under {policy.name}"
        )
    return dK


def _policy_expectation(lattice, policy, k, values):
    ctrl = lattice.policy_controls(policy, k)
    out = np.empty_like(values)
    for u in np.unique(ctrl):
        rows = ctrl == u
        out[rows] = lattice.expectation(k, u, values)[rows]
    return out


def sum_moments(lattice: Lattice, policy: ControlPolicy, increments) -> tuple:
    """``E[S]`` and ``E[S^2]`` at every node for ``S = sum_k increments[k](X_k)``."""
    N = len(increments)
    m1 = np.zeros(lattice.size)
    m2 = np.zeros(lattice.size)
    for k in reversed(range(N)):
        e1 = _policy_expectation(lattice, policy, k, m1)
        e2 = _policy_expectation(lattice, policy, k, m2)
        inc = increments[k]
        m1 = inc + e1
        m2 = inc ** 2 + 2.0 * inc * e1 + e2
    return m1, m2


def _path_K_sums(rs, policy, M, seed):
    ens = simulate(rs.family, policy, rs.grid, M, rs.source.X[0, 0], seed,
                   increments=rs.source.increments)
    dK = extract_K(rs, policy, ens.X)
    total = dK.sum(axis=0)
    return float(total.mean()), float(total.std(ddof=1) / np.sqrt(M))


def verify_minimality(rs: RobustSolution, policies: Optional[Sequence[ControlPolicy]] = None,
                      eps_min: float = 1e-8, M: int = 20_000, seed: int = 7) -> Report:
    """``min_P E^P[K_T^P]`` over constant, argmax and supplied policies.

    On the lattice it also checks that at every step and node some one-step
    continuation has zero conditional K increment.
    """
    pols = list(policies) if policies is not None else rs.constant_policies()
    pols.append(rs.argmax_policy())
    values = {}
    if rs.mode == "lattice":
        lat = rs.source
        for pol in pols:
            dK = extract_K(rs, pol)
            values[pol.name] = float(sum_moments(lat, pol, dK)[0][lat.center])
        step_min = np.full((rs.grid.steps, lat.size), np.inf)
        for u in range(rs.n_controls):
            for k in range(rs.grid.steps):
                y, _ = rs.one_step(k, u)
                step_min[k] = np.minimum(step_min[k], rs.V[k] - y)
        worst_step = float(np.max(np.abs(step_min)))
        tol = eps_min
        best = min(values.values())
        passed = best <= tol and worst_step <= tol
        details = {"expected_K": values, "max_one_step_min": worst_step}
    else:
        errs = {}
        for i, pol in enumerate(pols):
            values[pol.name], errs[pol.name] = _path_K_sums(rs, pol, M, seed + i)
        name = min(values, key=values.get)
        best = values[name]
        tol = 3.0 * errs[name] if errs[name] > 0 else eps_min
        passed = best <= tol
        details = {"expected_K": values, "stderr": errs}
    details["minimizer"] = min(values, key=values.get)
    return Report("minimality", passed, best, tol, details)


def _homogeneous(gen: GeneratorSpec) -> GeneratorSpec:
    def f(t, x, y, z, a, b):
        return gen(t, x, y, z, a, b) - gen.intercept(t, x, a, b)

    return GeneratorSpec(f, gen.lipschitz_y, gen.lipschitz_z, f"{gen.name}-homogeneous")


def discounted_K_identity(rs: RobustSolution, policy: ControlPolicy) -> Report:
    """Check ``V_0 - Y^P_0 = E^P[discounted sum of dK^P]`` for an affine driver.

    The discounted sum is propagated by the homogeneous part of the one-step
    operator, ``D_k = T^0_{u_P}(D_{k+1}) + dK_k`` with ``D_N = 0``.
    """
    if rs.mode != "lattice":
        raise InvalidParametersError("the discounted K identity is checked on the lattice")
    lat = rs.source
    dK = extract_K(rs, policy)
    hom = _homogeneous(rs.generator)
    D = np.zeros(lat.size)
    for k in reversed(range(rs.grid.steps)):
        D, _, _, _ = lattice_one_step(lat, k, lat.policy_controls(policy, k), D, hom,
                                      rs.picard_tol, None)
        D = D + dK[k]
    sol = solve_bsde(lat, rs.generator, rs.claim, policy=policy, picard_tol=rs.picard_tol,
                     clip_m=rs.clip_m,
                     terminal=None if rs.claim is not None else rs.V[rs.grid.steps])
    gap = rs.value0 - sol.y0
    err = abs(gap - D[lat.center])
    return Report("discounted_K", err <= 1e-9, err, 1e-9,
                  {"policy": policy.name, "value_gap": gap, "discounted_K": D[lat.center],
                   "K_T": float(sum_moments(lat, policy, dK)[0][lat.center])})


def _claim_shape(lattice: Lattice, claim: TerminalClaim, tol=1e-12) -> str:
    x = lattice.x[:, 0]
    g = claim(lattice.x)
    slopes = np.diff(g) / np.diff(x)
    ds = np.diff(slopes)
    scale = tol * (1.0 + np.max(np.abs(slopes)))
    if np.all(ds >= -scale):
        return "convex"
    if np.all(ds <= scale):
        return "concave"
    return "neither"


def verify_representation(rs: RobustSolution, constant_policies=None,
                          expect_equality: Optional[bool] = None, M: int = 20_000,
                          seed: int = 11) -> Report:
    """Compare ``V_0`` with the best single-measure value over constant policies.

    Asserts ``V_0 >= max - tol``. Equality is additionally required when
    ``expect_equality`` is true; by default it is expected on the lattice when
    the claim is convex or concave in the state.
    """
    pols = list(constant_policies) if constant_policies is not None else rs.constant_policies()
    values, errs = {}, {}
    if rs.mode == "lattice":
        for pol in pols:
            sol = solve_bsde(rs.source, rs.generator, rs.claim, policy=pol,
                             picard_tol=rs.picard_tol, clip_m=rs.clip_m)
            values[pol.name] = sol.y0
        tol = 1e-9
        shape = _claim_shape(rs.source, rs.claim) if rs.claim is not None else "neither"
    else:
        for i, pol in enumerate(pols):
            ens = simulate(rs.family, pol, rs.grid, M, rs.source.X[0, 0], seed + i,
                           increments=rs.source.increments)
            sol = solve_bsde(ens, rs.generator, rs.claim, rs.basis, rs.picard_tol, rs.clip_m)
            values[pol.name], errs[pol.name] = sol.y0, sol.stderr0
        shape = "unknown"
    best_name = max(values, key=values.get)
    best = values[best_name]
    if rs.mode == "path":
        tol = 3.0 * float(np.hypot(rs.stderr0, errs[best_name]))
    if expect_equality is None:
        expect_equality = shape in ("convex", "concave")
    margin = rs.value0 - best
    passed = margin >= -tol and (abs(margin) <= tol if expect_equality else True)
    return Report("representation", passed, margin, tol,
                  {"constant_values": values, "best": best_name, "robust_value": rs.value0,
                   "claim_shape": shape, "expect_equality": expect_equality})


def _generator_order(genA, genB, rs: RobustSolution, n=1000, seed=3):
    """Min of ``genA - genB`` along solution A's tuples and on random tuples."""
    rng = np.random.default_rng(seed)
    worst = np.inf
    for k in range(0, rs.grid.steps, max(rs.grid.steps // 10, 1)):
        x = rs.states if rs.mode == "lattice" else rs.source.X[:, k]
        for u in range(rs.n_controls):
            mu, sig = rs.family.coefficients(rs.grid.time(k), x, u)
            a = sig @ np.swapaxes(sig, 1, 2)
            y = rs.V[k]
            z = np.einsum("nji,nj->ni", half_and_pinv(a)[0], rs.Z[k])
            worst = min(worst, float(np.min(genA(rs.grid.time(k), x, y, z, a, mu)
                                            - genB(rs.grid.time(k), x, y, z, a, mu))))
            yr = rng.normal(0, 1 + np.abs(y).max(), size=len(x))
            zr = rng.normal(0, 1, size=z.shape) * (1 + np.abs(z).max())
            worst = min(worst, float(np.min(genA(rs.grid.time(k), x, yr, zr, a, mu)
                                            - genB(rs.grid.time(k), x, yr, zr, a, mu))))
    return worst


def verify_2bsde_comparison(rsA: RobustSolution, rsB: RobustSolution) -> Report:
    """Ordered data ``f^A >= f^B`` and ``xi^A <= xi^B`` must give ``V^A <= V^B``.

    Violated hypotheses make the report inapplicable rather than failed.
    """
    if rsA.mode != rsB.mode:
        raise InvalidParametersError("both solutions must use the same mode")
    if rsA.mode == "lattice":
        xT = rsA.source.x
        claim_gap = float(np.max(rsA.V[-1] - rsB.V[-1]))
    else:
        xT = rsA.source.X[:, -1]
        claim_gap = float(np.max(rsA._terminal(xT) - rsB._terminal(xT)))
    order = _generator_order(rsA.generator, rsB.generator, rsA)
    inapplicable = []
    if claim_gap > 1e-12:
        inapplicable.append(f"terminal A exceeds terminal B by {claim_gap:.3g}")
    if order < -1e-12:
        inapplicable.append(f"driver A is below driver B by {-order:.3g}")
    if rsA.mode == "lattice":
        tol = 1e-10
        diff = float(np.max(rsA.V - rsB.V))
    else:
        tol = 3.0 * float(np.hypot(rsA.stderr0, rsB.stderr0))
        diff = rsA.value0 - rsB.value0
    details = {"vA": rsA.value0, "vB": rsB.value0, "reasons": inapplicable}
    if inapplicable:
        return Report("2bsde_comparison", True, diff, tol, details, applicable=False)
    return Report("2bsde_comparison", diff <= tol, diff, tol, details)


def _apriori_norms(rs: RobustSolution, p: float, kappa: float):
    lat = rs.source
    N, dt = rs.grid.steps, rs.grid.dt
    pols = rs.constant_policies() + [rs.argmax_policy()]
    ks = sorted(set(np.linspace(0, N, min(N, 20) + 1).astype(int)))
    y_norm = z_norm = k_norm = xi_norm = f_norm = 0.0
    xi = rs.V[N]
    for pol in pols:
        for k in ks:
            m = lat.expect_under(pol, np.abs(rs.V[k]) ** p, k_end=k)[lat.center]
            y_norm = max(y_norm, m ** (1.0 / p))
        za, f0 = [], []
        for k in range(N):
            u = lat.policy_controls(pol, k)
            mu, sig = rs.family.coefficients(rs.grid.time(k), lat.x, u)
            a = sig[:, 0, 0] ** 2
            za.append(a * rs.Z[k, :, 0] ** 2 * dt)
            f0.append(np.abs(rs.generator.intercept(rs.grid.time(k), lat.x, a[:, None, None],
                                                    mu)) * dt)
        # p = 2: E[(sum a Z^2 dt)^{p/2}] is the linear expectation of the sum
        z_norm = max(z_norm, sum_moments(lat, pol, np.array(za))[0][lat.center] ** 0.5)
        dK = extract_K(rs, pol)
        k_norm = max(k_norm, sum_moments(lat, pol, dK)[1][lat.center] ** 0.5)
        xi_norm = max(xi_norm, lat.expect_under(pol, np.abs(xi) ** p)[lat.center] ** (1.0 / p))
        f_norm = max(f_norm, sum_moments(lat, pol, np.array(f0))[1][lat.center] ** 0.5)
    return {"Y": y_norm, "Z": z_norm, "K": k_norm, "xi": xi_norm, "f0": f_norm}


def verify_apriori_estimates(rs: RobustSolution, p: float = 2.0, kappa: float = 1.5,
                             refine: bool = True) -> Report:
    """Discrete surrogates of the a-priori estimate and their stability under ``N -> 2N``.

    Left side: ``sup_P sup_k E^P|V_k|^p``, ``sup_P E^P[sum a Z^2 dt]`` and
    ``sup_P E^P[K_T^2]`` (to the appropriate roots). Right side: the terminal
    moment and the driver's intercept ``f(t, x, 0, 0)``. The sup runs over the
    constant and argmax policies. Only ``p = 2`` is supported.
    """
    if rs.mode != "lattice":
        raise InvalidParametersError("a-priori surrogates are computed on the lattice")
    if p != 2.0:
        raise InvalidParametersError("only p = 2 is supported")
    if not 1.0 < kappa < p:
        raise InvalidParametersError("kappa must lie in (1, p)")
    norms = _apriori_norms(rs, p, kappa)

    def ratio(n):
        lhs = n["Y"] + n["Z"] + n["K"]
        rhs = n["xi"] + n["f0"]
        if rhs == 0.0:
            return 0.0 if lhs == 0.0 else np.inf
        return lhs / rhs

    r1 = ratio(norms)
    details = {"norms": norms, "ratio": r1, "p": p, "kappa": kappa}
    passed = bool(np.isfinite(r1) and all(np.isfinite(v) for v in norms.values()))
    if refine:
        lat = rs.source
        fine_grid = TimeGrid(rs.grid.horizon, 2 * rs.grid.steps)
        fine_lat = Lattice(rs.family, fine_grid, lat.x0, nodes=lat.size, n_std=lat.n_std,
                           coordinate=lat.coordinate)
        fine = _robust_lattice(fine_lat, rs.generator, rs.claim, rs.picard_tol, rs.clip_m,
                               None if rs.claim is not None else rs.V[-1])
        r2 = ratio(_apriori_norms(fine, p, kappa))
        details["ratio_refined"] = r2
        if r1 > 0 or r2 > 0:
            passed = passed and np.isfinite(r2) and max(r1, r2) <= 2.0 * min(r1, r2)
    return Report("apriori", passed, r1, 2.0, details)


def verify_sup_consistency(rs: RobustSolution, policies: Sequence[ControlPolicy],
                           tol: float = 1e-10) -> Report:
    """``V_0`` dominates the single-measure value of every supplied policy (lattice)."""
    worst = np.inf
    values = {}
    for pol in policies:
        sol = solve_bsde(rs.source, rs.generator, rs.claim, policy=pol,
                         picard_tol=rs.picard_tol, clip_m=rs.clip_m)
        values[pol.name] = sol.y0
        worst = min(worst, float(np.min(rs.V.T - sol.Y)))
    return Report("sup_consistency", worst >= -tol, worst, tol, {"policy_values": values})
