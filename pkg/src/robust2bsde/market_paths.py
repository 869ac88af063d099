"""Time grids, controlled diffusion families and Euler path simulation.

A measure of the controlled family is realized by a feedback
:class:`ControlPolicy` over a finite :class:`ControlSet`. Paths are driven by
counter-based Philox streams keyed on ``(seed, block)``, so the increments of
path ``m`` do not depend on ``M`` or on how blocks are scheduled on threads.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InvalidParametersError, SimulationDivergedError
from .validation import (
    check_finite,
    check_positive,
    check_positive_int,
    check_psd,
    check_seed,
    check_states,
)

BLOCK_SIZE = 4096
_PINV_RTOL = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition ``t_k = k T / N`` of ``[0, T]``."""

    horizon: float
    steps: int

    def __post_init__(self):
        check_positive(self.horizon, "horizon")
        check_positive_int(self.steps, "steps")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.horizon / self.steps

    def time(self, k: int) -> float:
        return k * self.horizon / self.steps

    def truncate(self, k: int) -> "TimeGrid":
        """Grid on ``[0, t_k]`` sharing the first ``k`` steps."""
        if not 0 < k <= self.steps:
            raise ValueError(f"truncation index must lie in (0, {self.steps}], got {k}")
        return TimeGrid(self.time(k), k)


class ControlSet:
    """Finite discretization of the control space."""

    def __init__(self, points, labels=None):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or len(pts) == 0:
            raise InvalidParametersError("a control set needs at least one point")
        check_finite(pts, "control points")
        if len(np.unique(pts, axis=0)) != len(pts):
            raise InvalidParametersError("control set contains duplicate points")
        self.points = pts
        self.points.setflags(write=False)
        if labels is None:
            labels = [",".join(f"{v:g}" for v in p) for p in pts]
        if len(labels) != len(pts):
            raise InvalidParametersError("one label per control point is required")
        self.labels = list(labels)

    def __len__(self):
        return len(self.points)

    def __getitem__(self, i):
        return self.points[i]

    def __repr__(self):
        return f"ControlSet({self.labels})"

    def subset(self, indices) -> "ControlSet":
        indices = list(indices)
        return ControlSet(self.points[indices], [self.labels[i] for i in indices])


@dataclass(frozen=True)
class DiffusionFamily:
    """Controlled Markov diffusion ``dX = mu(t,X,u) dt + sigma(t,X,u) dW``.

    ``drift(t, x, u)`` maps states of shape ``(n, d)`` and one control point to
    an ``(n, d)`` array; ``volatility`` returns ``(n, d, d)``.
    """

    dim: int
    drift: Callable
    volatility: Callable
    control_set: ControlSet
    lipschitz_L: float
    state_domain: str = "real"
    time_homogeneous: bool = True
    name: str = "diffusion"

    def __post_init__(self):
        check_positive_int(self.dim, "dim")
        check_positive(self.lipschitz_L, "lipschitz_L")
        if self.state_domain not in ("real", "positive"):
            raise InvalidParametersError("state_domain must be 'real' or 'positive'")

    def coefficients(self, t, x, controls):
        """Drift ``(n, d)`` and volatility ``(n, d, d)`` with per-row control indices."""
        x = check_states(x, self.dim)
        controls = np.broadcast_to(np.asarray(controls, dtype=int), (len(x),))
        mu = np.empty_like(x)
        sig = np.empty((len(x), self.dim, self.dim))
        for u in np.unique(controls):
            rows = controls == u
            point = self.control_set[u]
            mu[rows] = np.reshape(self.drift(t, x[rows], point), (-1, self.dim))
            sig[rows] = np.reshape(self.volatility(t, x[rows], point), (-1, self.dim, self.dim))
        return mu, sig

    def with_controls(self, indices) -> "DiffusionFamily":
        """Same dynamics restricted to a subset of the control points."""
        return DiffusionFamily(
            self.dim, self.drift, self.volatility, self.control_set.subset(indices),
            self.lipschitz_L, self.state_domain, self.time_homogeneous, self.name,
        )


def uncertain_volatility_family(sigmas: Sequence[float], rate: float = 0.0,
                                geometric: bool = True) -> DiffusionFamily:
    """One-dimensional family with volatility chosen from ``sigmas``.

    Geometric: ``dX = rate X dt + s X dW``; arithmetic: ``dX = rate dt + s dW``.
    """
    sigmas = [float(s) for s in sigmas]
    if any(s < 0 for s in sigmas):
        raise InvalidParametersError("volatilities must be non-negative")
    controls = ControlSet(np.array(sigmas)[:, None], [f"sigma={s:g}" for s in sigmas])
    if geometric:
        def drift(t, x, u):
            return rate * x

        def vol(t, x, u):
            return (u[0] * x)[:, :, None]

        lip = max(abs(rate), max(sigmas)) * np.sqrt(2.0) or 1.0
        return DiffusionFamily(1, drift, vol, controls, lip, "positive", True, "uvm-geometric")

    def drift(t, x, u):
        return np.full_like(x, rate)

    def vol(t, x, u):
        return np.full((len(x), 1, 1), u[0])

    return DiffusionFamily(1, drift, vol, controls, 1.0, "real", True, "uvm-arithmetic")


def check_family_lipschitz(family: DiffusionFamily, n: int = 200, seed: int = 0,
                           scale: float = 1.0, T: float = 1.0) -> float:
    """Sample-check the Lipschitz bound in the state; returns the worst ratio."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for u in range(len(family.control_set)):
        t = rng.uniform(0, T)
        x = rng.normal(0, scale, size=(n, family.dim))
        if family.state_domain == "positive":
            x = np.abs(x) + 1e-3
        x2 = x + rng.normal(0, 0.1 * scale, size=x.shape)
        if family.state_domain == "positive":
            x2 = np.abs(x2) + 1e-3
        m1, s1 = family.coefficients(t, x, u)
        m2, s2 = family.coefficients(t, x2, u)
        num = np.sqrt(np.sum((m1 - m2) ** 2, axis=1) + np.sum((s1 - s2) ** 2, axis=(1, 2)))
        den = np.linalg.norm(x - x2, axis=1)
        ok = den > 0
        worst = max(worst, float(np.max(num[ok] / den[ok], initial=0.0)))
    if worst > family.lipschitz_L * (1 + 1e-9):
        raise InvalidParametersError(
            f"sampled Lipschitz ratio {worst:.4g} exceeds declared L={family.lipschitz_L:.4g}"
        )
    return worst


@dataclass(frozen=True)
class ControlPolicy:
    """Markov feedback policy returning indices into a :class:`ControlSet`.

    ``kind='constant'`` always returns ``index``. ``kind='table'`` returns
    ``table[k, bucket]`` where the bucket of a state is found by binary search
    of its first coordinate in ``edges`` (``len(edges) == table.shape[1] - 1``).
    ``kind='feedback'`` calls ``rule(k, x)``, used for argmax policies that are
    only known as functions of the state.
    """

    kind: str
    index: int = 0
    table: Optional[np.ndarray] = field(default=None, repr=False)
    edges: Optional[np.ndarray] = field(default=None, repr=False)
    name: str = ""
    rule: Optional[Callable] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("constant", "table", "feedback"):
            raise InvalidParametersError(f"unknown policy kind {self.kind!r}")
        if self.kind == "table":
            table = np.asarray(self.table, dtype=int)
            edges = np.asarray(self.edges, dtype=float)
            if table.ndim != 2 or edges.ndim != 1 or len(edges) != table.shape[1] - 1:
                raise InvalidParametersError("table must be (steps, buckets) with buckets-1 edges")
            if np.any(np.diff(edges) < 0):
                raise InvalidParametersError("bucket edges must be sorted")
            table.setflags(write=False)
            object.__setattr__(self, "table", table)
            object.__setattr__(self, "edges", edges)
        if self.kind == "feedback" and not callable(self.rule):
            raise InvalidParametersError("feedback policies need a callable rule")

    @classmethod
    def constant(cls, index: int, name: str = "") -> "ControlPolicy":
        return cls("constant", index=int(index), name=name or f"constant[{index}]")

    @classmethod
    def from_table(cls, table, edges, name: str = "table") -> "ControlPolicy":
        return cls("table", table=table, edges=edges, name=name)

    @classmethod
    def feedback(cls, rule: Callable, name: str = "feedback") -> "ControlPolicy":
        return cls("feedback", rule=rule, name=name)

    def lookup(self, k: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        n = x.shape[0] if x.ndim else 1
        if self.kind == "constant":
            return np.full(n, self.index, dtype=int)
        if self.kind == "feedback":
            return np.asarray(self.rule(k, x.reshape(n, -1)), dtype=int)
        first = x.reshape(n, -1)[:, 0]
        return self.table[k, np.searchsorted(self.edges, first, side="right")]

    def validate(self, control_set: ControlSet, steps: Optional[int] = None):
        n_u = len(control_set)
        if self.kind == "feedback":
            return self
        values = [self.index] if self.kind == "constant" else np.unique(self.table)
        if np.min(values) < 0 or np.max(values) >= n_u:
            raise InvalidParametersError("policy returns controls outside the control set")
        if self.kind == "table" and steps is not None and self.table.shape[0] < steps:
            raise InvalidParametersError(
                f"policy table covers {self.table.shape[0]} steps, grid has {steps}"
            )
        return self


def random_feedback_policies(control_set: ControlSet, steps: int, edges, count: int,
                             seed: int) -> list:
    """Independent uniformly random feedback tables (stress set for q.s. checks)."""
    rng = np.random.Generator(np.random.Philox(key=[check_seed(seed), 0x9E3779B9]))
    edges = np.asarray(edges, dtype=float)
    return [
        ControlPolicy.from_table(
            rng.integers(0, len(control_set), size=(steps, len(edges) + 1)),
            edges, name=f"random[{i}]",
        )
        for i in range(count)
    ]


def pseudoinverse_sqrt(a):
    """Symmetric PSD square root and Moore-Penrose pseudoinverse of ``a``.

    Works on a single ``(d, d)`` matrix or a batch ``(..., d, d)``. Raises
    :class:`InvalidMatrixError` for asymmetric or indefinite input.
    """
    w, v = check_psd(a, "a")
    vt = np.swapaxes(v, -1, -2)
    half = (v * np.sqrt(w)[..., None, :]) @ vt
    cutoff = _PINV_RTOL * np.max(w, axis=-1, keepdims=True)
    inv_w = np.where((w > cutoff) & (w > 0), 1.0 / np.where(w > 0, w, 1.0), 0.0)
    pinv = (v * inv_w[..., None, :]) @ vt
    return half, pinv


@dataclass(frozen=True)
class PathEnsemble:
    """Simulated states and increments under one feedback policy.

    Shapes: ``X (M, N+1, d)``, ``dW``/``drift_b (M, N, d)``,
    ``a_hat (M, N, d, d)``, ``controls (M, N)``.
    """

    X: np.ndarray
    dW: np.ndarray
    a_hat: np.ndarray
    drift_b: np.ndarray
    controls: np.ndarray
    seed: int
    policy: ControlPolicy
    grid: TimeGrid
    family: DiffusionFamily = field(repr=False)
    increments: str = "gaussian"

    @property
    def M(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[2]

    def dX_c(self, k: int) -> np.ndarray:
        """Martingale part ``X_{k+1} - X_k - b_k dt`` of the step-k increment."""
        return self.X[:, k + 1] - self.X[:, k] - self.drift_b[:, k] * self.grid.dt

    def to_csv(self, path):
        """Columnar dump: path, step, x_0..x_{d-1}, dw_0..dw_{d-1}.

        Increment columns on the last step are left empty.
        """
        d = self.dim
        header = ["path", "step"] + [f"x_{i}" for i in range(d)] + [f"dw_{i}" for i in range(d)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            N = self.grid.steps
            for m in range(self.M):
                for k in range(N + 1):
                    inc = [repr(float(v)) for v in self.dW[m, k]] if k < N else [""] * d
                    writer.writerow([m, k] + [repr(float(v)) for v in self.X[m, k]] + inc)


def _block_increments(seed, block, n_paths, steps, dim, dt, kind):
    rng = np.random.Generator(np.random.Philox(key=[seed, block]))
    if kind == "gaussian":
        return rng.standard_normal((BLOCK_SIZE, steps, dim))[:n_paths] * np.sqrt(dt)
    signs = rng.integers(0, 2, size=(BLOCK_SIZE, steps, dim))[:n_paths]
    return (2.0 * signs - 1.0) * np.sqrt(dt)


def _simulate_block(family, policy, grid, x0, seed, block, n_paths, kind, first_path):
    N, d, dt = grid.steps, family.dim, grid.dt
    dW = _block_increments(seed, block, n_paths, N, d, dt, kind)
    X = np.empty((n_paths, N + 1, d))
    a_hat = np.empty((n_paths, N, d, d))
    b = np.empty((n_paths, N, d))
    ctrl = np.empty((n_paths, N), dtype=int)
    X[:, 0] = x0
    for k in range(N):
        u = policy.lookup(k, X[:, k])
        mu, sig = family.coefficients(grid.time(k), X[:, k], u)
        X[:, k + 1] = X[:, k] + mu * dt + np.einsum("mij,mj->mi", sig, dW[:, k])
        bad = ~np.all(np.isfinite(X[:, k + 1]), axis=1)
        if np.any(bad):
            raise SimulationDivergedError(first_path + int(np.argmax(bad)), k + 1)
        a_hat[:, k] = sig @ np.swapaxes(sig, -1, -2)
        b[:, k] = mu
        ctrl[:, k] = u
    return X, dW, a_hat, b, ctrl


def simulate(family: DiffusionFamily, policy: ControlPolicy, grid: TimeGrid, M: int,
             x0, seed: int, n_jobs: int = 1, increments: str = "gaussian") -> PathEnsemble:
    """Euler-Maruyama paths of the controlled diffusion under ``policy``.

    ``increments='rademacher'`` draws ``dW = +-sqrt(dt)`` per component, the
    two-point law used by the lattice measures.
    """
    M = check_positive_int(M, "M")
    seed = check_seed(seed)
    if increments not in ("gaussian", "rademacher"):
        raise InvalidParametersError("increments must be 'gaussian' or 'rademacher'")
    x0 = check_finite(np.broadcast_to(np.asarray(x0, dtype=float), (family.dim,)), "x0").copy()
    policy.validate(family.control_set, grid.steps)

    n_blocks = -(-M // BLOCK_SIZE)
    jobs = [(b, min(BLOCK_SIZE, M - b * BLOCK_SIZE)) for b in range(n_blocks)]

    def run(job):
        b, n = job
        return _simulate_block(family, policy, grid, x0, seed, b, n, increments, b * BLOCK_SIZE)

    if n_jobs > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(j) for j in jobs]
    arrays = [np.concatenate([p[i] for p in parts]) for i in range(5)]
    for a in arrays:
        a.setflags(write=False)
    X, dW, a_hat, b, ctrl = arrays
    return PathEnsemble(X, dW, a_hat, b, ctrl, seed, policy, grid, family, increments)
