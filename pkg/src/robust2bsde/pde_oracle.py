"""Independent oracles: Black-Scholes and a monotone solver for the Markov G-equation.

The one-dimensional equation is

    v_t + sup_u { mu_u v_x + 1/2 a_u v_xx - f(t, x, v, sigma_u v_x, a_u, mu_u) } = 0,
    v(T, x) = g(x),

which is the Markov PDE of a robust backward SDE written with the convention
``Y = xi - int f dt - int Z dX^c``. With ``f = 0`` and a volatility band this is
the Black-Scholes-Barenblatt equation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_banded
from scipy.stats import norm

from .errors import ConfigurationError, InvalidParametersError, StepDivergenceError
from .generators import GeneratorSpec, TerminalClaim
from .market_paths import DiffusionFamily
from .validation import check_positive_int


def black_scholes(x0, strike, sigma, r, T, kind: str = "call"):
    """Black-Scholes price of a European call or put (no dividends)."""
    if sigma <= 0 or T <= 0:
        raise InvalidParametersError("sigma and T must be positive")
    if kind not in ("call", "put"):
        raise InvalidParametersError("kind must be 'call' or 'put'")
    x0, strike = np.asarray(x0, dtype=float), np.asarray(strike, dtype=float)
    sd = sigma * np.sqrt(T)
    d1 = (np.log(x0 / strike) + (r + 0.5 * sigma ** 2) * T) / sd
    d2 = d1 - sd
    disc = np.exp(-r * T)
    if kind == "call":
        out = x0 * norm.cdf(d1) - strike * disc * norm.cdf(d2)
    else:
        out = strike * disc * norm.cdf(-d2) - x0 * norm.cdf(-d1)
    return float(out) if out.ndim == 0 else out


def black_scholes_delta(x0, strike, sigma, r, T, kind: str = "call"):
    if sigma <= 0 or T <= 0:
        raise InvalidParametersError("sigma and T must be positive")
    d1 = (np.log(x0 / strike) + (r + 0.5 * sigma ** 2) * T) / (sigma * np.sqrt(T))
    return float(norm.cdf(d1) if kind == "call" else norm.cdf(d1) - 1.0)


@dataclass(frozen=True)
class PdeGrid:
    """Space-time grid; nodes are evenly spaced in log-state when ``coordinate='log'``."""

    x_min: float
    x_max: float
    nodes: int
    steps: int
    horizon: float
    boundary: str = "linear-extrapolation"
    scheme: str = "implicit"
    coordinate: str = "log"

    def __post_init__(self):
        check_positive_int(self.nodes, "nodes")
        check_positive_int(self.steps, "steps")
        if self.nodes < 3:
            raise InvalidParametersError("a PDE grid needs at least three nodes")
        if not self.x_min < self.x_max:
            raise InvalidParametersError("x_min must be below x_max")
        if self.horizon <= 0:
            raise InvalidParametersError("horizon must be positive")
        if self.boundary not in ("dirichlet-payoff", "linear-extrapolation"):
            raise InvalidParametersError(f"unknown boundary {self.boundary!r}")
        if self.scheme not in ("implicit", "explicit"):
            raise InvalidParametersError(f"unknown scheme {self.scheme!r}")
        if self.coordinate not in ("log", "linear"):
            raise InvalidParametersError(f"unknown coordinate {self.coordinate!r}")
        if self.coordinate == "log" and self.x_min <= 0:
            raise InvalidParametersError("log coordinate needs x_min > 0")

    @classmethod
    def around(cls, family: DiffusionFamily, x0: float, horizon: float, nodes: int = 801,
               steps: int = 800, n_std: float = 6.0, **kw) -> "PdeGrid":
        """Domain of ``n_std`` standard deviations at the largest volatility around ``x0``."""
        x = np.array([[x0]], dtype=float)
        spread = max(abs(float(family.coefficients(0.0, x, u)[1][0, 0, 0]))
                     for u in range(len(family.control_set)))
        if family.state_domain == "positive":
            half = n_std * spread / x0 * np.sqrt(horizon)
            return cls(x0 * np.exp(-half), x0 * np.exp(half), nodes, steps, horizon,
                       coordinate="log", **kw)
        half = n_std * max(spread, 1e-12) * np.sqrt(horizon)
        return cls(x0 - half, x0 + half, nodes, steps, horizon, coordinate="linear", **kw)

    @property
    def x(self) -> np.ndarray:
        if self.coordinate == "log":
            return np.exp(np.linspace(np.log(self.x_min), np.log(self.x_max), self.nodes))
        return np.linspace(self.x_min, self.x_max, self.nodes)

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)


@dataclass
class GOperator:
    """``G(t, x, y, z, gamma) = sup_u { -f + mu_u z + 1/2 a_u gamma }`` over the control set."""

    family: DiffusionFamily
    generator: Optional[GeneratorSpec] = None

    def __post_init__(self):
        if self.family.dim != 1:
            raise InvalidParametersError("the PDE oracle is one-dimensional")

    def coefficients(self, t, x):
        """``mu``, ``sigma`` and ``a`` with shape ``(U, J)``."""
        xs = x[:, None]
        mus, sigs = [], []
        for u in range(len(self.family.control_set)):
            mu, sig = self.family.coefficients(t, xs, u)
            mus.append(mu[:, 0])
            sigs.append(sig[:, 0, 0])
        mu, sig = np.array(mus), np.array(sigs)
        return mu, sig, sig ** 2

    def driver(self, t, x, v, z, a, mu):
        if self.generator is None:
            return np.zeros_like(v)
        return self.generator(t, x[:, None], v, z[:, None], a[:, None, None], mu[:, None])

    def __call__(self, t, x, y, z, gamma):
        """Pointwise ``G`` and the maximizing control (lowest index on ties)."""
        x, y, z, gamma = (np.asarray(v, dtype=float) for v in (x, y, z, gamma))
        mu, sig, a = self.coefficients(t, x)
        vals = np.array([
            -self.driver(t, x, y, sig[u] * z, a[u], mu[u]) + mu[u] * z + 0.5 * a[u] * gamma
            for u in range(len(mu))
        ])
        return vals.max(axis=0), vals.argmax(axis=0)


@dataclass
class PdeSolution:
    times: np.ndarray
    x: np.ndarray
    v: np.ndarray
    controls: np.ndarray
    value0: float
    iterations: np.ndarray = field(repr=False)

    def value_at(self, x, k: int = 0):
        return np.interp(x, self.x, self.v[k])

    def to_csv(self, path, stride: int = 1):
        """Surface dump with columns ``t, x, v``."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "x", "v"])
            ks = sorted(set(range(0, len(self.times), stride)) | {len(self.times) - 1})
            for k in ks:
                for xj, vj in zip(self.x, self.v[k]):
                    writer.writerow([repr(float(self.times[k])), repr(float(xj)), repr(float(vj))])


def _operator_bands(x, mu, a, boundary):
    """Coefficients ``(lower, diag, upper)`` of ``L = mu d_x + 1/2 a d_xx`` per node."""
    J = len(x)
    lo, di, up = np.zeros(J), np.zeros(J), np.zeros(J)
    hm = x[1:-1] - x[:-2]
    hp = x[2:] - x[1:-1]
    s = hm + hp
    m, aa = mu[1:-1], a[1:-1]
    cm = aa / (hm * s) - m / s
    cp = aa / (hp * s) + m / s
    # upwind where central differencing would break monotonicity
    bad = (cm < 0) | (cp < 0)
    if np.any(bad):
        cm_up = aa / (hm * s) + np.maximum(-m, 0.0) / hm
        cp_up = aa / (hp * s) + np.maximum(m, 0.0) / hp
        cm = np.where(bad, cm_up, cm)
        cp = np.where(bad, cp_up, cp)
    lo[1:-1], up[1:-1], di[1:-1] = cm, cp, -(cm + cp)
    if boundary == "linear-extrapolation":
        # zero second derivative; one-sided first derivative at the ends
        h0, h1 = x[1] - x[0], x[-1] - x[-2]
        up[0], di[0] = mu[0] / h0, -mu[0] / h0
        lo[-1], di[-1] = -mu[-1] / h1, mu[-1] / h1
    return lo, di, up


def _first_derivative(x, v):
    vx = np.empty_like(v)
    vx[1:-1] = (v[2:] - v[:-2]) / (x[2:] - x[:-2])
    vx[0] = (v[1] - v[0]) / (x[1] - x[0])
    vx[-1] = (v[-1] - v[-2]) / (x[-1] - x[-2])
    return vx


def _apply(lo, di, up, v):
    out = di * v
    out[1:] += lo[1:] * v[:-1]
    out[:-1] += up[:-1] * v[1:]
    return out


def solve_g_equation(op: GOperator, claim: TerminalClaim, grid: PdeGrid, x0: Optional[float] = None,
                     tol: float = 1e-12, max_iter: int = 200) -> PdeSolution:
    """Backward sweep of the G-equation with a per-node sup over the control set.

    The implicit scheme solves each step by policy iteration combined with a
    fixed point in the driver; the explicit scheme checks the CFL condition
    ``a dt / dx^2 <= 1/2`` and raises :class:`ConfigurationError` otherwise.
    """
    x = grid.x
    J, N, dt = grid.nodes, grid.steps, grid.dt
    times = grid.times
    v = np.empty((N + 1, J))
    controls = np.zeros((N, J), dtype=int)
    iters = np.zeros(N, dtype=int)
    v[N] = claim(x[:, None])
    dirichlet = grid.boundary == "dirichlet-payoff"
    n_u = len(op.family.control_set)

    if grid.scheme == "explicit":
        _, _, a = op.coefficients(times[0], x)
        dx = np.diff(x)
        dx_min = np.minimum(np.r_[dx, np.inf], np.r_[np.inf, dx])
        cfl = float(np.max(a * dt / dx_min[None, :] ** 2))
        if cfl > 0.5:
            raise ConfigurationError(
                f"explicit scheme violates the CFL condition: max a*dt/dx^2 = {cfl:.3g} > 1/2"
            )

    for k in reversed(range(N)):
        t = times[k]
        mu, sig, a = op.coefficients(t, x)
        bands = [_operator_bands(x, mu[u], a[u], grid.boundary) for u in range(n_u)]
        nxt = v[k + 1]
        if grid.scheme == "explicit":
            vx = _first_derivative(x, nxt)
            H = np.array([_apply(*bands[u], nxt)
                          - op.driver(t, x, nxt, sig[u] * vx, a[u], mu[u]) for u in range(n_u)])
            ustar = H.argmax(axis=0)
            w = nxt + dt * H[ustar, np.arange(J)]
            iters[k] = 1
        else:
            w = nxt.copy()
            prev_change = np.inf
            growing = 0
            for it in range(1, max_iter + 1):
                vx = _first_derivative(x, w)
                fw = np.array([op.driver(t, x, w, sig[u] * vx, a[u], mu[u]) for u in range(n_u)])
                H = np.array([_apply(*bands[u], w) for u in range(n_u)]) - fw
                ustar = H.argmax(axis=0)
                rows = np.arange(J)
                lo = np.choose(ustar, [b[0] for b in bands])
                di = np.choose(ustar, [b[1] for b in bands])
                up = np.choose(ustar, [b[2] for b in bands])
                ab = np.zeros((3, J))
                ab[0, 1:] = -dt * up[:-1]
                ab[1] = 1.0 - dt * di
                ab[2, :-1] = -dt * lo[1:]
                rhs = nxt - dt * fw[ustar, rows]
                if dirichlet:
                    ab[1, 0] = ab[1, -1] = 1.0
                    ab[0, 1] = 0.0
                    ab[2, -2] = 0.0
                    rhs[0], rhs[-1] = nxt[0], nxt[-1]
                w_new = solve_banded((1, 1), ab, rhs)
                change = float(np.max(np.abs(w_new - w)))
                w = w_new
                if not np.isfinite(change):
                    raise StepDivergenceError(k, np.nan, f"PDE iteration diverged at step {k}")
                if change <= tol * (1.0 + np.max(np.abs(w))):
                    break
                growing = growing + 1 if change > prev_change else 0
                if growing >= 5:
                    raise StepDivergenceError(k, np.nan, f"PDE iteration diverged at step {k}")
                prev_change = change
            iters[k] = it
        if dirichlet:
            w[0], w[-1] = nxt[0], nxt[-1]
        v[k] = w
        controls[k] = ustar
    value0 = float(np.interp(x0, x, v[0])) if x0 is not None else float("nan")
    return PdeSolution(times, x, v, controls, value0, iters)
