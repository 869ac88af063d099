"""BSDE drivers ``f(t, x, y, z, a, b)`` and terminal claims ``g(x_T)``.

Drivers are vectorized over a leading batch axis: ``x``, ``z``, ``b`` have
shape ``(n, d)``, ``y`` has shape ``(n,)`` and ``a`` has shape ``(n, d, d)``.
The solvers use the sign convention ``Y_t = xi - int_t^T f ds - int Z dX``, so
``f`` is the drift of the value process (for pricing, the wealth drift).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InvalidParametersError
from .validation import check_psd


@dataclass(frozen=True)
class GeneratorSpec:
    evaluator: Callable
    lipschitz_y: float
    lipschitz_z: float
    name: str
    params: dict = field(default_factory=dict)

    def __call__(self, t, x, y, z, a, b):
        return self.evaluator(t, x, y, z, a, b)

    def intercept(self, t, x, a, b):
        """``f(t, x, 0, 0, a, b)``."""
        n, d = np.shape(x)
        return self.evaluator(t, x, np.zeros(n), np.zeros((n, d)), a, b)

    @property
    def lipschitz(self) -> float:
        return self.lipschitz_y + self.lipschitz_z


@dataclass(frozen=True)
class TerminalClaim:
    payoff: Callable
    name: str
    p: float = 2.0
    params: dict = field(default_factory=dict)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        return np.asarray(self.payoff(x), dtype=float)

    def scaled(self, factor: float) -> "TerminalClaim":
        return TerminalClaim(lambda x: factor * self.payoff(x), f"{factor:g}*{self.name}",
                             self.p, dict(self.params, scale=factor))

    def shifted(self, offset) -> "TerminalClaim":
        """Claim ``g + offset`` where ``offset`` is a constant or a function of x."""
        if callable(offset):
            return TerminalClaim(lambda x: self.payoff(x) + offset(x), f"{self.name}+delta",
                                 self.p, dict(self.params))
        return TerminalClaim(lambda x: self.payoff(x) + offset, f"{self.name}+{offset:g}",
                             self.p, dict(self.params))


def _dot(z, v):
    return np.einsum("ij,ij->i", z, v)


def sqrt_pseudoinverse(a):
    """Moore-Penrose pseudoinverse of the symmetric square root of a PSD batch."""
    w, v = check_psd(a, "a")
    s = np.sqrt(w)
    cutoff = 1e-12 * np.max(s, axis=-1, keepdims=True)
    inv = np.where((s > cutoff) & (s > 0), 1.0 / np.where(s > 0, s, 1.0), 0.0)
    return (v * inv[..., None, :]) @ np.swapaxes(v, -1, -2)


def risk_premium(r: float, reference: str = "unit") -> Callable:
    """``theta = (a^{1/2})^+ (b - r * ref)``.

    ``reference='unit'`` subtracts ``r * 1`` (state measured in return units);
    ``reference='state'`` subtracts ``r * x`` (state measured in price units).
    """
    if reference not in ("unit", "state"):
        raise InvalidParametersError("reference must be 'unit' or 'state'")

    def theta(t, x, a, b):
        excess = b - r * (x if reference == "state" else np.ones_like(b))
        return np.einsum("nij,nj->ni", sqrt_pseudoinverse(a), excess)

    theta.reference = reference
    theta.rate = r
    return theta


def zero_generator() -> GeneratorSpec:
    return GeneratorSpec(lambda t, x, y, z, a, b: np.zeros(np.shape(y)), 0.0, 0.0, "zero")


def constant_generator(c: float) -> GeneratorSpec:
    c = float(c)
    return GeneratorSpec(lambda t, x, y, z, a, b: np.full(np.shape(y), c), 0.0, 0.0,
                         "constant", {"c": c})


def affine_generator(slope_y: float = 0.0, slope_z=0.0, intercept=0.0,
                     name: str = "affine") -> GeneratorSpec:
    """``f = slope_y * y + slope_z . z + c(t, x)``.

    ``intercept`` is a constant or a callable ``(t, x) -> (n,)``.
    """
    slope_z_arr = np.atleast_1d(np.asarray(slope_z, dtype=float))

    def f(t, x, y, z, a, b):
        c = intercept(t, x) if callable(intercept) else intercept
        return slope_y * y + z @ np.broadcast_to(slope_z_arr, (z.shape[1],)) + c

    return GeneratorSpec(f, abs(slope_y), float(np.linalg.norm(slope_z_arr)), name,
                         {"slope_y": slope_y, "slope_z": slope_z_arr.tolist()})


def linear_pricing_generator(r: float, theta: Optional[Callable] = None,
                             theta_bound: Optional[float] = None) -> GeneratorSpec:
    """Classical wealth drift ``f = r y + z . theta``.

    ``theta(t, x, a, b)`` returns ``(n, d)``; ``None`` means zero premium.
    ``theta_bound`` declares ``sup |theta|`` over the support and becomes the
    z-Lipschitz constant.
    """
    r = float(r)
    if not np.isfinite(r):
        raise InvalidParametersError("rate must be finite")
    if theta is None:
        def f(t, x, y, z, a, b):
            return r * y
        lz = 0.0
    else:
        if theta_bound is None:
            raise InvalidParametersError("theta_bound is required with a risk premium")

        def f(t, x, y, z, a, b):
            return r * y + _dot(z, theta(t, x, a, b))
        lz = float(theta_bound)
    return GeneratorSpec(f, abs(r), lz, "linear", {"r": r})


def two_rate_generator(r_lend: float, r_borrow: float, theta: Optional[Callable] = None,
                       theta_bound: Optional[float] = None, dim: int = 1) -> GeneratorSpec:
    """Different lending and borrowing rates.

    ``f = r_lend y + z . theta - (r_borrow - r_lend) (y - z . 1)^-``.
    """
    r_lend, r_borrow = float(r_lend), float(r_borrow)
    if r_borrow < r_lend:
        raise InvalidParametersError(
            f"borrowing rate {r_borrow} is below lending rate {r_lend}"
        )
    if theta is not None and theta_bound is None:
        raise InvalidParametersError("theta_bound is required with a risk premium")
    spread = r_borrow - r_lend

    def f(t, x, y, z, a, b):
        out = r_lend * y - spread * np.maximum(z.sum(axis=1) - y, 0.0)
        if theta is not None:
            out = out + _dot(z, theta(t, x, a, b))
        return out

    # |z . 1| <= sqrt(d) |z|
    lz = (theta_bound or 0.0) + spread * np.sqrt(dim)
    return GeneratorSpec(f, abs(r_lend) + spread, lz, "two_rate",
                         {"r_lend": r_lend, "r_borrow": r_borrow})


def random_tuples(rng, n: int, dim: int = 1, scale: float = 1.0):
    """Random ``(t, x, a, b)`` with ``a`` PSD, for sampling checks."""
    t = rng.uniform(0, 1)
    x = rng.normal(0, scale, size=(n, dim))
    g = rng.normal(0, 0.5, size=(n, dim, dim))
    a = g @ np.swapaxes(g, 1, 2)
    b = rng.normal(0, 0.1, size=(n, dim))
    return t, x, a, b


def check_lipschitz(gen: GeneratorSpec, dim: int = 1, n: int = 1000, seed: int = 0,
                    sampler: Optional[Callable] = None) -> float:
    """Sample-check the declared Lipschitz constants; returns the worst slack ratio.

    ``sampler(rng, n)`` may supply ``(t, x, a, b)`` drawn from a model's support.
    """
    rng = np.random.default_rng(seed)
    t, x, a, b = (sampler or (lambda r, m: random_tuples(r, m, dim)))(rng, n)
    d = x.shape[1]
    y1, y2 = rng.normal(0, 10, size=(2, n))
    z1, z2 = rng.normal(0, 10, size=(2, n, d))
    lhs = np.abs(gen(t, x, y1, z1, a, b) - gen(t, x, y2, z2, a, b))
    rhs = gen.lipschitz_y * np.abs(y1 - y2) + gen.lipschitz_z * np.linalg.norm(z1 - z2, axis=1)
    if np.any(lhs > rhs * (1 + 1e-9) + 1e-12):
        worst = float(np.max(lhs - rhs))
        raise InvalidParametersError(f"generator {gen.name!r} violates its Lipschitz bound by {worst:.3g}")
    ratio = lhs / np.where(rhs > 0, rhs, 1.0)
    return float(np.max(ratio))


def family_sampler(family, low: float, high: float):
    """Sampler of ``(t, x, a, b)`` along the coefficients of a diffusion family."""

    def sample(rng, n):
        t = rng.uniform(0, 1)
        x = rng.uniform(low, high, size=(n, family.dim))
        u = rng.integers(0, len(family.control_set), size=n)
        mu, sig = family.coefficients(t, x, u)
        return t, x, sig @ np.swapaxes(sig, 1, 2), mu

    return sample


def check_moment(claim: TerminalClaim, samples, p: Optional[float] = None) -> float:
    """Monte Carlo estimate of ``E|g(X_T)|^p``; raises when it is not finite."""
    p = claim.p if p is None else p
    vals = claim(samples)
    with np.errstate(over="ignore"):
        moment = float(np.mean(np.abs(vals) ** p))
    if not np.isfinite(moment):
        raise InvalidParametersError(f"claim {claim.name!r} has no finite {p}-th moment")
    return moment


# -- terminal claims -------------------------------------------------------

def call(strike: float, index: int = 0) -> TerminalClaim:
    return TerminalClaim(lambda x: np.maximum(x[:, index] - strike, 0.0), "call",
                         params={"strike": strike})


def put(strike: float, index: int = 0) -> TerminalClaim:
    return TerminalClaim(lambda x: np.maximum(strike - x[:, index], 0.0), "put",
                         params={"strike": strike})


def butterfly(low: float, mid: float, high: float, index: int = 0) -> TerminalClaim:
    if not low < mid < high:
        raise InvalidParametersError("butterfly strikes must be increasing")

    def g(x):
        s = x[:, index]
        return np.maximum(s - low, 0) - 2 * np.maximum(s - mid, 0) + np.maximum(s - high, 0)

    return TerminalClaim(g, "butterfly", params={"low": low, "mid": mid, "high": high})


def constant_claim(c: float) -> TerminalClaim:
    return TerminalClaim(lambda x: np.full(len(x), float(c)), "constant", params={"c": c})


def asset(index: int = 0) -> TerminalClaim:
    return TerminalClaim(lambda x: x[:, index].copy(), "asset")


def linear_claim(level: float = 0.0, slope: float = 1.0, index: int = 0) -> TerminalClaim:
    return TerminalClaim(lambda x: level + slope * x[:, index], "linear",
                         params={"level": level, "slope": slope})


GENERATORS = {
    "zero": zero_generator,
    "constant": constant_generator,
    "affine": affine_generator,
    "linear": linear_pricing_generator,
    "two_rate": two_rate_generator,
}

CLAIMS = {
    "call": call,
    "put": put,
    "butterfly": butterfly,
    "constant": constant_claim,
    "asset": asset,
    "linear": linear_claim,
}
