"""Recombining one-dimensional lattice on a shared spatial grid.

Under control ``u`` a node ``x_j`` at step ``k`` has the two Euler children
``x_j + mu dt +- sigma sqrt(dt)`` with probability 1/2 each. Nodes are evenly
spaced in the grid coordinate (log for positive states), and children are
mapped back by interpolation that is linear in the state itself and extended
linearly past the grid ends. Linearity in the state keeps interpolants of
convex node data convex, which makes the volatility ordering of convex claims
exact; the linear extension keeps it exact at the boundary too, where
clamping would bend linear data. Weights are non-negative except for
children that leave the grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParametersError
from .market_paths import ControlPolicy, DiffusionFamily, TimeGrid
from .validation import check_positive_int


@dataclass(frozen=True)
class Transition:
    lo_up: np.ndarray
    w_up: np.ndarray
    lo_dn: np.ndarray
    w_dn: np.ndarray
    sigma: np.ndarray
    drift: np.ndarray


class Lattice:
    """Shared grid of ``nodes`` states spanning ``n_std`` deviations around ``x0``."""

    def __init__(self, family: DiffusionFamily, grid: TimeGrid, x0: float, nodes: int = 3201,
                 n_std: float = 8.0, coordinate: str | None = None):
        if family.dim != 1:
            raise InvalidParametersError("lattice mode supports one-dimensional families only")
        nodes = check_positive_int(nodes, "nodes")
        if nodes < 3:
            raise InvalidParametersError("a lattice needs at least three nodes")
        if nodes % 2 == 0:
            nodes += 1
        self.family = family
        self.grid = grid
        self.x0 = float(np.ravel(x0)[0])
        self.n_std = float(n_std)
        if coordinate is None:
            coordinate = "log" if family.state_domain == "positive" else "linear"
        if coordinate == "log" and self.x0 <= 0:
            raise InvalidParametersError("log coordinate needs a positive initial state")
        self.coordinate = coordinate

        x0_arr = np.array([[self.x0]])
        spread = 0.0
        for u in range(len(family.control_set)):
            _, sig = family.coefficients(0.0, x0_arr, u)
            spread = max(spread, abs(float(sig[0, 0, 0])))
        if coordinate == "log":
            spread /= self.x0
        if spread == 0.0:
            spread = 1.0 if coordinate == "linear" else 0.1
        half_width = self.n_std * spread * np.sqrt(grid.horizon)
        self.center = (nodes - 1) // 2
        self.h = 2.0 * half_width / (nodes - 1)
        c0 = np.log(self.x0) if coordinate == "log" else self.x0
        self.s = c0 + self.h * (np.arange(nodes) - self.center)
        self.s[self.center] = c0
        x = np.exp(self.s) if coordinate == "log" else self.s.copy()
        x[self.center] = self.x0
        self.x = x[:, None]
        self.x.setflags(write=False)
        self._cache = {}

    @property
    def size(self) -> int:
        return len(self.s)

    def truncate(self, k: int) -> "Lattice":
        """Same nodes on the grid ``[0, t_k]``."""
        other = object.__new__(Lattice)
        other.__dict__.update(self.__dict__)
        other.grid = self.grid.truncate(k)
        other._cache = {key: v for key, v in self._cache.items() if key[0] < k or key[0] == -1}
        return other

    def to_coordinate(self, x):
        x = np.asarray(x, dtype=float)
        if self.coordinate == "log":
            return np.log(np.maximum(x, np.exp(self.s[0])))
        return x

    def _locate(self, x, extend: bool = True):
        xs = self.x[:, 0]
        # nodes are uniform in the coordinate, so the bracketing index is a floor
        pos = (self.to_coordinate(np.clip(x, xs[0], xs[-1])) - self.s[0]) / self.h
        lo = np.clip(np.floor(pos).astype(int), 0, self.size - 2)
        # outside the grid the end segment is extended linearly
        w = (x - xs[lo]) / (xs[lo + 1] - xs[lo])
        if not extend:
            w = np.clip(w, 0.0, 1.0)
        return lo, w

    def nearest(self, x) -> np.ndarray:
        """Index of the nearest node (in the grid coordinate)."""
        pos = (self.to_coordinate(np.ravel(np.asarray(x, dtype=float))) - self.s[0]) / self.h
        return np.clip(np.rint(pos).astype(int), 0, self.size - 1)

    def interpolate(self, values, x, extend: bool = True):
        """Piecewise-linear interpolation at states ``x``; past the ends the end
        segment is extended (``extend``) or the end value is held."""
        lo, w = self._locate(np.ravel(np.asarray(x, dtype=float)), extend)
        values = np.asarray(values)
        return values[lo] + w * (values[lo + 1] - values[lo])

    def transition(self, k: int, u: int) -> Transition:
        key = (-1 if self.family.time_homogeneous else k, u)
        tr = self._cache.get(key)
        if tr is None:
            dt = self.grid.dt
            mu, sig = self.family.coefficients(self.grid.time(k), self.x, u)
            mu, sig = mu[:, 0], np.abs(sig[:, 0, 0])
            up = self.x[:, 0] + mu * dt + sig * np.sqrt(dt)
            dn = self.x[:, 0] + mu * dt - sig * np.sqrt(dt)
            lo_up, w_up = self._locate(up)
            lo_dn, w_dn = self._locate(dn)
            tr = Transition(lo_up, w_up, lo_dn, w_dn, sig, mu)
            self._cache[key] = tr
        return tr

    def children_values(self, k: int, u: int, values):
        tr = self.transition(k, u)
        v_up = values[tr.lo_up] + tr.w_up * (values[tr.lo_up + 1] - values[tr.lo_up])
        v_dn = values[tr.lo_dn] + tr.w_dn * (values[tr.lo_dn + 1] - values[tr.lo_dn])
        return v_up, v_dn

    def moments(self, k: int, u: int, values):
        """Conditional mean, ``E[V dX^c] / dt``, ``a`` and ``b`` at every node."""
        tr = self.transition(k, u)
        v_up, v_dn = self.children_values(k, u, values)
        sqdt = np.sqrt(self.grid.dt)
        mean = 0.5 * (v_up + v_dn)
        cov = 0.5 * (v_up - v_dn) * tr.sigma / sqdt
        return mean, cov, tr.sigma ** 2, tr.drift

    def expectation(self, k: int, u: int, values):
        v_up, v_dn = self.children_values(k, u, values)
        return 0.5 * (v_up + v_dn)

    def policy_controls(self, policy: ControlPolicy, k: int) -> np.ndarray:
        return policy.lookup(k, self.x)

    def expect_under(self, policy: ControlPolicy, terminal, k_end: int | None = None,
                     running=None):
        """Linear expectation at every node at time 0 under ``policy``.

        ``terminal`` are grid values at step ``k_end`` (default ``N``);
        ``running(k)`` optionally adds grid values collected at each step ``k``.
        """
        k_end = self.grid.steps if k_end is None else k_end
        v = np.asarray(terminal, dtype=float).copy()
        for k in reversed(range(k_end)):
            ctrl = self.policy_controls(policy, k)
            new = np.empty_like(v)
            for u in np.unique(ctrl):
                rows = ctrl == u
                new[rows] = self.expectation(k, u, v)[rows]
            v = new
            if running is not None:
                v = v + running(k)
        return v

    def node_bucket_policy(self, table, name="table") -> ControlPolicy:
        """Feedback policy reading ``table[k, nearest node]``."""
        table = np.array(table, dtype=int)
        table.setflags(write=False)

        def rule(k, x):
            return table[k, self.nearest(x)]

        rule.table = table
        return ControlPolicy.feedback(rule, name=name)

    def bucket_edges(self, count: int) -> np.ndarray:
        """Edges of ``count`` equal-width buckets spanning the grid."""
        s_edges = np.linspace(self.s[0], self.s[-1], count + 1)[1:-1]
        return np.exp(s_edges) if self.coordinate == "log" else s_edges
