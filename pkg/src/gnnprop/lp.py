"""Feasibility of systems of linear inequalities with strict rows."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linprog

EPS_STRICT = 1e-9
FEAS_TOL = 1e-7
SLACK_CAP = 1.0


class LPIndeterminate(RuntimeError):
    """The solver could not decide the system."""


@dataclass(frozen=True, eq=False)
class Constraints:
    """Rows C x <= d; rows flagged strict mean C x < d."""

    C: np.ndarray
    d: np.ndarray
    strict: np.ndarray

    @staticmethod
    def empty(n: int) -> "Constraints":
        return Constraints(np.zeros((0, n)), np.zeros(0), np.zeros(0, dtype=bool))

    @staticmethod
    def of(rows: Sequence[tuple[np.ndarray, float, bool]], n: int) -> "Constraints":
        if not rows:
            return Constraints.empty(n)
        C = np.array([np.asarray(r[0], dtype=float) for r in rows]).reshape(len(rows), n)
        return Constraints(C, np.array([float(r[1]) for r in rows]), np.array([bool(r[2]) for r in rows]))

    @property
    def dim(self) -> int:
        return self.C.shape[1]

    def __len__(self) -> int:
        return len(self.d)

    def __add__(self, other: "Constraints") -> "Constraints":
        return Constraints(
            np.vstack([self.C, other.C]), np.concatenate([self.d, other.d]), np.concatenate([self.strict, other.strict])
        )

    def subset(self, idx) -> "Constraints":
        idx = np.asarray(idx, dtype=int)
        return Constraints(self.C[idx], self.d[idx], self.strict[idx])

    def without(self, k: int) -> "Constraints":
        keep = np.ones(len(self), dtype=bool)
        keep[k] = False
        return Constraints(self.C[keep], self.d[keep], self.strict[keep])

    def negated_row(self, k: int) -> "Constraints":
        """The complement of row k (a single row)."""
        return Constraints(-self.C[k:k + 1], -self.d[k:k + 1], ~self.strict[k:k + 1])

    def satisfied(self, X: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        """Per-row satisfaction for points X (rows); strict rows need slack > tol."""
        X = np.atleast_2d(X)
        s = self.d[None, :] - X @ self.C.T
        return np.where(self.strict[None, :], s > tol, s >= -tol)

    def holds(self, X: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        return self.satisfied(X, tol).all(axis=1)


@dataclass(frozen=True)
class LPResult:
    feasible: bool
    witness: Optional[np.ndarray] = None


class LPStats:
    calls = 0


def lp_feasible(cons: Constraints) -> LPResult:
    """Decide {C x <= d, strict rows tightened by EPS_STRICT}.

    Rows are scaled to unit infinity norm.  Strict rows receive a shared slack
    t in [0, 1] that is maximised; the strict system is feasible iff t > EPS_STRICT.
    """
    LPStats.calls += 1
    n = cons.dim
    C, d, strict = cons.C, cons.d, cons.strict
    if len(d) == 0:
        return LPResult(True, np.zeros(n))
    if not (np.isfinite(C).all() and np.isfinite(d).all()):
        raise LPIndeterminate("non-finite coefficients")
    scale = np.abs(C).max(axis=1)
    zero = scale == 0
    if zero.any():
        dz, sz = d[zero], strict[zero]
        if np.any(np.where(sz, dz <= 0, dz < 0)):
            return LPResult(False)
        C, d, strict, scale = C[~zero], d[~zero], strict[~zero], scale[~zero]
        if len(d) == 0:
            return LPResult(True, np.zeros(n))
    Cs = C / scale[:, None]
    ds = d / scale
    has_strict = bool(strict.any())
    if has_strict:
        A = np.hstack([Cs, strict[:, None].astype(float)])
        cost = np.zeros(n + 1)
        cost[-1] = -1.0
        bounds = [(None, None)] * n + [(0.0, SLACK_CAP)]
    else:
        A, cost, bounds = Cs, np.zeros(n), [(None, None)] * n
    res = linprog(cost, A_ub=A, b_ub=ds, bounds=bounds, method="highs")
    if res.status == 2:
        return LPResult(False)
    if res.status != 0 or res.x is None:
        raise LPIndeterminate(f"solver status {res.status}: {res.message}")
    x = np.asarray(res.x[:n], dtype=float)
    if has_strict and res.x[-1] <= EPS_STRICT:
        return LPResult(False)
    # witness check on the scaled system
    slack = ds - Cs @ x
    if np.any(slack < -FEAS_TOL):
        raise LPIndeterminate("solver witness violates the system")
    return LPResult(True, x)
