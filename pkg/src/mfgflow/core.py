"""Domain types and model-agnostic operations for finite-state mean-field games.

States are numbered ``1..d`` in the mathematical notation but stored 0-based:
state ``x`` in the docs is index ``x - 1`` in every array and every ``x``
argument of this package.

Gradient matrices
-----------------
Vectorized model methods take ``P`` of shape ``(..., d, d)`` where row ``x`` is
the discrete gradient of ``u`` seen from state ``x``::

    P[..., x, y] = u[..., y] - u[..., x]

Rate matrices returned by selectors use the same layout: ``Q[..., x, y]`` is the
jump rate from ``x`` to ``y`` and ``Q[..., x, x] = -sum_{y != x} Q[..., x, y]``.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

SIMPLEX_TOL = 1e-12
SIMPLEX_REPAIR_TOL = 1e-9


class MfgError(Exception):
    """Base class for errors raised by this package."""


class SimplexError(MfgError, ValueError):
    """A vector is too far from the probability simplex to be repaired."""


class CFLError(MfgError, ValueError):
    """Time step too large for forward Euler to stay on the simplex."""


class ConvergenceError(MfgError, RuntimeError):
    """An iterative solve did not reach its tolerance."""


# ---------------------------------------------------------------------------
# Simplex handling
# ---------------------------------------------------------------------------

def project_to_simplex(probs, repair_tol: float = SIMPLEX_REPAIR_TOL) -> np.ndarray:
    """Validate rows of ``probs`` against the simplex, repairing small drift.

    Rows already within ``SIMPLEX_TOL`` are returned bit-for-bit. Rows within
    ``repair_tol`` have negatives clipped to zero and are divided by their sum.
    Anything further away raises :class:`SimplexError`.
    """
    p = np.array(probs, dtype=np.float64)
    if p.ndim == 0 or p.shape[-1] < 1:
        raise SimplexError("expected at least one state")
    if not np.all(np.isfinite(p)):
        raise SimplexError("non-finite probabilities")
    total = p.sum(axis=-1)
    lowest = p.min(axis=-1)
    off = np.abs(total - 1.0)
    bad = (lowest < -repair_tol) | (off > repair_tol)
    if np.any(bad):
        raise SimplexError(
            f"not a distribution: min entry {np.min(lowest):.3e}, "
            f"max |sum - 1| {np.max(off):.3e}"
        )
    needs_fix = (lowest < 0.0) | (off > SIMPLEX_TOL)
    if np.any(needs_fix):
        fixed = np.clip(p[needs_fix], 0.0, None)
        fixed /= fixed.sum(axis=-1, keepdims=True)
        p[needs_fix] = fixed
    return p


@dataclass(frozen=True)
class SimplexDist:
    """A probability vector over ``d`` states."""

    probs: np.ndarray

    def __post_init__(self):
        p = project_to_simplex(self.probs)
        if p.ndim != 1:
            raise SimplexError("SimplexDist holds a single distribution")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def d(self) -> int:
        return self.probs.shape[0]

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.probs, dtype=dtype)

    @classmethod
    def uniform(cls, d: int) -> "SimplexDist":
        return cls(np.full(d, 1.0 / d))

    @classmethod
    def point(cls, d: int, x: int) -> "SimplexDist":
        p = np.zeros(d)
        p[x] = 1.0
        return cls(p)


def as_probs(eta) -> np.ndarray:
    """Return the probability array of a SimplexDist or array-like, validated."""
    if isinstance(eta, SimplexDist):
        return eta.probs
    return project_to_simplex(eta)


@dataclass(frozen=True)
class StateSpace:
    d: int
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("a state space needs d >= 2")
        if self.labels is not None:
            labels = tuple(self.labels)
            if len(labels) != self.d or len(set(labels)) != self.d:
                raise ValueError("labels must be distinct and number d")
            object.__setattr__(self, "labels", labels)

    def index(self, label: str) -> int:
        if self.labels is None:
            raise ValueError("state space has no labels")
        try:
            return self.labels.index(label)
        except ValueError:
            raise ValueError(f"unknown state label {label!r}") from None


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_j = j T / M`` for ``j = 0..M``; the last point is exactly ``T``."""

    T: float
    M: int

    def __post_init__(self):
        if not np.isfinite(self.T) or self.T < 0:
            raise ValueError("horizon T must be finite and non-negative")
        if int(self.M) != self.M or self.M < 0:
            raise ValueError("M must be a non-negative integer")
        if self.M == 0 and self.T != 0:
            raise ValueError("M = 0 only describes the degenerate T = 0 grid")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "M", int(self.M))

    @property
    def dt(self) -> float:
        return self.T / self.M if self.M else 0.0

    @property
    def times(self) -> np.ndarray:
        if not self.M:
            return np.zeros(1)
        t = np.arange(self.M + 1) * self.T / self.M
        t[-1] = self.T
        return t

    def time(self, j: int) -> float:
        if not 0 <= j <= self.M:
            raise IndexError(f"grid index {j} outside 0..{self.M}")
        return float(self.times[j])


# ---------------------------------------------------------------------------
# Model contract
# ---------------------------------------------------------------------------

def gradient_matrix(u: np.ndarray) -> np.ndarray:
    """All discrete gradients at once: ``P[..., x, y] = u[..., y] - u[..., x]``."""
    u = np.asarray(u, dtype=np.float64)
    return u[..., None, :] - u[..., :, None]


class MfgModel(ABC):
    """A finite-state MFG with a parametrized terminal cost.

    Concrete models provide ``d``, ``T`` and ``kappa_bounds`` and implement
    the vectorized methods; the scalar helpers (:meth:`hamiltonian`,
    :meth:`selector`, ...) wrap them for single states. ``H`` here is the
    Hamiltonian *without* the mean-field cost ``F``; the extended Hamiltonian
    is ``H + F``.
    """

    d: int
    T: float

    @property
    @abstractmethod
    def kappa_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Lower and upper corners of the parameter box ``K``."""

    @property
    def kappa_low(self) -> np.ndarray:
        return self.kappa_bounds[0]

    @property
    def kappa_high(self) -> np.ndarray:
        return self.kappa_bounds[1]

    @property
    def k(self) -> int:
        return int(self.kappa_low.shape[0])

    @property
    def state_space(self) -> StateSpace:
        return StateSpace(self.d)

    # -- vectorized contract ------------------------------------------------

    @abstractmethod
    def hamiltonian_rows(self, eta: np.ndarray, P: np.ndarray) -> np.ndarray:
        """``H(x, eta, P[x])`` for every state: shapes ``(..., d), (..., d, d) -> (..., d)``."""

    @abstractmethod
    def selector_rows(self, eta: np.ndarray, P: np.ndarray) -> np.ndarray:
        """Optimal rate matrix, ``(..., d), (..., d, d) -> (..., d, d)``."""

    @abstractmethod
    def mean_field_costs(self, eta: np.ndarray) -> np.ndarray:
        """``F(x, eta)`` for every state, ``(..., d) -> (..., d)``."""

    @abstractmethod
    def terminal_costs(self, kappa: np.ndarray, eta: np.ndarray) -> np.ndarray:
        """``g_kappa(x, eta)`` for every state, ``(..., k), (..., d) -> (..., d)``."""

    @abstractmethod
    def max_exit_rate(self) -> float:
        """Upper bound on ``-Q[x, x]`` over all states, distributions and gradients."""

    @abstractmethod
    def to_dict(self) -> dict:
        """Plain-data configuration; see :mod:`mfgflow.models`."""

    # -- scalar helpers -----------------------------------------------------

    def hamiltonian(self, x: int, eta, p) -> float:
        P = self._embed_row(x, p)
        return float(self.hamiltonian_rows(as_probs(eta), P)[x])

    def selector(self, x: int, eta, p) -> np.ndarray:
        P = self._embed_row(x, p)
        return self.selector_rows(as_probs(eta), P)[x].copy()

    def mean_field_cost(self, x: int, eta) -> float:
        self._check_state(x)
        return float(self.mean_field_costs(as_probs(eta))[x])

    def terminal_cost(self, kappa, x: int, eta) -> float:
        self._check_state(x)
        kappa = self.check_kappa(kappa)
        return float(self.terminal_costs(kappa, as_probs(eta))[x])

    def check_kappa(self, kappa) -> np.ndarray:
        kappa = np.atleast_1d(np.asarray(kappa, dtype=np.float64))
        if kappa.shape[-1] != self.k:
            raise ValueError(f"kappa must have {self.k} entries")
        if np.any(kappa < self.kappa_low) or np.any(kappa > self.kappa_high):
            raise ValueError("kappa outside the parameter box")
        return kappa

    def cfl_number(self, grid: TimeGrid) -> float:
        return grid.dt * self.max_exit_rate()

    def check_cfl(self, grid: TimeGrid) -> None:
        c = self.cfl_number(grid)
        if c > 1.0:
            raise CFLError(
                f"dt * max exit rate = {c:.4g} > 1 (dt={grid.dt:.4g}); increase M"
            )

    def _check_state(self, x: int) -> None:
        if not 0 <= x < self.d:
            raise IndexError(f"state {x} out of range for d={self.d}")

    def _embed_row(self, x: int, p) -> np.ndarray:
        self._check_state(x)
        p = np.asarray(p, dtype=np.float64)
        if p.shape != (self.d,):
            raise ValueError(f"p must have shape ({self.d},)")
        if not np.all(np.isfinite(p)):
            raise ValueError("p must be finite")
        P = np.zeros((self.d, self.d))
        P[x] = p
        P[x, x] = 0.0
        return P


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def discrete_gradient(u_row, x: int) -> np.ndarray:
    """``(u[y] - u[x])_y`` for a 0-based state ``x``."""
    u = np.asarray(u_row, dtype=np.float64)
    if not 0 <= x < u.shape[-1]:
        raise IndexError(f"state {x} out of range for d={u.shape[-1]}")
    return u - u[x]


def extended_hamiltonian(model: MfgModel, x: int, eta, p) -> float:
    """``H(x, eta, p) + F(x, eta)``."""
    p = np.asarray(p, dtype=np.float64)
    eta = as_probs(eta)
    if not np.all(np.isfinite(p)):
        raise ValueError("p must be finite")
    return model.hamiltonian(x, eta, p) + model.mean_field_cost(x, eta)


@dataclass
class LasryLionsReport:
    sums: np.ndarray
    violations: np.ndarray
    tol: float

    @property
    def ok(self) -> bool:
        return self.violations.size == 0

    @property
    def min_sum(self) -> float:
        return float(self.sums.min()) if self.sums.size else 0.0


def check_lasry_lions(cost, pairs, tol: float = 1e-10) -> LasryLionsReport:
    """Monotonicity sums ``sum_x (cost(x, a) - cost(x, b)) (a_x - b_x)`` per pair.

    ``cost`` is called as ``cost(x, eta)`` with a 0-based state. A pair is
    flagged when its sum falls below ``-tol``.
    """
    sums = []
    for eta, eta_hat in pairs:
        a, b = as_probs(eta), as_probs(eta_hat)
        s = sum((cost(x, a) - cost(x, b)) * (a[x] - b[x]) for x in range(a.shape[0]))
        sums.append(s)
    sums = np.asarray(sums, dtype=np.float64)
    return LasryLionsReport(sums, np.flatnonzero(sums < -tol), tol)


def selector_gradient_consistency(model: MfgModel, x: int, eta, p, h: float = 1e-5) -> float:
    """Largest gap between the selector and a central difference of ``H`` in ``p``.

    Only off-diagonal coordinates are compared; the result is meaningful when
    ``p`` sits at least ``h`` away from kinks of ``H``.
    """
    eta = as_probs(eta)
    p = np.asarray(p, dtype=np.float64)
    rates = model.selector(x, eta, p)
    worst = 0.0
    for y in range(model.d):
        if y == x:
            continue
        step = np.zeros(model.d)
        step[y] = h
        fd = (model.hamiltonian(x, eta, p + step) - model.hamiltonian(x, eta, p - step)) / (2 * h)
        worst = max(worst, abs(rates[y] - fd))
    return worst
