"""Time-discretized forward-backward solver and damped Picard iteration.

On the grid ``t_i = i T / M`` the backward (HJB) step is::

    u[i] = u[i+1] + dt * Hbar(x, mu[i+1], grad_x u[.])

with the gradient taken at ``t_{i+1}`` in ``"explicit"`` mode and at ``t_i``
in ``"implicit"`` mode (solved per step by fixed-point iteration), and the
forward (KFP) step is::

    mu[i+1] = mu[i] + dt * mu[i] @ Q(mu[i], grad u[i+1])

Every function accepts a leading batch axis: ``mu`` of shape ``(N, M+1, d)``
and ``kappa`` of shape ``(N, k)``. Single-solve arrays ``(M+1, d)`` work too.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import (
    ConvergenceError,
    MfgModel,
    SimplexError,
    TimeGrid,
    as_probs,
    gradient_matrix,
    project_to_simplex,
)

BACKWARD_MODES = ("explicit", "implicit")


@dataclass(frozen=True)
class PicardConfig:
    tol: float = 1e-9
    max_iter: int = 500
    damping: float | tuple[float, ...] = 0.0
    backward_mode: str = "explicit"
    inner_tol: float = 1e-13
    inner_max_iter: int = 100

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        schedule = np.atleast_1d(np.asarray(self.damping, dtype=np.float64))
        if schedule.size == 0 or np.any(schedule < 0) or np.any(schedule >= 1):
            raise ValueError("damping values must lie in [0, 1)")
        if not isinstance(self.damping, (int, float)):
            object.__setattr__(self, "damping", tuple(float(v) for v in schedule))
        if self.backward_mode not in BACKWARD_MODES:
            raise ValueError(f"backward_mode must be one of {BACKWARD_MODES}")
        if not self.inner_tol > 0 or self.inner_max_iter < 1:
            raise ValueError("bad inner fixed-point settings")

    def delta(self, k: int) -> float:
        """Damping at iteration ``k``; a list schedule repeats its last entry."""
        if isinstance(self.damping, tuple):
            return self.damping[min(k, len(self.damping) - 1)]
        return float(self.damping)

    def to_dict(self) -> dict:
        damping = list(self.damping) if isinstance(self.damping, tuple) else float(self.damping)
        return {
            "tol": self.tol,
            "max_iter": self.max_iter,
            "damping": damping,
            "backward_mode": self.backward_mode,
            "inner_tol": self.inner_tol,
            "inner_max_iter": self.inner_max_iter,
        }

    @classmethod
    def from_dict(cls, cfg: dict) -> "PicardConfig":
        cfg = dict(cfg)
        if isinstance(cfg.get("damping"), list):
            cfg["damping"] = tuple(cfg["damping"])
        return cls(**cfg)


@dataclass
class DiscretizedSolution:
    grid: TimeGrid
    u: np.ndarray
    mu: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return self.grid.times


@dataclass
class PicardResult:
    solution: DiscretizedSolution
    iterations: int
    converged: bool
    history: list[tuple[float, float]] = field(default_factory=list)

    @property
    def residual(self) -> float:
        """Last successive-iterate gap ``max(|du|, |dmu|)``."""
        return max(self.history[-1]) if self.history else float("inf")


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def _extended_rows(model: MfgModel, eta, u_row):
    return model.hamiltonian_rows(eta, gradient_matrix(u_row)) + model.mean_field_costs(eta)


def hjb_backward_sweep(
    model: MfgModel,
    kappa,
    mu,
    grid: TimeGrid,
    mode: str = "explicit",
    inner_tol: float = 1e-13,
    inner_max_iter: int = 100,
) -> np.ndarray:
    """Value function on the grid given a flow of measures ``mu``."""
    mu = np.asarray(mu, dtype=np.float64)
    kappa = np.asarray(kappa, dtype=np.float64)
    if mu.shape[-2] != grid.M + 1 or mu.shape[-1] != model.d:
        raise ValueError("mu must have shape (..., M+1, d)")
    if mode not in BACKWARD_MODES:
        raise ValueError(f"mode must be one of {BACKWARD_MODES}")
    dt = grid.dt
    u = np.empty_like(mu)
    u[..., -1, :] = model.terminal_costs(kappa, mu[..., -1, :])
    for i in range(grid.M - 1, -1, -1):
        nxt = u[..., i + 1, :]
        m = mu[..., i + 1, :]
        cur = nxt + dt * _extended_rows(model, m, nxt)
        if mode == "implicit":
            for _ in range(inner_max_iter):
                new = nxt + dt * _extended_rows(model, m, cur)
                gap = np.max(np.abs(new - cur))
                cur = new
                if gap < inner_tol:
                    break
            else:
                raise ConvergenceError(
                    f"implicit HJB step {i} did not converge (gap {gap:.3e})"
                )
        u[..., i, :] = cur
    return u


def _kfp_step(model: MfgModel, m, u_next, dt):
    Q = model.selector_rows(m, gradient_matrix(u_next))
    flux = np.einsum("...y,...yx->...x", m, Q)
    return project_to_simplex(m + dt * flux)


def kfp_forward_sweep(model: MfgModel, u, eta, grid: TimeGrid) -> np.ndarray:
    """Flow of measures on the grid driven by the rates of ``u``."""
    model.check_cfl(grid)
    u = np.asarray(u, dtype=np.float64)
    eta = project_to_simplex(eta)
    if u.shape[-2] != grid.M + 1 or u.shape[-1] != model.d:
        raise ValueError("u must have shape (..., M+1, d)")
    mu = np.empty(np.broadcast_shapes(u.shape, eta.shape[:-1] + (1, model.d)))
    mu[..., 0, :] = eta
    for i in range(grid.M):
        mu[..., i + 1, :] = _kfp_step(model, mu[..., i, :], u[..., i + 1, :], grid.dt)
    return mu


def kfp_reconstruct(
    model: MfgModel, u_eval: Callable[[int], np.ndarray], eta, grid: TimeGrid
) -> np.ndarray:
    """Forward sweep with the value function supplied by ``u_eval(j)`` per grid index."""
    model.check_cfl(grid)
    eta = as_probs(eta)
    mu = np.empty((grid.M + 1, model.d))
    mu[0] = eta
    for i in range(grid.M):
        u_next = np.asarray(u_eval(i + 1), dtype=np.float64)
        if u_next.shape != (model.d,):
            raise ValueError(f"u_eval({i + 1}) must return shape ({model.d},)")
        mu[i + 1] = _kfp_step(model, mu[i], u_next, grid.dt)
    return mu


# ---------------------------------------------------------------------------
# Picard iteration
# ---------------------------------------------------------------------------

def picard_solve_batch(
    model: MfgModel,
    etas,
    kappas,
    grid: TimeGrid,
    cfg: PicardConfig = PicardConfig(),
) -> list[PicardResult]:
    """Independent damped Picard solves for every row of ``etas``/``kappas``.

    Samples leave the active set as soon as both successive-iterate gaps drop
    below ``cfg.tol``, so each result matches a solo solve of that sample.
    """
    model.check_cfl(grid)
    etas = project_to_simplex(np.atleast_2d(etas))
    kappas = np.atleast_2d(np.asarray(kappas, dtype=np.float64))
    n = etas.shape[0]
    if kappas.shape != (n, model.k):
        raise ValueError(f"kappas must have shape ({n}, {model.k})")
    shape = (n, grid.M + 1, model.d)
    u = np.zeros(shape)
    mu = np.broadcast_to(etas[:, None, :], shape).copy()
    mu_tilde = mu.copy()
    iterations = np.zeros(n, dtype=int)
    converged = np.zeros(n, dtype=bool)
    history: list[list[tuple[float, float]]] = [[] for _ in range(n)]
    active = np.arange(n)

    for k in range(cfg.max_iter):
        if active.size == 0:
            break
        u_new = hjb_backward_sweep(
            model, kappas[active], mu_tilde[active], grid,
            cfg.backward_mode, cfg.inner_tol, cfg.inner_max_iter,
        )
        mu_new = kfp_forward_sweep(model, u_new, etas[active], grid)
        du = np.max(np.abs(u_new - u[active]), axis=(1, 2))
        dmu = np.max(np.abs(mu_new - mu[active]), axis=(1, 2))
        delta = cfg.delta(k)
        mu_tilde[active] = delta * mu_tilde[active] + (1.0 - delta) * mu_new
        u[active] = u_new
        mu[active] = mu_new
        iterations[active] = k + 1
        for a, gu, gm in zip(active, du, dmu):
            history[a].append((float(gu), float(gm)))
        done = (du < cfg.tol) & (dmu < cfg.tol)
        converged[active[done]] = True
        active = active[~done]

    return [
        PicardResult(DiscretizedSolution(grid, u[s], mu[s]), int(iterations[s]), bool(converged[s]), history[s])
        for s in range(n)
    ]


def picard_solve(
    model: MfgModel, eta, kappa, grid: TimeGrid, cfg: PicardConfig = PicardConfig()
) -> PicardResult:
    """Solve one MFG; a non-converged result is returned with ``converged=False``."""
    kappa = model.check_kappa(kappa)
    return picard_solve_batch(model, as_probs(eta)[None], kappa[None], grid, cfg)[0]


def discretization_residuals(
    model: MfgModel, kappa, sol: DiscretizedSolution, mode: str = "explicit"
) -> dict[str, float]:
    """Max-norm defects of ``(u, mu)`` in each discrete equation."""
    grid = sol.grid
    u, mu = sol.u, sol.mu
    kappa = np.asarray(kappa, dtype=np.float64)
    dt = grid.dt
    terminal = np.max(np.abs(u[-1] - model.terminal_costs(kappa, mu[-1])))
    hjb = kfp = 0.0
    for i in range(grid.M):
        grad_at = u[i + 1] if mode == "explicit" else u[i]
        hbar = _extended_rows(model, mu[i + 1], grad_at)
        hjb = max(hjb, float(np.max(np.abs(u[i + 1] - u[i] + dt * hbar))))
        Q = model.selector_rows(mu[i], gradient_matrix(u[i + 1]))
        kfp = max(kfp, float(np.max(np.abs(mu[i + 1] - mu[i] - dt * mu[i] @ Q))))
    return {"hjb": hjb, "kfp": kfp, "terminal": float(terminal), "initial": 0.0}


def mass_drift(mu) -> float:
    """Largest change in total mass across one forward step."""
    totals = np.asarray(mu).sum(axis=-1)
    return float(np.max(np.abs(np.diff(totals, axis=-1)))) if totals.shape[-1] > 1 else 0.0


# ---------------------------------------------------------------------------
# Stability
# ---------------------------------------------------------------------------

@dataclass
class StabilityRow:
    input_distance: float
    u_distance: float
    mu_distance: float

    @property
    def u_ratio(self) -> float:
        return self.u_distance / self.input_distance if self.input_distance else 0.0

    @property
    def mu_ratio(self) -> float:
        return self.mu_distance / self.input_distance if self.input_distance else 0.0


def stability_probe(
    model: MfgModel,
    pairs: Sequence[tuple[tuple, tuple]],
    grid: TimeGrid,
    cfg: PicardConfig = PicardConfig(),
) -> list[StabilityRow]:
    """Output distances for pairs ``((eta1, kappa1), (eta2, kappa2))``.

    Input distance is ``|eta1 - eta2|_1 + |kappa1 - kappa2|_1``; output
    distances are sup norms over the grid.
    """
    rows = []
    for (e1, k1), (e2, k2) in pairs:
        e1, e2 = as_probs(e1), as_probs(e2)
        k1, k2 = model.check_kappa(k1), model.check_kappa(k2)
        r1, r2 = picard_solve_batch(model, np.stack([e1, e2]), np.stack([k1, k2]), grid, cfg)
        for r in (r1, r2):
            if not r.converged:
                raise ConvergenceError(f"Picard did not converge ({r.iterations} iterations)")
        dist = float(np.abs(e1 - e2).sum() + np.abs(k1 - k2).sum())
        rows.append(
            StabilityRow(
                dist,
                float(np.max(np.abs(r1.solution.u - r2.solution.u))),
                float(np.max(np.abs(r1.solution.mu - r2.solution.mu))),
            )
        )
    return rows


__all__ = [
    "PicardConfig",
    "DiscretizedSolution",
    "PicardResult",
    "SimplexError",
    "hjb_backward_sweep",
    "kfp_forward_sweep",
    "kfp_reconstruct",
    "picard_solve",
    "picard_solve_batch",
    "discretization_residuals",
    "mass_drift",
    "stability_probe",
    "StabilityRow",
]
