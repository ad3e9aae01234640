"""The two benchmark games: a d-state quadratic game and a 4-state cybersecurity game.

Configuration files are JSON objects with a ``kind`` key. Quadratic::

    {"kind": "quadratic", "d": 3, "b": 4.0, "action_bounds": [1.0, 3.0],
     "T": 1.0, "kappa_box": [0.0, 1.0],
     "mean_field_weight": 1.0, "terminal_mean_field_weight": 1.0}

``kappa_box`` is the same interval for every coordinate of ``kappa``.
Running cost ``b * sum_{y != x} (a_y - 2)^2``, mean-field cost
``mean_field_weight * eta_x``, terminal cost
``kappa_x + terminal_mean_field_weight * eta_x``.

Cybersecurity (states DS, DI, US, UI stored as 0, 1, 2, 3)::

    {"kind": "cyber", "k_D": 0.3, "k_I": 0.5, "rho": 0.8, "T": 10.0,
     "kappa_max": 10.0, "rates": {...}}

``rates`` holds the uncontrolled intensities, see :class:`CyberRates`. The
defaults are baselines chosen for this package (defended machines are infected
more slowly than undefended ones), not published calibration values.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import MfgModel, as_probs

CYBER_LABELS = ("DS", "DI", "US", "UI")
DS, DI, US, UI = range(4)
# defended <-> undefended partner of each state
_PARTNER = np.array([US, UI, DS, DI])
_INFECTED = np.array([0.0, 1.0, 0.0, 1.0])


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


def _offdiag_mask(d: int) -> np.ndarray:
    return ~np.eye(d, dtype=bool)


# ---------------------------------------------------------------------------
# Quadratic model
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class QuadraticModel(MfgModel):
    d: int
    b: float = 4.0
    action_bounds: tuple[float, float] = (1.0, 3.0)
    T: float = 1.0
    kappa_box: tuple[float, float] = (0.0, 1.0)
    mean_field_weight: float = 1.0
    terminal_mean_field_weight: float = 1.0

    center = 2.0

    def __post_init__(self):
        lo, hi = (float(v) for v in self.action_bounds)
        klo, khi = (float(v) for v in self.kappa_box)
        object.__setattr__(self, "action_bounds", (lo, hi))
        object.__setattr__(self, "kappa_box", (klo, khi))
        if int(self.d) != self.d or self.d < 2:
            raise ConfigError("quadratic model needs integer d >= 2")
        if not self.b >= 0:
            raise ConfigError("b must be non-negative")
        if not 0 <= lo <= hi:
            raise ConfigError("action bounds must satisfy 0 <= low <= high")
        if not self.T > 0:
            raise ConfigError("T must be positive")
        if not klo <= khi:
            raise ConfigError("kappa box lower bound exceeds upper bound")

    @property
    def kappa_bounds(self):
        lo, hi = self.kappa_box
        return np.full(self.d, lo), np.full(self.d, hi)

    def optimal_rates(self, P: np.ndarray) -> np.ndarray:
        """Closed-form minimizer ``clip(2 - p / (2b), low, high)`` entrywise."""
        lo, hi = self.action_bounds
        if self.b == 0:
            return np.where(P > 0, lo, np.where(P < 0, hi, np.clip(self.center, lo, hi)))
        return np.clip(self.center - P / (2.0 * self.b), lo, hi)

    def hamiltonian_rows(self, eta, P):
        P = np.asarray(P, dtype=np.float64)
        a = self.optimal_rates(P)
        terms = self.b * (a - self.center) ** 2 + a * P
        return np.where(_offdiag_mask(self.d), terms, 0.0).sum(axis=-1)

    def selector_rows(self, eta, P):
        Q = np.where(_offdiag_mask(self.d), self.optimal_rates(np.asarray(P, dtype=np.float64)), 0.0)
        idx = np.arange(self.d)
        Q[..., idx, idx] = -Q.sum(axis=-1)
        return Q

    def mean_field_costs(self, eta):
        return self.mean_field_weight * np.asarray(eta, dtype=np.float64)

    def terminal_costs(self, kappa, eta):
        return np.asarray(kappa, dtype=np.float64) + self.terminal_mean_field_weight * np.asarray(
            eta, dtype=np.float64
        )

    def max_exit_rate(self):
        return (self.d - 1) * self.action_bounds[1]

    def running_cost(self, x: int, a) -> float:
        return quadratic_running_cost(self, x, a)

    def to_dict(self):
        return {
            "kind": "quadratic",
            "d": int(self.d),
            "b": float(self.b),
            "action_bounds": list(self.action_bounds),
            "T": float(self.T),
            "kappa_box": list(self.kappa_box),
            "mean_field_weight": float(self.mean_field_weight),
            "terminal_mean_field_weight": float(self.terminal_mean_field_weight),
        }


def quadratic_running_cost(model: QuadraticModel, x: int, a) -> float:
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (model.d,):
        raise ValueError(f"rate vector must have shape ({model.d},)")
    off = np.delete(a, x)
    lo, hi = model.action_bounds
    if np.any(off < lo) or np.any(off > hi):
        raise ValueError("inadmissible rate: off-diagonal entries must lie in the action set")
    return float(model.b * np.sum((off - model.center) ** 2))


def quadratic_selector(model: QuadraticModel, x: int, p) -> np.ndarray:
    return model.selector(x, np.full(model.d, 1.0 / model.d), p)


def quadratic_terminal(model: QuadraticModel, kappa, x: int, eta) -> float:
    return model.terminal_cost(kappa, x, eta)


# ---------------------------------------------------------------------------
# Cybersecurity model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CyberRates:
    """Uncontrolled transition intensities.

    Infection of a susceptible machine happens at
    ``hacker * attack_<status> + contagion_<from><to> * eta_<from>I`` summed
    over the infected classes ``from`` in {D, U}; ``to`` is the target's
    defense status. Infected machines recover at ``recovery_<status>``.
    """

    hacker: float = 0.6
    attack_defended: float = 0.3
    attack_undefended: float = 0.4
    contagion_DD: float = 0.3
    contagion_UD: float = 0.4
    contagion_DU: float = 0.4
    contagion_UU: float = 0.5
    recovery_defended: float = 0.5
    recovery_undefended: float = 0.4


@dataclass(frozen=True, eq=False)
class CyberModel(MfgModel):
    k_D: float = 0.3
    k_I: float = 0.5
    rho: float = 0.8
    T: float = 10.0
    kappa_max: float = 10.0
    rates: CyberRates = field(default_factory=CyberRates)

    d = 4
    labels = CYBER_LABELS

    def __post_init__(self):
        if isinstance(self.rates, dict):
            object.__setattr__(self, "rates", CyberRates(**self.rates))
        values = [self.k_D, self.k_I, self.rho, *asdict(self.rates).values()]
        if any(not v >= 0 for v in values):
            raise ConfigError("cyber costs and rates must be non-negative")
        if not self.kappa_max > 0:
            raise ConfigError("kappa_max must be positive")
        if not self.T > 0:
            raise ConfigError("T must be positive")

    @property
    def kappa_bounds(self):
        return np.zeros(1), np.full(1, float(self.kappa_max))

    def state_costs(self) -> np.ndarray:
        return np.array([self.k_D, self.k_D + self.k_I, 0.0, self.k_I])

    def base_rates(self, eta) -> np.ndarray:
        """Uncontrolled rate matrix (no switching), shape ``(..., 4, 4)``."""
        eta = np.asarray(eta, dtype=np.float64)
        r = self.rates
        Q = np.zeros(eta.shape[:-1] + (4, 4))
        Q[..., DS, DI] = (
            r.hacker * r.attack_defended + r.contagion_DD * eta[..., DI] + r.contagion_UD * eta[..., UI]
        )
        Q[..., US, UI] = (
            r.hacker * r.attack_undefended + r.contagion_DU * eta[..., DI] + r.contagion_UU * eta[..., UI]
        )
        Q[..., DI, DS] = r.recovery_defended
        Q[..., UI, US] = r.recovery_undefended
        return Q

    def rate_matrix(self, eta, switch) -> np.ndarray:
        """Full generator for per-state switch decisions ``switch[..., x]`` in {0, 1}."""
        Q = self.base_rates(eta)
        switch = np.asarray(switch, dtype=np.float64)
        idx = np.arange(4)
        Q[..., idx, _PARTNER] += self.rho * np.broadcast_to(switch, Q.shape[:-1])
        Q[..., idx, idx] = -Q.sum(axis=-1)
        return Q

    def switch_decisions(self, P) -> np.ndarray:
        # strict inequality: ties resolve to "do not switch"
        P = np.asarray(P, dtype=np.float64)
        return (self.rho * P[..., np.arange(4), _PARTNER] < 0).astype(np.float64)

    def hamiltonian_rows(self, eta, P):
        P = np.asarray(P, dtype=np.float64)
        B = self.base_rates(eta)
        drift = np.where(_offdiag_mask(4), B * P, 0.0).sum(axis=-1)
        switching = np.minimum(0.0, self.rho * P[..., np.arange(4), _PARTNER])
        return self.state_costs() + drift + switching

    def selector_rows(self, eta, P):
        return self.rate_matrix(eta, self.switch_decisions(P))

    def mean_field_costs(self, eta):
        return np.zeros_like(np.asarray(eta, dtype=np.float64))

    def terminal_costs(self, kappa, eta):
        kappa = np.asarray(kappa, dtype=np.float64)
        eta = np.asarray(eta, dtype=np.float64)
        return kappa[..., :1] * np.broadcast_to(_INFECTED, eta.shape)

    def max_exit_rate(self):
        r = self.rates
        return self.rho + max(
            r.hacker * r.attack_defended + max(r.contagion_DD, r.contagion_UD),
            r.hacker * r.attack_undefended + max(r.contagion_DU, r.contagion_UU),
            r.recovery_defended,
            r.recovery_undefended,
        )

    def running_cost(self, x: int, a=None) -> float:
        return cyber_running_cost(self, x)

    def to_dict(self):
        return {
            "kind": "cyber",
            "k_D": float(self.k_D),
            "k_I": float(self.k_I),
            "rho": float(self.rho),
            "T": float(self.T),
            "kappa_max": float(self.kappa_max),
            "rates": {k: float(v) for k, v in asdict(self.rates).items()},
        }


def _cyber_state(x) -> int:
    if isinstance(x, str):
        if x not in CYBER_LABELS:
            raise ValueError(f"unknown cyber state {x!r}")
        return CYBER_LABELS.index(x)
    if not 0 <= x < 4:
        raise ValueError(f"cyber state index {x} out of range")
    return int(x)


def cyber_running_cost(model: CyberModel, x) -> float:
    return float(model.state_costs()[_cyber_state(x)])


def cyber_terminal(model: CyberModel, kappa: float, x, eta) -> float:
    return model.terminal_cost(np.atleast_1d(kappa), _cyber_state(x), eta)


def cyber_rate_row(model: CyberModel, x, a: int, eta) -> np.ndarray:
    x = _cyber_state(x)
    if a not in (0, 1):
        raise ValueError("cyber action must be 0 or 1")
    switch = np.zeros(4)
    switch[x] = a
    return model.rate_matrix(as_probs(eta), switch)[x]


def cyber_hamiltonian(model: CyberModel, x, eta, p) -> tuple[float, int]:
    """Minimum over both actions and the minimizing action (ties give 0)."""
    x = _cyber_state(x)
    eta = as_probs(eta)
    p = np.asarray(p, dtype=np.float64)
    f = cyber_running_cost(model, x)
    values = []
    for a in (0, 1):
        row = cyber_rate_row(model, x, a, eta)
        values.append(f + float(np.delete(row * p, x).sum()))
    # the candidates differ by exactly rho * p[partner]; comparing that term
    # directly keeps sub-ulp gaps from turning into spurious ties
    a = 1 if model.rho * p[_PARTNER[x]] < 0 else 0
    return values[a], a


# ---------------------------------------------------------------------------
# Configuration files
# ---------------------------------------------------------------------------

def model_from_dict(cfg: dict) -> MfgModel:
    cfg = dict(cfg)
    kind = cfg.pop("kind", None)
    try:
        if kind == "quadratic":
            allowed = {f.name for f in fields(QuadraticModel)}
            _reject_unknown(cfg, allowed)
            for key in ("action_bounds", "kappa_box"):
                if key in cfg:
                    cfg[key] = tuple(cfg[key])
            return QuadraticModel(**cfg)
        if kind == "cyber":
            allowed = {f.name for f in fields(CyberModel)}
            _reject_unknown(cfg, allowed)
            if "rates" in cfg:
                _reject_unknown(cfg["rates"], {f.name for f in fields(CyberRates)})
                cfg["rates"] = CyberRates(**cfg["rates"])
            return CyberModel(**cfg)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    raise ConfigError(f"unknown model kind {kind!r}")


def _reject_unknown(cfg: dict, allowed: set) -> None:
    extra = set(cfg) - allowed
    if extra:
        raise ConfigError(f"unknown model keys: {sorted(extra)}")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def model_digest(model: MfgModel) -> str:
    return hashlib.sha256(canonical_json(model.to_dict()).encode()).hexdigest()


def dumps_model(model: MfgModel) -> str:
    return json.dumps(model.to_dict(), indent=2, sort_keys=True) + "\n"


def loads_model(text: str) -> MfgModel:
    try:
        return model_from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid model config: {exc}") from None


def save_model_config(path, model: MfgModel) -> None:
    Path(path).write_text(dumps_model(model))


def load_model_config(path) -> MfgModel:
    return loads_model(Path(path).read_text())
