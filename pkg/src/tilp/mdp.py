"""State assembly, reward, constraint violation and discounted returns.

Everything here is a pure function and broadcasts over leading batch axes, so
the planner can score a whole population of candidate actions at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import SimConfig, SystemAction
from .netphys import PayloadGeometry


@dataclass(frozen=True, eq=False)
class StateVector:
    """Network, training and task observations.

    ``gain`` is the large-scale gain; the other per-terminal fields may carry
    leading batch axes inside imagined rollouts.
    """

    gain: np.ndarray
    fading_power: np.ndarray
    prev_bandwidth: np.ndarray
    loss: np.ndarray
    grad_norms: np.ndarray
    gamma_hat: np.ndarray

    @property
    def n_terminals(self) -> int:
        return np.shape(self.gain)[-1]

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return np.shape(self.loss)

    def features(self, cfg: SimConfig) -> np.ndarray:
        """Flat, roughly unit-scale encoding for the actor and critic."""
        shape = self.batch_shape
        n = self.n_terminals

        def per(a):
            return np.broadcast_to(np.asarray(a, dtype=float), shape + (n,))

        def one(a):
            return np.broadcast_to(np.asarray(a, dtype=float), shape)[..., None]

        return np.concatenate([
            per((np.log10(self.gain) + 9.0) / 3.0),
            per(self.fading_power),
            per(np.asarray(self.prev_bandwidth) / (cfg.bandwidth_budget_hz / n)),
            per(self.grad_norms),
            one(self.loss),
            one(self.gamma_hat),
        ], axis=-1)


def state_dim(n_terminals: int) -> int:
    return 4 * n_terminals + 2


def assemble_state(gain, fading_power, prev_bandwidth, loss, grad_norms, gamma_hat) -> StateVector:
    """Bundle the previous round's telemetry; round one passes zero bandwidths."""
    g = np.asarray(gain, dtype=float)
    n = g.shape[-1]
    arr = lambda a: np.broadcast_to(np.asarray(a, dtype=float), (n,)).copy()
    gh = float(gamma_hat)
    if not 0.0 <= gh <= 1.0:
        raise ValueError(f"gamma estimate {gh} outside [0, 1]")
    return StateVector(g.copy(), arr(fading_power), arr(prev_bandwidth), np.asarray(float(loss)),
                       arr(grad_norms), np.asarray(gh))


@dataclass(frozen=True)
class RewardWeights:
    w_delta: float
    w_e: float
    w_pen: float
    e_max: float

    @classmethod
    def from_config(cls, cfg: SimConfig) -> "RewardWeights":
        wd, we, wp = cfg.reward_weights
        return cls(float(wd), float(we), float(wp), cfg.energy_max_j)


@dataclass(frozen=True, eq=False)
class RewardBreakdown:
    r_task: np.ndarray | float
    r_comm: np.ndarray | float
    r_pen: np.ndarray | float
    r_total: np.ndarray | float
    violation: np.ndarray | float


def _scalar(a):
    return float(a) if np.ndim(a) == 0 else a


def violation(action: SystemAction | tuple, cp, tx, geom: PayloadGeometry, cfg: SimConfig):
    """Hinge sum of deadline, memory and bandwidth-budget overshoots (raw units)."""
    b, _, split, _, x = action.arrays() if isinstance(action, SystemAction) else action
    x = np.asarray(x, dtype=bool)
    if not np.all(x.any(axis=-1)):
        raise ValueError("violation needs a non-empty scheduled set")
    late = np.where(x, np.maximum(0.0, np.asarray(cp) + 2.0 * np.asarray(tx) - cfg.deadline_s), 0.0)
    mem = np.where(x, np.maximum(0.0, geom.mem(split) - cfg.memory_budgets()), 0.0)
    bw = np.maximum(0.0, np.sum(np.where(x, b, 0.0), axis=-1) - cfg.bandwidth_budget_hz)
    return _scalar(late.sum(axis=-1) + mem.sum(axis=-1) + bw)


def reward(dgamma, latency, energies, viol, w: RewardWeights, cfg: SimConfig) -> RewardBreakdown:
    """Task gain plus communication efficiency minus the violation penalty.

    ``energies`` are per-terminal with unscheduled entries zero. An infinite
    latency yields a ``-inf`` total.
    """
    lat = np.asarray(latency, dtype=float)
    e_sum = np.sum(np.asarray(energies, dtype=float), axis=-1)
    r_task = np.asarray(dgamma, dtype=float)
    with np.errstate(invalid="ignore"):
        r_comm = w.w_delta * (1.0 - lat / cfg.deadline_s) + w.w_e * (1.0 - e_sum / w.e_max)
        r_comm = np.where(np.isinf(lat), -np.inf, r_comm)
        r_pen = w.w_pen * np.asarray(viol, dtype=float)
        total = np.where(np.isfinite(r_comm) & np.isfinite(r_pen), r_task + r_comm - r_pen, -np.inf)
    return RewardBreakdown(*(_scalar(a) for a in (r_task, r_comm, r_pen, total, np.asarray(viol, dtype=float))))


def discounted_return(rewards, gamma: float) -> float:
    r = np.asarray(list(rewards), dtype=float)
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    if r.size == 0:
        return 0.0
    return float(np.dot(gamma ** np.arange(r.size), r))


def lipschitz_bound(w: RewardWeights, cfg: SimConfig) -> float:
    """Constant tying reward error to the calibration discrepancy."""
    return max(w.w_delta / cfg.deadline_s, w.w_e / w.e_max, 1.0, w.w_pen)
