"""Three calibrated sub-twins and the discrepancy measure between twin and reality.

The network twin reuses the physical formulas with per-terminal multiplicative
corrections. The training twin is a ridge regressor for the one-round loss
decrease. The task twin anchors on the last measured success rate and maps
predicted loss decrease to success gain through a calibrated sensitivity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .core import SimConfig, SystemAction
from .mdp import RewardWeights, StateVector, reward, violation
from .netphys import PayloadGeometry, TerminalArrays, round_physics

log = logging.getLogger(__name__)

CAL_RATE = 0.3
CORR_BOUNDS = (0.1, 10.0)
RIDGE = 1e-3
TASK_DAMPING = 0.5
TASK_EPS = 1e-6
GRAD_DECAY = 0.98
N_FEATURES = 6


@dataclass(frozen=True, eq=False)
class NetTwinParams:
    rate_corr: np.ndarray
    energy_corr: np.ndarray
    fading_power_est: np.ndarray

    @classmethod
    def initial(cls, n: int, fading_power=None) -> "NetTwinParams":
        fp = np.ones(n) if fading_power is None else np.asarray(fading_power, dtype=float).copy()
        return cls(np.ones(n), np.ones(n), fp)


@dataclass(frozen=True, eq=False)
class TrainTwinParams:
    weights: np.ndarray
    window: tuple = ()
    capacity: int = 25

    @classmethod
    def initial(cls, capacity: int, retention_prior: float = 0.01) -> "TrainTwinParams":
        w = np.zeros(N_FEATURES)
        w[1] = retention_prior
        return cls(w, (), capacity)

    def with_sample(self, features, dloss) -> "TrainTwinParams":
        win = (self.window + ((np.asarray(features, dtype=float), float(dloss)),))[-self.capacity:]
        return replace(self, window=win)


@dataclass(frozen=True)
class TaskTwinParams:
    gamma_cached: float
    sensitivity: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.gamma_cached <= 1.0:
            raise ValueError("gamma_cached must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class TwinSnapshot:
    """Everything one planning call reads; never mutated.

    ``loss_reward_scale`` switches the task reward to the normalized loss
    decrease (the loss-driven ablation) when set.
    """

    net: NetTwinParams
    train: TrainTwinParams
    task: TaskTwinParams
    terms: TerminalArrays
    geom: PayloadGeometry
    cfg: SimConfig
    loss_reward_scale: float | None = None
    weights: RewardWeights = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.weights is None:
            object.__setattr__(self, "weights", RewardWeights.from_config(self.cfg))

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for a in (self.net.rate_corr, self.net.energy_corr, self.net.fading_power_est, self.train.weights):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(repr((self.task.gamma_cached, self.task.sensitivity, self.loss_reward_scale)).encode())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class PredictedOutcome:
    rate_hat: np.ndarray
    latency_hat: np.ndarray | float
    energy_hat: np.ndarray
    cp_hat: np.ndarray
    tx_hat: np.ndarray
    dloss_hat: np.ndarray | float
    dgamma_hat: np.ndarray | float
    violation_hat: np.ndarray | float
    scheduled: np.ndarray


def action_arrays(action) -> tuple:
    return action.arrays() if isinstance(action, SystemAction) else tuple(action)


def train_features(action, loss, grad_norms, omega, cfg: SimConfig) -> np.ndarray:
    """[1, retained batch share, mean grad norm, loss, mean scheduled split, scheduled share]."""
    _, _, split, q, x = action_arrays(action)
    x = np.asarray(x, dtype=bool)
    xf = x.astype(float)
    k = xf.sum(axis=-1)
    retained = np.sum(xf * omega * (1.0 - np.asarray(q)), axis=-1)
    depth = np.sum(xf * np.asarray(split), axis=-1) / np.maximum(k, 1.0)
    shape = np.shape(k)
    cols = [np.ones(shape), retained, np.broadcast_to(np.mean(grad_norms, axis=-1), shape),
            np.broadcast_to(loss, shape), depth, k / x.shape[-1]]
    return np.stack(np.broadcast_arrays(*cols), axis=-1)


def _task_gain(task: TaskTwinParams, dloss, gamma):
    return np.minimum(task.sensitivity * np.maximum(0.0, dloss), 1.0 - np.asarray(gamma))


def predict_round(snap: TwinSnapshot, state: StateVector, action, *, dloss=None,
                  dgamma=None) -> PredictedOutcome:
    """Twin forecast of one round. ``dloss``/``dgamma`` substitute oracle sub-twins."""
    arrs = action_arrays(action)
    x = np.asarray(arrs[4], dtype=bool)
    r, cp, tx, lat, e = round_physics(arrs, snap.terms, snap.geom, snap.net.fading_power_est,
                                      snap.cfg.noise_psd_w_per_hz, snap.net.rate_corr,
                                      snap.net.energy_corr)
    omega = snap.terms.batch / snap.terms.batch.sum()
    if dloss is None:
        feats = train_features(arrs, state.loss, state.grad_norms, omega, snap.cfg)
        dloss = feats @ snap.train.weights
    if dgamma is None:
        dgamma = _task_gain(snap.task, dloss, state.gamma_hat)
    v = violation(arrs, cp, tx, snap.geom, snap.cfg)
    return PredictedOutcome(r, lat, e, cp, tx, dloss, dgamma, v, x)


def predicted_reward(snap: TwinSnapshot, pred: PredictedOutcome):
    if snap.loss_reward_scale is not None:
        task = np.asarray(pred.dloss_hat) / snap.loss_reward_scale
    else:
        task = pred.dgamma_hat
    return reward(task, pred.latency_hat, pred.energy_hat, pred.violation_hat, snap.weights, snap.cfg)


def advance_state(state: StateVector, action, pred: PredictedOutcome) -> StateVector:
    """Belief update inside imagination; the fading belief is held fixed."""
    b = np.asarray(action_arrays(action)[0])
    return StateVector(
        gain=state.gain,
        fading_power=np.broadcast_to(state.fading_power, b.shape),
        prev_bandwidth=b,
        loss=np.asarray(state.loss) - np.asarray(pred.dloss_hat),
        grad_norms=np.asarray(state.grad_norms) * GRAD_DECAY * np.ones_like(b),
        gamma_hat=np.clip(np.asarray(state.gamma_hat) + np.asarray(pred.dgamma_hat), 0.0, 1.0),
    )


def twin_rollout(snap: TwinSnapshot, state: StateVector, actions, rng=None):
    """Predicted rewards for a K-step action sequence and the final belief state.

    Actions may carry leading batch axes; rewards come back shaped
    ``(K,) + batch``. ``rng`` is accepted for interface symmetry and unused.
    """
    rewards = []
    s = state
    for a in actions:
        pred = predict_round(snap, s, a)
        rewards.append(np.asarray(predicted_reward(snap, pred).r_total))
        s = advance_state(s, a, pred)
    return np.stack(rewards), s


# calibration loops -----------------------------------------------------------


def _damped(corr, ratio, ok, lam):
    new = corr * np.where(ok, ratio, 1.0) ** lam
    return np.clip(new, *CORR_BOUNDS)


def calibrate_net(params: NetTwinParams, pred_tx, pred_energy, real_tx, real_energy,
                  real_fading_power, scheduled, lam: float = CAL_RATE) -> NetTwinParams:
    """Damped multiplicative correction per scheduled terminal.

    Slower-than-predicted transmission shrinks the rate correction by
    ``(tx_hat / tx)^lam``; energy corrections move by ``(E / E_hat)^lam``.
    Pairs with a zero prediction but positive realization are skipped.
    """
    x = np.asarray(scheduled, dtype=bool)
    pt, rt = np.asarray(pred_tx, float), np.asarray(real_tx, float)
    pe, re = np.asarray(pred_energy, float), np.asarray(real_energy, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        tx_ok = x & (pt > 0) & (rt > 0) & np.isfinite(pt) & np.isfinite(rt)
        e_ok = x & (pe > 0) & (re > 0) & np.isfinite(pe) & np.isfinite(re)
        skipped = x & (((pt == 0) & (rt > 0)) | ((pe == 0) & (re > 0)))
        if skipped.any():
            log.info("net calibration skipped zero predictions at terminals %s", np.flatnonzero(skipped))
        rate_corr = _damped(params.rate_corr, pt / rt, tx_ok, lam)
        energy_corr = _damped(params.energy_corr, re / pe, e_ok, lam)
    return NetTwinParams(rate_corr, energy_corr, np.asarray(real_fading_power, dtype=float).copy())


def calibrate_train(params: TrainTwinParams, window=None, ridge: float = RIDGE) -> TrainTwinParams:
    """Ridge fit of realized loss decrease on the feature map over the window."""
    win = params.window if window is None else tuple(window)
    if not win:
        raise ValueError("calibration window is empty")
    X = np.stack([f for f, _ in win])
    y = np.array([d for _, d in win])
    w = np.linalg.solve(X.T @ X + ridge * np.eye(X.shape[1]), X.T @ y)
    return replace(params, weights=w, window=win)


def calibrate_task(params: TaskTwinParams, gamma_hat: float, gamma_realized: float,
                   cum_dloss: float, damping: float = TASK_DAMPING, eps: float = TASK_EPS) -> TaskTwinParams:
    """Re-anchor on the measured success rate and nudge the sensitivity."""
    sens = params.sensitivity
    if cum_dloss > eps:
        target = (gamma_realized - params.gamma_cached) / max(eps, cum_dloss)
        sens = max(0.0, (1.0 - damping) * sens + damping * target)
    return TaskTwinParams(float(np.clip(gamma_realized, 0.0, 1.0)), sens)


def epsilon_cal(pred: PredictedOutcome, real) -> float:
    """Sum of absolute twin-vs-reality gaps over the reward-relevant observables."""
    x = np.asarray(real.scheduled, dtype=bool)
    total = abs(float(pred.latency_hat) - float(real.latency))
    total += float(np.sum(np.abs(pred.energy_hat - real.energy)[x]))
    total += float(np.sum(np.abs(pred.cp_hat - real.cp)[x]))
    total += float(np.sum(np.abs(pred.tx_hat - real.tx)[x]))
    total += abs(float(pred.dgamma_hat) - float(real.dgamma))
    total += abs(float(pred.violation_hat) - float(real.violation))
    return total
