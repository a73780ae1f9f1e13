"""Factorized actor, critic, CEM search inside the twin, and soft actor-critic.

Per terminal the actor emits a tanh-squashed Gaussian over (bandwidth, power,
compression), a Gumbel-softmax categorical over the split set, and a Bernoulli
schedule logit. CEM starts from those statistics, scores K-step sequences in
the twin, and bootstraps with the critic.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import RngStream, SimConfig, SystemAction, project_action
from .mdp import StateVector, state_dim
from .nn import Adam, clip_by_norm, init_mlp, mlp_backward, mlp_forward
from .twin import TwinSnapshot, advance_state, predict_round, predicted_reward, twin_rollout

log = logging.getLogger(__name__)

GUMBEL_TEMP = 0.7
ENTROPY_COEF = 0.05
GRAD_CLIP = 5.0
TAU_TARGET = 0.05
STD_FLOOR = 0.05
PROB_CLAMP = (0.02, 0.98)
LOGSTD_BOUNDS = (-5.0, 2.0)
ACTOR_HIDDEN = (64, 64)
CRITIC_HIDDEN = (128, 128)
BANDWIDTH_SLACK = 0.95
INIT_POWER_FRAC = 0.8
INIT_COMPRESSION_FRAC = 0.5
INIT_SCHED_LOGIT = 3.0
INIT_LOGSTD = -1.5
INFEASIBLE_LOGIT = -4.0
REWARD_CLIP = 1.0


def _softplus(z):
    return np.logaddexp(0.0, z)


def _log_sigmoid(z):
    return -_softplus(-z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softmax(z, axis=-1):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def memory_split_bias(geom, cfg: SimConfig, penalty: float = INFEASIBLE_LOGIT):
    """Initial split logits: zero where the prefix fits the terminal, ``penalty`` elsewhere."""
    mem = np.array([geom.mem(l) for l in cfg.split_set])
    fits = mem[None, :] <= np.asarray(cfg.memory_budgets())[:, None]
    return np.where(fits, 0.0, penalty)


def log1m_tanh2(u):
    """Stable log(1 - tanh(u)^2)."""
    return 2.0 * (np.log(2.0) - u - _softplus(-2.0 * u))


def action_dim(n_terminals: int, n_splits: int) -> int:
    return n_terminals * (4 + n_splits)


def _bounds(cfg: SimConfig) -> np.ndarray:
    return np.array([cfg.bandwidth_budget_hz, cfg.power_max_w, cfg.compression_max])


def encode_action(action: SystemAction, cfg: SimConfig) -> np.ndarray:
    """Per terminal [b/B, p/P, q/qmax, one-hot split, x], flattened."""
    b, p, split, q, x = action.arrays()
    qmax = cfg.compression_max if cfg.compression_max > 0 else 1.0
    idx = np.searchsorted(np.asarray(cfg.split_set), split)
    onehot = np.eye(len(cfg.split_set))[idx]
    cols = [b / cfg.bandwidth_budget_hz, p / cfg.power_max_w, q / qmax]
    enc = np.concatenate([np.stack(cols, axis=-1), onehot, x[..., None].astype(float)], axis=-1)
    return enc.reshape(enc.shape[:-2] + (-1,))


def decode_action(c, split_idx, x, cfg: SimConfig) -> SystemAction:
    """Unit-cube continuous coordinates plus discrete picks to a raw action."""
    vals = np.asarray(c) * _bounds(cfg)
    return SystemAction(vals[..., 0], vals[..., 1], np.asarray(cfg.split_set)[split_idx], vals[..., 2], x)


# networks --------------------------------------------------------------------


class Actor:
    """Shared tanh trunk with one linear head block per terminal."""

    def __init__(self, cfg: SimConfig, rng: RngStream, hidden=ACTOR_HIDDEN, split_bias=None):
        self.cfg = cfg
        self.n = cfg.n_terminals
        self.m = len(cfg.split_set)
        self.head = 7 + self.m
        sizes = (state_dim(self.n),) + tuple(hidden) + (self.n * self.head,)
        self.params = init_mlp(sizes, rng, out_scale=0.01)
        bias = np.zeros((self.n, self.head))
        # start just under an equal bandwidth share so the mean action fits the budget
        bias[:, 0] = np.arctanh(np.clip(2.0 * BANDWIDTH_SLACK / self.n - 1.0, -0.99, 0.99))
        if split_bias is not None:
            bias[:, 6:6 + self.m] = np.broadcast_to(split_bias, (self.n, self.m))
        bias[:, 1] = np.arctanh(2.0 * INIT_POWER_FRAC - 1.0)
        bias[:, 2] = np.arctanh(2.0 * INIT_COMPRESSION_FRAC - 1.0)
        bias[:, 3:6] = INIT_LOGSTD
        bias[:, -1] = INIT_SCHED_LOGIT
        self.params[-1] = bias.ravel()

    def heads(self, feats):
        out, cache = mlp_forward(self.params, np.atleast_2d(feats), linear_out=True)
        h = out.reshape(out.shape[0], self.n, self.head)
        return (h[..., 0:3], h[..., 3:6], h[..., 6:6 + self.m], h[..., -1]), cache

    def backward(self, cache, d_mean, d_logstd, d_logits, d_sched):
        dh = np.concatenate([d_mean, d_logstd, d_logits, d_sched[..., None]], axis=-1)
        return mlp_backward(self.params, cache, dh.reshape(dh.shape[0], -1), linear_out=True)[0]


class Critic:
    """Q(s, a) with a soft-updated target copy."""

    def __init__(self, cfg: SimConfig, rng: RngStream, hidden=CRITIC_HIDDEN):
        self.cfg = cfg
        self.s_dim = state_dim(cfg.n_terminals)
        sizes = (self.s_dim + action_dim(cfg.n_terminals, len(cfg.split_set)),) + tuple(hidden) + (1,)
        self.params = init_mlp(sizes, rng, out_scale=0.0)
        self.target = [p.copy() for p in self.params]

    def q(self, feats, enc, target: bool = False):
        inp = np.concatenate([np.atleast_2d(feats), np.atleast_2d(enc)], axis=-1)
        out, cache = mlp_forward(self.target if target else self.params, inp, linear_out=True)
        return out[:, 0], cache

    def soft_update(self, tau: float) -> None:
        self.target = [(1.0 - tau) * t + tau * p for t, p in zip(self.target, self.params)]


# sampling --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ActorNoise:
    eps: np.ndarray
    gumbel: np.ndarray
    uniform: np.ndarray

    @classmethod
    def draw(cls, rng: RngStream, lead: tuple, n: int, m: int) -> "ActorNoise":
        g = rng.generator()
        return cls(g.standard_normal(lead + (n, 3)), g.gumbel(0.0, 1.0, lead + (n, m)),
                   g.random(lead + (n,)))


@dataclass(frozen=True, eq=False)
class ActorDraw:
    """One reparameterized sample and the intermediates its gradient needs."""

    u: np.ndarray
    c: np.ndarray
    split_idx: np.ndarray
    y_soft: np.ndarray
    x_hard: np.ndarray
    sched_prob: np.ndarray
    log_prob: np.ndarray
    encoding: np.ndarray
    std: np.ndarray


def _draw(heads, noise: ActorNoise, temperature: float, relaxed: bool = False) -> ActorDraw:
    mean, logstd_raw, logits, sched = heads
    logstd = np.clip(logstd_raw, *LOGSTD_BOUNDS)
    std = np.exp(logstd)
    u = mean + std * noise.eps
    t = np.tanh(u)
    c = 0.5 * (t + 1.0)
    lp_c = -0.5 * noise.eps**2 - logstd - 0.5 * np.log(2 * np.pi) - (log1m_tanh2(u) - np.log(2.0))
    pert = logits + noise.gumbel
    idx = np.argmax(pert, axis=-1)
    y = _softmax(pert / temperature)
    lp_s = np.take_along_axis(_log_softmax(logits), idx[..., None], axis=-1)[..., 0]
    prob = _sigmoid(sched)
    x_hard = noise.uniform < prob
    lp_x = np.where(x_hard, _log_sigmoid(sched), _log_sigmoid(-sched))
    logp = lp_c.sum(axis=(-1, -2)) + lp_s.sum(axis=-1) + lp_x.sum(axis=-1)
    x = prob if relaxed else x_hard.astype(float)
    split_enc = y if relaxed else np.eye(logits.shape[-1])[idx]
    enc = np.concatenate([c[..., :2] * x[..., None], c[..., 2:3], split_enc, x[..., None]], axis=-1)
    enc = enc.reshape(enc.shape[:-2] + (-1,))
    return ActorDraw(u, c, idx, y, x_hard, prob, logp, enc, std)


def _draw_backward(heads, noise, dr: ActorDraw, d_enc, d_logp, temperature, relaxed=False):
    """Gradients of an objective with respect to the four head outputs."""
    mean, logstd_raw, logits, sched = heads
    n, m = logits.shape[-2], logits.shape[-1]
    g = d_enc.reshape(d_enc.shape[:-1] + (n, 4 + m))
    dlp = np.asarray(d_logp)[..., None, None]
    x = dr.sched_prob if relaxed else dr.x_hard.astype(float)
    t = np.tanh(dr.u)
    dc = np.concatenate([g[..., :2] * x[..., None], g[..., 2:3]], axis=-1)
    du = dc * 0.5 * (1.0 - t**2) + dlp * 2.0 * t
    d_mean = du
    inside = (logstd_raw > LOGSTD_BOUNDS[0]) & (logstd_raw < LOGSTD_BOUNDS[1])
    d_logstd = np.where(inside, du * dr.std * noise.eps - dlp, 0.0)
    dy = g[..., 3:3 + m]
    dz = dr.y_soft * (dy - np.sum(dr.y_soft * dy, axis=-1, keepdims=True)) / temperature
    onehot = np.eye(m)[dr.split_idx]
    d_logits = dz + dlp * (onehot - _softmax(logits))
    dx = g[..., -1] + g[..., 0] * dr.c[..., 0] + g[..., 1] * dr.c[..., 1]
    p = dr.sched_prob
    d_sched = dx * p * (1.0 - p) + dlp[..., 0] * (dr.x_hard - p)
    return d_mean, d_logstd, d_logits, d_sched


def _features(state, cfg):
    return state.features(cfg) if isinstance(state, StateVector) else np.asarray(state, dtype=float)


def actor_sample(actor: Actor, state, rng: RngStream, temperature: float = GUMBEL_TEMP, noise=None):
    """Sample, project and return ``(action, log_prob, encoding)``."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    feats = np.atleast_2d(_features(state, actor.cfg))
    heads, _ = actor.heads(feats)
    if noise is None:
        noise = ActorNoise.draw(rng, (feats.shape[0],), actor.n, actor.m)
    dr = _draw(heads, noise, temperature)
    raw = decode_action(dr.c, dr.split_idx, dr.x_hard, actor.cfg)
    gains = state.gain if isinstance(state, StateVector) else None
    act = project_action(raw, actor.cfg, gains)
    single = np.ndim(_features(state, actor.cfg)) == 1
    if single:
        return act[0], float(dr.log_prob[0]), dr.encoding[0]
    return act, dr.log_prob, dr.encoding


def actor_mean(actor: Actor, state) -> SystemAction:
    """Deterministic policy: squashed means, argmax split, schedule when p >= 0.5."""
    feats = _features(state, actor.cfg)
    (mean, _, logits, sched), _ = actor.heads(feats)
    raw = decode_action(0.5 * (np.tanh(mean) + 1.0), np.argmax(logits, axis=-1), sched >= 0.0, actor.cfg)
    gains = state.gain if isinstance(state, StateVector) else None
    act = project_action(raw, actor.cfg, gains)
    return act[0] if np.ndim(feats) == 1 else act


def _sample_encodings(actor: Actor, feats, gains, noise: ActorNoise, temperature=GUMBEL_TEMP):
    """Projected action encodings for every (noise draw, state) pair."""
    heads, _ = actor.heads(feats)
    dr = _draw(heads, noise, temperature)
    raw = decode_action(dr.c, dr.split_idx, dr.x_hard, actor.cfg)
    act = project_action(raw, actor.cfg, gains)
    return encode_action(act, actor.cfg), dr.log_prob


def terminal_value(actor: Actor, critic: Critic, state, n_samples: int = 8, rng: RngStream | None = None,
                   noise: ActorNoise | None = None):
    """Monte-Carlo mean of Q(s, a) over actor samples; batched states allowed."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    feats = _features(state, actor.cfg)
    single = feats.ndim == 1
    feats = np.atleast_2d(feats)
    if noise is None:
        noise = ActorNoise.draw(rng, (n_samples, 1), actor.n, actor.m)
    n_s = noise.eps.shape[0]
    big = np.broadcast_to(feats, (n_s,) + feats.shape).reshape(-1, feats.shape[-1])
    tile = lambda a: np.broadcast_to(a, (n_s, feats.shape[0]) + a.shape[2:]).reshape((-1,) + a.shape[2:])
    nz = ActorNoise(tile(noise.eps), tile(noise.gumbel), tile(noise.uniform))
    gains = state.gain if isinstance(state, StateVector) else None
    enc, _ = _sample_encodings(actor, big, gains, nz)
    q, _ = critic.q(big, enc)
    v = q.reshape(n_s, feats.shape[0]).mean(axis=0)
    return float(v[0]) if single else v


# CEM -------------------------------------------------------------------------


def _n_threads() -> int:
    k = int(os.environ.get("TILP_THREADS", "1").strip() or "1")
    if k == 0:
        return os.cpu_count() or 1
    return max(1, k)


def score_sequences(state: StateVector, snap: TwinSnapshot, actor: Actor, critic: Critic, cfg: SimConfig,
                    seq: SystemAction, value_noise: ActorNoise) -> np.ndarray:
    """Discounted twin return plus bootstrapped terminal value for ``(P, K, N)`` sequences."""
    K = seq.bandwidth.shape[1]
    steps = [seq[:, k] for k in range(K)]
    rewards, s_end = twin_rollout(snap, state, steps)
    disc = cfg.discount ** np.arange(K)
    with np.errstate(invalid="ignore"):
        ret = np.tensordot(disc, rewards, axes=1)
    v = terminal_value(actor, critic, s_end, noise=value_noise)
    out = ret + cfg.discount**K * v
    return np.where(np.isnan(out), -np.inf, out)


def _score_parallel(score, seq: SystemAction, threads: int) -> np.ndarray:
    P = seq.bandwidth.shape[0]
    if threads <= 1 or P < 2 * threads:
        return score(seq)
    bounds = np.linspace(0, P, threads + 1).astype(int)
    chunks = [seq[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        parts = list(ex.map(score, chunks))
    return np.concatenate(parts)


def value_noise_for(rng: RngStream, actor: Actor, n_samples: int = 8) -> ActorNoise:
    """Common random numbers for the terminal value of one planning call."""
    return ActorNoise.draw(rng.fork("value"), (n_samples, 1), actor.n, actor.m)


def prior_sequence(actor: Actor, state: StateVector, horizon: int) -> SystemAction:
    """The actor's mean action repeated over the horizon, shaped ``(1, K, N)``."""
    a = actor_mean(actor, state)
    return SystemAction(*(np.broadcast_to(v, (1, horizon) + v.shape) for v in a.arrays()))


@dataclass(frozen=True)
class CemResult:
    action: SystemAction
    best_score: float
    diagnostics: tuple
    prior_score: float
    value_noise: ActorNoise
    plan: SystemAction | None = None


def shift_plan(plan: SystemAction) -> SystemAction:
    """Drop the executed first step and repeat the last one (receding-horizon warm start)."""
    return SystemAction(*(np.concatenate([a[1:], a[-1:]]) for a in plan.arrays()))


def _latent(seq: SystemAction, cfg: SimConfig):
    """Pre-squash coordinates, split indices and schedule of a ``(K, N)`` sequence."""
    c = np.stack([np.asarray(seq.bandwidth) / cfg.bandwidth_budget_hz,
                  np.asarray(seq.power) / cfg.power_max_w,
                  np.asarray(seq.compression) / cfg.compression_max if cfg.compression_max > 0
                  else np.zeros_like(seq.compression)], axis=-1)
    u = np.arctanh(np.clip(2.0 * c - 1.0, -1.0 + 1e-6, 1.0 - 1e-6))
    lookup = {l: i for i, l in enumerate(cfg.split_set)}
    idx = np.vectorize(lookup.__getitem__)(np.asarray(seq.split))
    return u, idx, np.asarray(seq.scheduled, dtype=bool)


def cem_plan(state: StateVector, snap: TwinSnapshot, actor: Actor, critic: Critic, cfg: SimConfig,
             rng: RngStream, *, n_value_samples: int = 8, inject_prior: bool = True,
             warm_start: SystemAction | None = None, threads: int | None = None) -> CemResult:
    """Receding-horizon CEM over K-step sequences scored inside the twin.

    Elites carry over between iterations, so the best elite score never drops.
    When the population has room, the actor's mean sequence is one of the
    first-iteration candidates, followed by ``warm_start`` (a ``(K, N)``
    sequence, typically the previous plan shifted by one round) if given.
    """
    Y1, Y2, K, M = cfg.cem_population, cfg.cem_elites, cfg.horizon, len(cfg.split_set)
    if not Y1 >= Y2 >= 1:
        raise ValueError("need cem_population >= cem_elites >= 1")
    threads = _n_threads() if threads is None else threads
    n = cfg.n_terminals
    (mean, logstd, logits, sched), _ = actor.heads(state.features(cfg)[None])
    mu = np.broadcast_to(mean[0], (K, n, 3)).copy()
    std = np.broadcast_to(np.maximum(np.exp(np.clip(logstd[0], *LOGSTD_BOUNDS)), STD_FLOOR), (K, n, 3)).copy()
    probs = np.broadcast_to(_softmax(logits[0]), (K, n, M)).copy()
    pb = np.broadcast_to(np.clip(_sigmoid(sched[0]), *PROB_CLAMP), (K, n)).copy()
    base = rng.spawn()
    vnoise = value_noise_for(base, actor, n_value_samples)
    def score(seq):
        return score_sequences(state, snap, actor, critic, cfg, seq, vnoise)

    injected = inject_prior and Y1 >= 2
    # an injected prior is scored inside the population batch so its score is bit-identical to the candidate's
    prior_score = None if injected else float(score(prior_sequence(actor, state, K))[0])
    samp = base.fork("cem")
    elite = None
    diags = []
    for it in range(cfg.cem_iters):
        g = samp.generator()
        u = mu + std * g.standard_normal((Y1, K, n, 3))
        cum = np.cumsum(probs, axis=-1)
        idx = np.minimum((g.random((Y1, K, n, 1)) > cum).sum(axis=-1), M - 1)
        x = g.random((Y1, K, n)) < pb
        if it == 0 and injected:
            u[0] = mean[0]
            idx[0] = np.argmax(logits[0], axis=-1)
            x[0] = sched[0] >= 0.0
        if it == 0 and warm_start is not None and Y1 >= 3:
            u[1], idx[1], x[1] = _latent(warm_start, cfg)
        seq = project_action(decode_action(0.5 * (np.tanh(u) + 1.0), idx, x, cfg), cfg, state.gain)
        scores = _score_parallel(score, seq, threads)
        if prior_score is None:
            prior_score = float(scores[0])
        xs = np.asarray(seq.scheduled)
        if elite is not None:
            u = np.concatenate([u, elite[0]])
            idx = np.concatenate([idx, elite[1]])
            xs = np.concatenate([xs, elite[2]])
            scores = np.concatenate([scores, elite[3]])
            seq = SystemAction(*(np.concatenate([a, b]) for a, b in zip(seq.arrays(), elite[4].arrays())))
        order = np.argsort(-scores, kind="stable")[:Y2]
        elite = (u[order], idx[order], xs[order], scores[order], seq[order])
        mu = elite[0].mean(axis=0)
        std = np.maximum(elite[0].std(axis=0), STD_FLOOR)
        counts = (elite[1][..., None] == np.arange(M)).sum(axis=0)
        probs = (counts + 1.0) / (len(order) + M)
        pb = np.clip(elite[2].mean(axis=0), *PROB_CLAMP)
        finite = elite[3][np.isfinite(elite[3])]
        diags.append({
            "iter": it,
            "best_score": float(elite[3][0]),
            "mean_elite_score": float(finite.mean()) if finite.size else float("-inf"),
            "pop_std": float(std.mean()),
        })
    best = elite[4][0]
    return CemResult(best[0], float(elite[3][0]), tuple(diags), prior_score, vnoise, best)


# replay and SAC --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ReplayEntry:
    state: StateVector
    action: SystemAction
    reward: float
    next_state: StateVector
    done: bool
    origin: str

    def __post_init__(self):
        if self.origin not in ("real", "imagined"):
            raise ValueError(f"unknown origin {self.origin!r}")


class ReplayBuffer:
    """Separate real and imagined pools sampled at a fixed mix."""

    def __init__(self, cfg: SimConfig, capacity: int = 4000):
        self.cfg = cfg
        self.capacity = capacity
        self.pools: dict[str, list] = {"real": [], "imagined": []}

    def __len__(self) -> int:
        return sum(len(p) for p in self.pools.values())

    def add(self, entry: ReplayEntry) -> None:
        row = (entry.state.features(self.cfg), encode_action(entry.action, self.cfg), float(entry.reward),
               entry.next_state.features(self.cfg), float(entry.done))
        # infinite rewards are the impossible-transmission sentinel and get clipped at update time
        if any(np.any(np.isnan(r)) for r in row) or not all(np.all(np.isfinite(r)) for r in row[:2] + row[3:]):
            raise ValueError("replay entries must be finite")
        pool = self.pools[entry.origin]
        pool.append(row)
        if len(pool) > self.capacity:
            del pool[0]

    def sample(self, batch: int, rng: RngStream, real_ratio: float = 0.5):
        """Draw ``round(batch * real_ratio)`` real rows and the rest imagined."""
        real, imag = self.pools["real"], self.pools["imagined"]
        if not real and not imag:
            raise ValueError("replay buffer is empty")
        n_real = int(round(batch * real_ratio)) if imag else batch
        if not real:
            n_real = 0
        g = rng.generator()
        rows = [real[i] for i in g.integers(0, len(real), n_real)] if n_real else []
        rows += [imag[i] for i in g.integers(0, len(imag), batch - n_real)] if batch > n_real else []
        cols = [np.stack([r[k] for r in rows]) for k in range(5)]
        origin = np.array(["real"] * n_real + ["imagined"] * (batch - n_real))
        return (*cols, origin)


@dataclass(frozen=True)
class SacHyper:
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    alpha: float = ENTROPY_COEF
    tau: float = TAU_TARGET
    discount: float = 0.95


class SacTrainer:
    """Owns the optimizers; updates are all-or-nothing."""

    def __init__(self, actor: Actor, critic: Critic, hyper: SacHyper = SacHyper()):
        self.actor, self.critic, self.hyper = actor, critic, hyper
        self.actor_opt = Adam(actor.params, hyper.actor_lr)
        self.critic_opt = Adam(critic.params, hyper.critic_lr)

    def update(self, batch, rng: RngStream) -> dict:
        return sac_update(self.actor, self.critic, batch, self.hyper, rng,
                          self.actor_opt, self.critic_opt)


def critic_loss_and_grads(critic: Critic, s, a, y):
    q, cache = critic.q(s, a)
    diff = q - y
    loss = float(np.mean(diff**2))
    grads, _ = mlp_backward(critic.params, cache, (2.0 * diff / len(y))[:, None], linear_out=True)
    return loss, grads


def actor_loss_and_grads(actor: Actor, critic: Critic, s, noise: ActorNoise, alpha: float,
                         temperature: float = GUMBEL_TEMP, relaxed: bool = False):
    """Loss mean(alpha * log_prob - Q(s, a)) and its actor-parameter gradient."""
    heads, cache = actor.heads(s)
    dr = _draw(heads, noise, temperature, relaxed)
    q, ccache = critic.q(s, dr.encoding)
    B = s.shape[0]
    loss = float(np.mean(alpha * dr.log_prob - q))
    _, d_in = mlp_backward(critic.params, ccache, np.full((B, 1), -1.0 / B), linear_out=True)
    d_enc = d_in[:, critic.s_dim:]
    dh = _draw_backward(heads, noise, dr, d_enc, np.full(B, alpha / B), temperature, relaxed)
    return loss, actor.backward(cache, *dh)


def sac_update(actor: Actor, critic: Critic, batch, hyper: SacHyper, rng: RngStream,
               actor_opt: Adam | None = None, critic_opt: Adam | None = None) -> dict:
    """One soft actor-critic step; a non-finite loss leaves every parameter unchanged."""
    s, a, r, s2, done = batch[:5]
    if len(r) == 0:
        raise ValueError("empty batch")
    actor_opt = actor_opt or Adam(actor.params, hyper.actor_lr)
    critic_opt = critic_opt or Adam(critic.params, hyper.critic_lr)
    r = np.clip(np.nan_to_num(r, posinf=REWARD_CLIP, neginf=-REWARD_CLIP), -REWARD_CLIP, REWARD_CLIP)
    n2 = ActorNoise.draw(rng, (len(r),), actor.n, actor.m)
    enc2, logp2 = _sample_encodings(actor, s2, None, n2)
    q2, _ = critic.q(s2, enc2, target=True)
    y = r + hyper.discount * (1.0 - done) * (q2 - hyper.alpha * logp2)
    c_loss, c_grads = critic_loss_and_grads(critic, s, a, y)
    if not np.isfinite(c_loss):
        log.warning("sac update skipped: non-finite critic loss")
        return {"critic_loss": c_loss, "actor_loss": float("nan"), "applied": False}
    c_grads, c_norm = clip_by_norm(c_grads, GRAD_CLIP)
    new_critic = critic_opt.step(critic.params, c_grads)
    old_critic = critic.params
    critic.params = new_critic
    n1 = ActorNoise.draw(rng, (len(r),), actor.n, actor.m)
    a_loss, a_grads = actor_loss_and_grads(actor, critic, s, n1, hyper.alpha)
    a_grads, a_norm = clip_by_norm(a_grads, GRAD_CLIP)
    new_actor = actor_opt.step(actor.params, a_grads)
    ok = np.isfinite(c_loss) and np.isfinite(a_loss) and all(np.all(np.isfinite(p)) for p in new_actor + new_critic)
    if not ok:
        critic.params = old_critic
        log.warning("sac update skipped: non-finite loss (critic=%s, actor=%s)", c_loss, a_loss)
        return {"critic_loss": c_loss, "actor_loss": a_loss, "applied": False}
    actor.params = new_actor
    critic.soft_update(hyper.tau)
    return {"critic_loss": c_loss, "actor_loss": a_loss, "critic_grad_norm": c_norm,
            "actor_grad_norm": a_norm, "applied": True}


def imagine_rollout(actor: Actor, snap: TwinSnapshot, state: StateVector, U: int, rng: RngStream) -> list:
    """U imagined transitions under the actor inside a frozen twin."""
    if U < 1:
        raise ValueError("U must be >= 1")
    out = []
    s = state
    for _ in range(U):
        a, _, _ = actor_sample(actor, s, rng)
        pred = predict_round(snap, s, a)
        r = float(predicted_reward(snap, pred).r_total)
        s2 = advance_state(s, a, pred)
        s2 = StateVector(s2.gain, np.asarray(s2.fading_power), np.asarray(s2.prev_bandwidth),
                         np.asarray(s2.loss), np.asarray(s2.grad_norms), np.asarray(s2.gamma_hat))
        out.append(ReplayEntry(s, a, r, s2, False, "imagined"))
        s = s2
    return out
