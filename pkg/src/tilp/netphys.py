"""Wireless and device physics for one FSL round.

All functions broadcast over numpy arrays. Impossible transmissions (positive
payload over a zero-rate link) are reported as ``inf`` rather than raised, so
they flow straight into the straggler max and the violation penalty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RngStream, SimConfig, TerminalProfile

# path loss: G(d) = G0 * d^-3.5 with G(100 m) = 1e-10
PATHLOSS_EXP = 3.5
G0_AT_1M = 1e-10 * 100.0**PATHLOSS_EXP


@dataclass(frozen=True, eq=False)
class ChannelState:
    fading: np.ndarray
    fading_power: np.ndarray
    corr: float

    @classmethod
    def from_fading(cls, fading, corr: float) -> "ChannelState":
        h = np.asarray(fading, dtype=complex)
        return cls(fading=h, fading_power=np.abs(h) ** 2, corr=float(corr))

    @classmethod
    def initial(cls, n: int, corr: float, rng: RngStream) -> "ChannelState":
        return cls.from_fading(rng.complex_normal(n), corr)


@dataclass(frozen=True, eq=False)
class PayloadGeometry:
    """Per-split-layer tables indexed by the layer number (entry 0 unused)."""

    act_bits_per_sample: np.ndarray
    macs_per_sample: np.ndarray
    mem_bytes: np.ndarray

    def psi(self, split):
        return self.act_bits_per_sample[np.asarray(split)]

    def phi(self, split):
        return self.macs_per_sample[np.asarray(split)]

    def mem(self, split):
        return self.mem_bytes[np.asarray(split)]


def step_fading(ch: ChannelState, rng: RngStream) -> ChannelState:
    """First-order auto-regressive step that keeps E|H|^2 = 1."""
    if not 0.0 <= ch.corr <= 1.0:
        raise ValueError(f"fading correlation must lie in [0, 1], got {ch.corr}")
    eps = rng.complex_normal(ch.fading.shape)
    if ch.corr == 1.0:
        return ch
    h = ch.corr * ch.fading + np.sqrt(1.0 - ch.corr**2) * eps
    return ChannelState.from_fading(h, ch.corr)


def path_gain(distance_m):
    return G0_AT_1M * np.asarray(distance_m, dtype=float) ** (-PATHLOSS_EXP)


def rate(b_hz, p_w, gain, fading_power, n0):
    """Shannon rate b*log2(1 + G|H|^2 p / (N0 b)); exactly 0 when b or p is 0."""
    b = np.asarray(b_hz, dtype=float)
    p = np.asarray(p_w, dtype=float)
    live = (b > 0) & (p > 0)
    safe_b = np.where(live, b, 1.0)
    snr = np.asarray(gain) * np.asarray(fading_power) * p / (n0 * safe_b)
    out = np.where(live, safe_b * np.log2(1.0 + snr), 0.0)
    return out if out.ndim else float(out)


def tx_delay(batch, act_bits, q, rate_bps):
    """One-way delay of the retained payload; inf when it cannot be sent."""
    payload = np.asarray(batch, dtype=float) * np.asarray(act_bits) * (1.0 - np.asarray(q))
    r = np.asarray(rate_bps, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(payload <= 0, 0.0, np.where(r > 0, payload / np.where(r > 0, r, 1.0), np.inf))
    return out if out.ndim else float(out)


def cp_delay(batch, macs, ops_per_cycle, cpu_hz):
    out = np.asarray(batch, dtype=float) * np.asarray(macs) / (np.asarray(ops_per_cycle) * np.asarray(cpu_hz))
    return out if np.ndim(out) else float(out)


def round_latency(delays) -> float:
    """Straggler latency max(cp + 2 tx) over a list of scheduled ``(cp, tx)`` pairs."""
    pairs = np.asarray(list(delays), dtype=float).reshape(-1, 2)
    if pairs.shape[0] == 0:
        raise ValueError("empty scheduled set: constraint C8 violated upstream")
    return float(np.max(pairs[:, 0] + 2.0 * pairs[:, 1]))


def straggler_latency(cp, tx, scheduled):
    """Array form of :func:`round_latency`; reduces the trailing terminal axis."""
    sched = np.asarray(scheduled, dtype=bool)
    if not np.all(sched.any(axis=-1)):
        raise ValueError("empty scheduled set: constraint C8 violated upstream")
    total = np.where(sched, np.asarray(cp, dtype=float) + 2.0 * np.asarray(tx, dtype=float), -np.inf)
    out = np.max(total, axis=-1)
    return out if np.ndim(out) else float(out)


def terminal_energy(kappa, cpu_hz, batch, macs, p_w, tx_s):
    """Compute energy kappa g^2 K phi plus radiated energy p * tx (inf if tx is)."""
    comp = np.asarray(kappa) * np.asarray(cpu_hz) ** 2 * np.asarray(batch, dtype=float) * np.asarray(macs)
    tx = np.asarray(tx_s, dtype=float)
    p = np.asarray(p_w, dtype=float)
    comm = np.where(np.isinf(tx), np.inf, p * np.where(np.isinf(tx), 0.0, tx))
    out = comp + comm
    return out if np.ndim(out) else float(out)


def memory_ok(geom: PayloadGeometry, split_idx, budget_bytes):
    need = geom.mem(split_idx)
    over = np.maximum(0.0, need - np.asarray(budget_bytes, dtype=float))
    if np.ndim(over) == 0:
        return bool(over == 0), float(over)
    return over == 0, over


# terminal population ---------------------------------------------------------


def make_terminals(cfg: SimConfig, rng: RngStream) -> list[TerminalProfile]:
    """Draw the desk-scale terminal population.

    Compute constants are scaled so that a mid-distance terminal with an equal
    bandwidth share, half power, the middle split and half compression lands a
    little under the deadline.
    """
    n = cfg.n_terminals
    g = rng.generator()
    dist = g.uniform(10.0, 200.0, n)
    ops = g.uniform(2.0e-5, 3.0e-5, n)
    kappa = g.uniform(1.5e-24, 3.0e-24, n)
    return [
        TerminalProfile(
            distance_m=float(d),
            large_scale_gain=float(path_gain(d)),
            ops_per_cycle=float(o),
            cpu_hz=1.5e9,
            energy_coeff=float(k),
            batch_size=cfg.batch_size,
            dataset_size=cfg.shard_size,
        )
        for d, o, k in zip(dist, ops, kappa)
    ]


@dataclass(frozen=True, eq=False)
class TerminalArrays:
    """Column view of a terminal population for vectorized physics."""

    gain: np.ndarray
    ops_per_cycle: np.ndarray
    cpu_hz: np.ndarray
    energy_coeff: np.ndarray
    batch: np.ndarray
    dataset_size: np.ndarray

    @classmethod
    def from_profiles(cls, profiles) -> "TerminalArrays":
        col = lambda name: np.array([getattr(p, name) for p in profiles], dtype=float)
        return cls(
            gain=col("large_scale_gain"),
            ops_per_cycle=col("ops_per_cycle"),
            cpu_hz=col("cpu_hz"),
            energy_coeff=col("energy_coeff"),
            batch=col("batch_size"),
            dataset_size=col("dataset_size"),
        )


def round_physics(action_arrays, terms: TerminalArrays, geom: PayloadGeometry, fading_power,
                  n0: float, rate_scale=1.0, energy_scale=1.0):
    """Rate, delays, latency and energy for (possibly batched) actions.

    ``rate_scale`` and ``energy_scale`` are per-terminal multipliers: the twin uses
    them as calibration corrections, the physical system as hidden hardware
    efficiencies. Unscheduled terminals report zero delay and energy.
    """
    b, p, split, q, x = action_arrays
    r = rate_scale * rate(b, p, terms.gain, fading_power, n0)
    tx = np.where(x, tx_delay(terms.batch, geom.psi(split), q, r), 0.0)
    cp = np.where(x, cp_delay(terms.batch, geom.phi(split), terms.ops_per_cycle, terms.cpu_hz), 0.0)
    e = terminal_energy(terms.energy_coeff, terms.cpu_hz, terms.batch, geom.phi(split), p, tx)
    e = np.where(x, energy_scale * e, 0.0)
    lat = straggler_latency(cp, tx, x)
    return r, cp, tx, lat, e
