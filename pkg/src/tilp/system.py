"""The physical side of a round: hidden channel, hidden hardware efficiencies."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RngStream, SimConfig, SystemAction
from .mdp import violation
from .netphys import ChannelState, PayloadGeometry, TerminalArrays, round_physics, step_fading


@dataclass(frozen=True, eq=False)
class RoundOutcome:
    """Realized per-round quantities; unscheduled terminals carry zeros."""

    scheduled: np.ndarray
    rate: np.ndarray
    cp: np.ndarray
    tx: np.ndarray
    latency: float
    energy: np.ndarray
    violation: float
    volume_bits: float
    fading_power: np.ndarray
    dloss: float = 0.0
    dgamma: float = 0.0


class PhysicalSystem:
    """Ground truth the twin never sees directly.

    ``rate_efficiency`` and ``energy_bias`` scale the textbook rate and energy
    per terminal; they stand in for modeling error the twin has to learn.
    """

    def __init__(self, cfg: SimConfig, terms: TerminalArrays, geom: PayloadGeometry, rng: RngStream,
                 rate_efficiency=None, energy_bias=None):
        n = cfg.n_terminals
        self.cfg, self.terms, self.geom, self.rng = cfg, terms, geom, rng
        self.rate_efficiency = np.ones(n) if rate_efficiency is None else np.asarray(rate_efficiency, float)
        self.energy_bias = np.ones(n) if energy_bias is None else np.asarray(energy_bias, float)
        self.channel = ChannelState.initial(n, cfg.fading_corr, rng)

    def step_channel(self) -> ChannelState:
        self.channel = step_fading(self.channel, self.rng)
        return self.channel

    def execute(self, action: SystemAction) -> RoundOutcome:
        arrs = action.arrays()
        r, cp, tx, lat, e = round_physics(arrs, self.terms, self.geom, self.channel.fading_power,
                                          self.cfg.noise_psd_w_per_hz, self.rate_efficiency,
                                          self.energy_bias)
        x = np.asarray(action.scheduled)
        vol = float(np.sum(np.where(x, self.terms.batch * self.geom.psi(action.split)
                                    * (1.0 - action.compression), 0.0)))
        v = violation(action, cp, tx, self.geom, self.cfg)
        return RoundOutcome(x.copy(), r, cp, tx, float(lat), e, float(v), vol,
                            self.channel.fading_power.copy())
