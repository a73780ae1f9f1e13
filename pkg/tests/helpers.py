"""Random instance builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from tilp.core import RngStream, SystemAction
from tilp.mdp import assemble_state


def random_state(cfg, terms, rng: RngStream):
    g = rng.generator()
    n = cfg.n_terminals
    return assemble_state(terms.gain, g.exponential(1.0, n), g.uniform(0, cfg.bandwidth_budget_hz / n, n),
                          g.uniform(0.5, 1.5), g.uniform(0, 2, n), g.uniform(0.2, 0.9))


def random_action(cfg, rng: RngStream, *, feasible_memory: bool = True) -> SystemAction:
    g = rng.generator()
    n = cfg.n_terminals
    x = g.random(n) < 0.7
    x[g.integers(n)] = True
    split = g.choice(np.asarray(cfg.split_set[:2] if feasible_memory else cfg.split_set), n)
    return SystemAction(np.where(x, g.uniform(0.05, 0.25, n) * cfg.bandwidth_budget_hz, 0.0),
                        np.where(x, g.uniform(0.01, cfg.power_max_w, n), 0.0), split,
                        g.uniform(0, cfg.compression_max, n), x)
