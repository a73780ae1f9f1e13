from __future__ import annotations

import pytest

from tilp.core import RngStream, desk_config
from tilp.fsl import build_geometry
from tilp.mdp import RewardWeights
from tilp.netphys import TerminalArrays, make_terminals


@pytest.fixture
def cfg():
    return desk_config(n_terminals=4, n_rounds=6, cem_population=12, cem_elites=4, cem_iters=2,
                       horizon=2, imagine_len=2, agg_interval=2, eval_interval=3)


@pytest.fixture
def geom():
    return build_geometry()


@pytest.fixture
def terms(cfg):
    return TerminalArrays.from_profiles(make_terminals(cfg, RngStream(7).fork("terminals")))


@pytest.fixture
def weights(cfg):
    return RewardWeights.from_config(cfg)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
