"""Shared domain types: configuration, counter-based randomness, and actions.

Actions are stored as numpy arrays with a trailing terminal axis. Any number of
leading batch axes is allowed, which is how the planner scores whole CEM
populations in one call.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "ConfigError",
    "SimConfig",
    "RngStream",
    "TerminalProfile",
    "TerminalAction",
    "SystemAction",
    "validate_config",
    "load_config",
    "dump_config",
    "config_to_text",
    "config_from_text",
    "config_hash",
    "table_config",
    "desk_config",
    "project_action",
]


class ConfigError(ValueError):
    """Raised when a config file cannot be parsed or fails validation."""


@dataclass(frozen=True)
class SimConfig:
    n_terminals: int = 8
    n_rounds: int = 200
    deadline_s: float = 5.0
    bandwidth_budget_hz: float = 1e8
    power_max_w: float = 0.2
    compression_max: float = 0.9
    # one entry per terminal, or a single entry shared by all
    memory_budget_bytes: tuple[float, ...] = (8e9,)
    noise_psd_w_per_hz: float = 10 ** (-174 / 10) * 1e-3
    split_set: tuple[int, ...] = (1, 2, 3, 4, 5)
    agg_interval: int = 5
    eval_interval: int = 20
    horizon: int = 4
    cem_population: int = 64
    cem_elites: int = 8
    cem_iters: int = 3
    imagine_len: int = 5
    discount: float = 0.95
    reward_weights: tuple[float, float, float] = (0.5, 0.5, 1.0)
    fading_corr: float = 0.9
    master_seed: int = 0
    # desk-scale plumbing beyond the core table
    batch_size: int = 8
    shard_size: int = 160
    lr_client: float = 0.2
    lr_server: float = 0.05
    payload_scale: float = 2.5e4

    def memory_budgets(self) -> np.ndarray:
        m = np.asarray(self.memory_budget_bytes, dtype=float)
        if m.size == 1:
            return np.full(self.n_terminals, float(m[0]))
        return m.copy()

    @property
    def energy_max_j(self) -> float:
        return self.n_terminals * self.power_max_w * self.deadline_s

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)


def table_config(**overrides) -> SimConfig:
    """Paper-scale defaults (hours of compute; validated, rarely run)."""
    base = SimConfig(
        n_terminals=50,
        n_rounds=1000,
        deadline_s=5.0,
        bandwidth_budget_hz=1e8,
        power_max_w=0.2,
        compression_max=0.9,
        memory_budget_bytes=(8e9,),
        split_set=(1, 2, 3, 4, 5),
        agg_interval=10,
        eval_interval=50,
        horizon=16,
        cem_population=200,
        cem_elites=25,
        cem_iters=5,
        imagine_len=10,
        discount=0.95,
    )
    return dataclasses.replace(base, **overrides)


# communication prices sized so r_comm is on the scale of the per-round task gain
DESK_REWARD_WEIGHTS = (0.002, 0.002, 1.0)
DESK_MEMORY_BUDGETS = (4.5e8, 2.0e8, 3.25e8, 4.5e8, 1.5e8, 4.0e8, 2.5e8, 4.5e8)


def desk_config(**overrides) -> SimConfig:
    """Desk-scale profile used by the acceptance runs (minutes, not hours)."""
    base = SimConfig(
        n_terminals=8,
        n_rounds=200,
        memory_budget_bytes=DESK_MEMORY_BUDGETS,
        agg_interval=5,
        eval_interval=20,
        horizon=4,
        cem_population=64,
        cem_elites=8,
        cem_iters=3,
        imagine_len=5,
        reward_weights=DESK_REWARD_WEIGHTS,
    )
    cfg = dataclasses.replace(base, **overrides)
    if "memory_budget_bytes" not in overrides and cfg.n_terminals != len(DESK_MEMORY_BUDGETS):
        reps = -(-cfg.n_terminals // len(DESK_MEMORY_BUDGETS))
        cfg = dataclasses.replace(
            cfg, memory_budget_bytes=(DESK_MEMORY_BUDGETS * reps)[: cfg.n_terminals]
        )
    return cfg


def validate_config(cfg: SimConfig) -> list[str]:
    """Return the violated invariants, one message per field; empty means valid."""
    errors: list[str] = []

    def bad(name: str, why: str) -> None:
        errors.append(f"{name}: {why}")

    for name in ("n_terminals", "n_rounds", "agg_interval", "eval_interval", "horizon",
                 "cem_population", "cem_elites", "cem_iters", "imagine_len",
                 "batch_size", "shard_size"):
        v = getattr(cfg, name)
        if int(v) != v or v < 1:
            bad(name, f"must be an integer >= 1, got {v!r}")
    if cfg.cem_elites > cfg.cem_population:
        bad("cem_elites", f"{cfg.cem_elites} exceeds cem_population={cfg.cem_population}")
    if not 0.0 < cfg.discount < 1.0:
        bad("discount", f"must lie in (0, 1), got {cfg.discount!r}")
    for name in ("deadline_s", "bandwidth_budget_hz", "power_max_w", "noise_psd_w_per_hz",
                 "lr_client", "lr_server", "payload_scale"):
        if not getattr(cfg, name) > 0:
            bad(name, f"must be > 0, got {getattr(cfg, name)!r}")
    mem = np.asarray(cfg.memory_budget_bytes, dtype=float)
    if mem.size not in (1, cfg.n_terminals):
        bad("memory_budget_bytes", f"needs 1 or {cfg.n_terminals} entries, got {mem.size}")
    elif not np.all(mem > 0):
        bad("memory_budget_bytes", "all budgets must be > 0")
    if not 0.0 <= cfg.compression_max <= 1.0:
        bad("compression_max", f"must lie in [0, 1], got {cfg.compression_max!r}")
    ss = list(cfg.split_set)
    if not ss:
        bad("split_set", "must be non-empty")
    elif any(int(s) != s or s < 1 for s in ss) or any(b <= a for a, b in zip(ss, ss[1:])):
        bad("split_set", f"must be strictly increasing positive integers, got {ss}")
    if len(cfg.reward_weights) != 3 or not all(w > 0 for w in cfg.reward_weights):
        bad("reward_weights", f"need three weights > 0, got {cfg.reward_weights!r}")
    if not 0.0 <= cfg.fading_corr <= 1.0:
        bad("fading_corr", f"must lie in [0, 1], got {cfg.fading_corr!r}")
    if int(cfg.master_seed) != cfg.master_seed:
        bad("master_seed", "must be an integer")
    return errors


# key=value serialization -----------------------------------------------------

_FIELD_TYPES = {f.name: f.type for f in fields(SimConfig)}


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_to_text(cfg: SimConfig) -> str:
    lines = [f"{f.name}={_format_value(getattr(cfg, f.name))}" for f in fields(SimConfig)]
    return "\n".join(lines) + "\n"


def _parse_value(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "tuple[int, ...]":
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return tuple(float(x) for x in raw.split(",") if x.strip())


def config_from_text(text: str, *, validate: bool = True) -> SimConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _parse_value(key, raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    cfg = SimConfig(**values)
    if validate:
        errors = validate_config(cfg)
        if errors:
            raise ConfigError("; ".join(errors))
    return cfg


def load_config(path: str | Path, *, validate: bool = True) -> SimConfig:
    return config_from_text(Path(path).read_text(), validate=validate)


def dump_config(cfg: SimConfig, path: str | Path) -> None:
    Path(path).write_text(config_to_text(cfg))


def config_hash(cfg: SimConfig) -> str:
    return hashlib.sha256(config_to_text(cfg).encode()).hexdigest()[:16]


# randomness ------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Every draw builds a Philox generator whose counter block is the call index,
    so the values returned by call number ``counter`` depend only on
    ``(seed, stream_id, counter)``. Forks get a hashed stream id and start at 0,
    which keeps parallel consumers reproducible regardless of ordering.
    """

    __slots__ = ("seed", "stream_id", "counter")

    def __init__(self, seed: int, stream_id: int = 0, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"

    def fork(self, tag: int | str) -> "RngStream":
        if isinstance(tag, str):
            tag = int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little")
        child = np.random.SeedSequence([self.stream_id, int(tag) & _MASK64, 0x5EED])
        return RngStream(self.seed, int(child.generate_state(1, np.uint64)[0]))

    def spawn(self) -> "RngStream":
        """Child stream keyed by the current counter; advances this stream by one."""
        child = self.fork(f"spawn:{self.counter}")
        self.counter += 1
        return child

    def copy(self) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.counter)

    def generator(self) -> np.random.Generator:
        """Fresh generator for the next call index; advances the counter."""
        bitgen = np.random.Philox(
            key=np.array([self.seed, self.stream_id], dtype=np.uint64),
            counter=np.array([0, 0, self.counter, 0], dtype=np.uint64),
        )
        self.counter += 1
        return np.random.Generator(bitgen)

    def normal(self, size=None, loc=0.0, scale=1.0):
        return self.generator().normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator().uniform(low, high, size)

    def random(self, size=None):
        return self.generator().random(size)

    def integers(self, low, high=None, size=None):
        return self.generator().integers(low, high, size)

    def gumbel(self, size=None):
        return self.generator().gumbel(0.0, 1.0, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator().permutation(n)

    def complex_normal(self, size=None) -> np.ndarray:
        """Circularly-symmetric CN(0, 1) draws."""
        g = self.generator()
        return (g.standard_normal(size) + 1j * g.standard_normal(size)) / np.sqrt(2.0)

    def dirichlet(self, alpha, size=None):
        return self.generator().dirichlet(alpha, size)


# terminals and actions -------------------------------------------------------


@dataclass(frozen=True)
class TerminalProfile:
    distance_m: float
    large_scale_gain: float
    ops_per_cycle: float
    cpu_hz: float
    energy_coeff: float
    batch_size: int
    dataset_size: int

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be > 0")
        if self.large_scale_gain > 1:
            raise ValueError("large_scale_gain must be <= 1")


@dataclass(frozen=True)
class TerminalAction:
    bandwidth_hz: float
    power_w: float
    split_idx: int
    compression: float
    scheduled: bool


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class SystemAction:
    """Per-terminal decisions; ``split`` holds the split layer index itself."""

    bandwidth: np.ndarray
    power: np.ndarray
    split: np.ndarray
    compression: np.ndarray
    scheduled: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bandwidth", _frozen(self.bandwidth, float))
        object.__setattr__(self, "power", _frozen(self.power, float))
        object.__setattr__(self, "split", _frozen(self.split, np.int64))
        object.__setattr__(self, "compression", _frozen(self.compression, float))
        object.__setattr__(self, "scheduled", _frozen(self.scheduled, bool))
        shapes = {a.shape for a in self.arrays()}
        if len(shapes) != 1:
            raise ValueError(f"action arrays disagree in shape: {sorted(shapes)}")

    def arrays(self):
        return (self.bandwidth, self.power, self.split, self.compression, self.scheduled)

    @property
    def n_terminals(self) -> int:
        return self.bandwidth.shape[-1]

    @property
    def per_terminal(self) -> list[TerminalAction]:
        if self.bandwidth.ndim != 1:
            raise ValueError("per_terminal is only defined for a single action")
        return [
            TerminalAction(float(b), float(p), int(s), float(q), bool(x))
            for b, p, s, q, x in zip(*self.arrays())
        ]

    @classmethod
    def from_terminals(cls, terminals: Sequence[TerminalAction]) -> "SystemAction":
        return cls(
            bandwidth=[t.bandwidth_hz for t in terminals],
            power=[t.power_w for t in terminals],
            split=[t.split_idx for t in terminals],
            compression=[t.compression for t in terminals],
            scheduled=[t.scheduled for t in terminals],
        )

    def __getitem__(self, idx) -> "SystemAction":
        """Index the leading batch axes."""
        return SystemAction(*(a[idx] for a in self.arrays()))

    def equals(self, other: "SystemAction") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))

    @property
    def scheduled_set(self) -> np.ndarray:
        return np.flatnonzero(self.scheduled)


def nearest_split(values, split_set: Sequence[int]) -> np.ndarray:
    """Nearest member of ``split_set``; ties go to the smaller member."""
    members = np.asarray(split_set, dtype=float)
    v = np.nan_to_num(np.asarray(values, dtype=float), nan=members[0])
    idx = np.argmin(np.abs(v[..., None] - members), axis=-1)
    return np.asarray(split_set, dtype=np.int64)[idx]


def project_action(raw: SystemAction, cfg: SimConfig, gains=None) -> SystemAction:
    """Clip to the hard-constraint box and repair an empty schedule.

    The bandwidth sum is left alone; it is soft-penalized by the violation term.
    The forced terminal for an all-zero schedule is the one with the largest
    ``gains`` entry (lowest index on ties; terminal 0 when no gains are given).
    """
    n = raw.n_terminals
    if n != cfg.n_terminals:
        raise ValueError(f"action has {n} terminals, config expects {cfg.n_terminals}")
    x = np.array(raw.scheduled, dtype=bool)
    best = 0 if gains is None else int(np.argmax(np.asarray(gains, dtype=float)))
    x[..., best] = x[..., best] | ~x.any(axis=-1)
    bw = np.clip(np.nan_to_num(raw.bandwidth), 0.0, cfg.bandwidth_budget_hz)
    pw = np.clip(np.nan_to_num(raw.power), 0.0, cfg.power_max_w)
    q = np.clip(np.nan_to_num(raw.compression), 0.0, cfg.compression_max)
    return SystemAction(
        bandwidth=np.where(x, bw, 0.0),
        power=np.where(x, pw, 0.0),
        split=nearest_split(raw.split, cfg.split_set),
        compression=q,
        scheduled=x,
    )
