"""Episode loop, baselines, metrics and the suite driver."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import (ConfigError, RngStream, SimConfig, SystemAction, config_hash, load_config,
                   project_action, validate_config)
from .fsl import DEFAULT_WIDTHS, SplitTrainer, build_geometry, make_dataset
from .mdp import RewardWeights, assemble_state, reward
from .netphys import TerminalArrays, make_terminals, rate, tx_delay, cp_delay
from .planner import (Actor, Critic, ReplayBuffer, ReplayEntry, SacHyper, SacTrainer, actor_mean,
                      cem_plan, imagine_rollout, memory_split_bias, shift_plan)
from .system import PhysicalSystem
from .twin import (NetTwinParams, TaskTwinParams, TrainTwinParams, TwinSnapshot, _task_gain,
                   calibrate_net, calibrate_task, calibrate_train, epsilon_cal, predict_round,
                   train_features)

log = logging.getLogger(__name__)

POLICY_KINDS = ("tilp", "actor_only", "random_feasible", "static_equal", "greedy_channel")
BASELINES = ("random_feasible", "static_equal", "greedy_channel")
RTA_THRESHOLDS = (0.6, 0.7, 0.8)
UNREACHED = "--"
CSV_COLUMNS = ("round", "gamma_hat", "gamma_real_or_blank", "loss", "dloss", "latency_s", "energy_j",
               "volume_bits", "violation", "r_task", "r_comm", "r_pen", "r_total", "eps_cal")
PLAN_COLUMNS = ("round", "iter", "best_score", "mean_elite_score", "pop_std")
CAL_COLUMNS = ("round", "loop", "residual_pre", "residual_post")
SAC_BATCH = 32
SAC_STEPS = 1
SAC_WARMUP = 8


class EpisodeError(RuntimeError):
    """A module failed mid-episode; the message names the round and phase."""


@dataclass(frozen=True)
class PolicySpec:
    kind: str
    freeze_loop1: bool = False
    freeze_loop2: bool = False
    freeze_loop3: bool = False
    loss_driven_reward: bool = False

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}; expected one of {POLICY_KINDS}")
        flags = (self.freeze_loop1, self.freeze_loop2, self.freeze_loop3, self.loss_driven_reward)
        if any(flags) and self.kind not in ("tilp", "actor_only"):
            raise ValueError("ablation switches only apply to tilp and actor_only")

    @property
    def learns(self) -> bool:
        return self.kind in ("tilp", "actor_only")

    @property
    def label(self) -> str:
        tags = [n for n in ("freeze_loop1", "freeze_loop2", "freeze_loop3", "loss_driven_reward")
                if getattr(self, n)]
        return "+".join([self.kind] + tags)

    @classmethod
    def parse(cls, spec) -> "PolicySpec":
        if isinstance(spec, PolicySpec):
            return spec
        if isinstance(spec, str):
            kind, *tags = spec.split("+")
            return cls(kind, **{t: True for t in tags})
        return cls(**spec)


@dataclass(frozen=True, eq=False)
class RoundRecord:
    round: int
    gamma_hat: float
    gamma_real: float | None
    loss: float
    dloss: float
    latency: float
    energy: np.ndarray
    volume_bits: float
    violation: float
    r_task: float
    r_comm: float
    r_pen: float
    r_total: float
    eps_cal: float

    def csv_row(self) -> list[str]:
        g = "" if self.gamma_real is None else repr(float(self.gamma_real))
        vals = (self.gamma_hat, None, self.loss, self.dloss, self.latency, float(np.sum(self.energy)),
                self.volume_bits, self.violation, self.r_task, self.r_comm, self.r_pen, self.r_total,
                self.eps_cal)
        return [str(self.round)] + [g if v is None else repr(float(v)) for v in vals]


@dataclass(frozen=True, eq=False)
class MetricsReport:
    final_gamma: float
    rta: dict
    energy_total: float
    latency_avg: float
    volume_total: float
    violation_avg: float
    gamma_trace: tuple
    reward_trace: tuple
    records: tuple = ()
    actions: tuple = ()
    final_loss: float = float("nan")
    seed: int = 0
    policy: str = ""
    config_hash: str = ""

    def csv_text(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(CSV_COLUMNS)
        for rec in self.records:
            wr.writerow(rec.csv_row())
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "final_gamma": self.final_gamma,
            "rta_60": format_rta(self.rta[0.6]),
            "rta_70": format_rta(self.rta[0.7]),
            "rta_80": format_rta(self.rta[0.8]),
            "energy_total_j": self.energy_total,
            "latency_avg_s": self.latency_avg,
            "volume_total_bits": self.volume_total,
            "violation_avg": self.violation_avg,
            "seed": self.seed,
            "policy": self.policy,
            "config_hash": self.config_hash,
            "final_loss": self.final_loss,
        }


# metrics ---------------------------------------------------------------------


def rta(gamma_trace, theta: float):
    """First 1-based round with gamma >= theta, or None when never reached."""
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie in (0, 1)")
    for t, g in enumerate(gamma_trace, 1):
        if g >= theta:
            return t
    return None


def format_rta(value) -> str | int:
    return UNREACHED if value is None else int(value)


def aggregate_metrics(records):
    """Total energy, mean latency, total uplink volume and mean violation."""
    if not records:
        raise ValueError("no round records")
    energy = float(sum(np.sum(r.energy) for r in records))
    latency = float(np.mean([r.latency for r in records]))
    volume = float(sum(r.volume_bits for r in records))
    viol = float(np.mean([r.violation for r in records]))
    return energy, latency, volume, viol


# baselines -------------------------------------------------------------------


def baseline_action(kind: str, state, cfg: SimConfig, rng: RngStream, *, terms: TerminalArrays | None = None,
                    geom=None) -> SystemAction:
    """Generic reference policies; every output goes through the projection."""
    n = cfg.n_terminals
    B, P, qmax = cfg.bandwidth_budget_hz, cfg.power_max_w, cfg.compression_max
    splits = np.asarray(cfg.split_set)
    if kind == "random_feasible":
        g = rng.generator()
        raw = SystemAction(g.uniform(0, B, n), g.uniform(0, P, n), g.choice(splits, n),
                           g.uniform(0, qmax, n), g.random(n) < 0.5)
    elif kind == "static_equal":
        raw = SystemAction(np.full(n, B / n), np.full(n, P / 2), np.full(n, splits[(len(splits) - 1) // 2]),
                           np.full(n, qmax / 2), np.ones(n, bool))
    elif kind == "greedy_channel":
        if terms is None or geom is None:
            raise ValueError("greedy_channel needs terminal arrays and geometry")
        raw = _greedy_channel(state, cfg, terms, geom)
    else:
        raise ValueError(f"{kind!r} is not a baseline")
    return project_action(raw, cfg, state.gain)


def _greedy_channel(state, cfg: SimConfig, terms: TerminalArrays, geom) -> SystemAction:
    n = cfg.n_terminals
    eff = np.asarray(state.gain) * np.asarray(state.fading_power)
    top = np.argsort(-eff, kind="stable")[: math.ceil(n / 2)]
    x = np.zeros(n, bool)
    x[top] = True
    b = np.where(x, eff, 0.0)
    b = cfg.bandwidth_budget_hz * b / b.sum()
    p = np.where(x, cfg.power_max_w, 0.0)
    budgets = cfg.memory_budgets()
    splits = np.asarray(cfg.split_set)
    fits = geom.mem(splits)[None, :] <= budgets[:, None]
    split = np.where(fits.any(axis=1), splits[np.argmax(fits, axis=1)], splits[0])
    r = rate(b, p, terms.gain, state.fading_power, cfg.noise_psd_w_per_hz)
    cp = cp_delay(terms.batch, geom.phi(split), terms.ops_per_cycle, terms.cpu_hz)
    q = np.full(n, cfg.compression_max)
    for cand in np.linspace(cfg.compression_max, 0.0, 10):
        ok = cp + 2.0 * np.asarray(tx_delay(terms.batch, geom.psi(split), cand, r)) <= cfg.deadline_s
        q = np.where(ok, cand, q)
    return SystemAction(b, p, split, q, x)


# episode ---------------------------------------------------------------------


@dataclass
class _Env:
    cfg: SimConfig
    terms: TerminalArrays
    geom: object
    system: PhysicalSystem
    trainer: SplitTrainer


def build_environment(cfg: SimConfig, root: RngStream, *, rate_efficiency=None, energy_bias=None,
                      separation: float | None = None) -> _Env:
    terms = TerminalArrays.from_profiles(make_terminals(cfg, root.fork("terminals")))
    geom = build_geometry(DEFAULT_WIDTHS, payload_scale=cfg.payload_scale, batch=cfg.batch_size)
    kw = {} if separation is None else {"separation": separation}
    data = make_dataset(cfg.n_terminals, cfg.shard_size, root.fork("data"), **kw)
    trainer = SplitTrainer(cfg, data, root.fork("model"))
    hw = root.fork("hardware").generator()
    eff = hw.uniform(0.6, 1.0, cfg.n_terminals) if rate_efficiency is None else rate_efficiency
    bias = hw.uniform(0.8, 1.3, cfg.n_terminals) if energy_bias is None else energy_bias
    system = PhysicalSystem(cfg, terms, geom, root.fork("channel"), eff, bias)
    return _Env(cfg, terms, geom, system, trainer)


def run_episode(cfg: SimConfig, policy, seed: int | None = None, *, rate_efficiency=None,
                energy_bias=None, plan_log: list | None = None, cal_log: list | None = None) -> MetricsReport:
    """Run one seeded episode of the round loop and collect its metrics.

    ``plan_log`` and ``cal_log`` collect CEM diagnostics and calibration
    residuals when given.
    """
    errors = validate_config(cfg)
    if errors:
        raise ConfigError("; ".join(errors))
    spec = PolicySpec.parse(policy)
    seed = cfg.master_seed if seed is None else int(seed)
    root = RngStream(seed)
    env = build_environment(cfg, root, rate_efficiency=rate_efficiency, energy_bias=energy_bias)
    terms, geom, system, trainer = env.terms, env.geom, env.system, env.trainer
    n = cfg.n_terminals
    weights = RewardWeights.from_config(cfg)
    omega = terms.batch / terms.batch.sum()

    policy_rng = root.fork("policy")
    round_rng = root.fork("rounds")
    actor = critic = sac = replay = None
    if spec.learns:
        actor = Actor(cfg, root.fork("actor"), split_bias=memory_split_bias(env.geom, cfg))
        critic = Critic(cfg, root.fork("critic"))
        sac = SacTrainer(actor, critic, SacHyper(discount=cfg.discount))
        replay = ReplayBuffer(cfg)
    sac_rng = root.fork("sac")
    warm = None

    gamma0 = trainer.evaluate()
    loss = loss0 = trainer.reference_loss()
    net = NetTwinParams.initial(n, system.channel.fading_power)
    train = TrainTwinParams.initial(5 * cfg.agg_interval)
    task = TaskTwinParams(gamma0, 1.0)
    fading_obs = system.channel.fading_power.copy()
    prev_b = np.zeros(n)
    grad_norms = np.zeros(n)
    gamma_hat = gamma0
    gamma_held = gamma0
    cum_dloss = 0.0
    loss_scale = loss0 if spec.loss_driven_reward else None

    records, actions, gamma_trace, reward_trace = [], [], [], []
    for t in range(1, cfg.n_rounds + 1):
        phase = "I"
        try:
            state = assemble_state(terms.gain, fading_obs, prev_b, loss, grad_norms, gamma_hat)
            snap = TwinSnapshot(net, train, task, terms, geom, cfg, loss_scale, weights)
            if spec.kind == "tilp":
                res = cem_plan(state, snap, actor, critic, cfg, policy_rng, warm_start=warm)
                raw = res.action
                warm = shift_plan(res.plan)
                if plan_log is not None:
                    plan_log.extend({"round": t, **d} for d in res.diagnostics)
            elif spec.kind == "actor_only":
                raw = actor_mean(actor, state)
            else:
                raw = baseline_action(spec.kind, state, cfg, policy_rng, terms=terms, geom=geom)
            action = project_action(raw, cfg, terms.gain)
            pred = predict_round(snap, state, action)

            phase = "II"
            system.step_channel()
            out = system.execute(action)
            stats = trainer.train_round(action, round_rng)
            new_loss = trainer.reference_loss()
            dloss = loss - new_loss

            phase = "III"
            if not spec.freeze_loop1:
                hind = replace(snap, net=replace(net, fading_power_est=out.fading_power))
                ph = predict_round(hind, state, action)
                before = float(np.mean(np.abs(np.log(np.maximum(out.latency, 1e-12) / ph.latency_hat))))
                net = calibrate_net(net, ph.tx_hat, ph.energy_hat, out.tx, out.energy, out.fading_power,
                                    action.scheduled)
                if cal_log is not None:
                    after = predict_round(replace(snap, net=net), state, action)
                    cal_log.append({"round": t, "loop": 1, "residual_pre": before,
                                    "residual_post": abs(math.log(max(out.latency, 1e-12) / after.latency_hat))})
            train = train.with_sample(train_features(action, loss, grad_norms, omega, cfg), dloss)
            if t % cfg.agg_interval == 0:
                trainer.aggregate()
                if not spec.freeze_loop2:
                    pre_w = train.weights
                    train = calibrate_train(train)
                    if cal_log is not None:
                        X = np.stack([f for f, _ in train.window])
                        y = np.array([d for _, d in train.window])
                        cal_log.append({"round": t, "loop": 2,
                                        "residual_pre": float(np.mean(np.abs(X @ pre_w - y))),
                                        "residual_post": float(np.mean(np.abs(X @ train.weights - y)))})
            cum_dloss += dloss
            gamma_real = None
            if t % cfg.eval_interval == 0:
                gamma_real = trainer.evaluate()
                dgamma = gamma_real - gamma_hat
                if not spec.freeze_loop3:
                    old = task
                    task = calibrate_task(task, gamma_hat, gamma_real, cum_dloss)
                    if cal_log is not None:
                        cal_log.append({"round": t, "loop": 3,
                                        "residual_pre": abs(gamma_hat - gamma_real),
                                        "residual_post": abs(task.gamma_cached - gamma_real),
                                        "sensitivity_pre": old.sensitivity})
                cum_dloss = 0.0
                gamma_held = gamma_real
            else:
                dgamma = float(_task_gain(task, dloss, gamma_hat))
            r_task = dloss / loss0 if spec.loss_driven_reward else dgamma
            rb = reward(r_task, out.latency, out.energy, out.violation, weights, cfg)
            realized = replace(out, dloss=dloss, dgamma=dgamma)
            eps = epsilon_cal(pred, realized) if np.isfinite(out.latency) else float("inf")

            gamma_hat = float(np.clip(gamma_hat + dgamma, 0.0, 1.0))
            prev_b = np.asarray(action.bandwidth).copy()
            grad_norms = stats.grad_norms
            fading_obs = out.fading_power
            loss = new_loss
            next_state = assemble_state(terms.gain, fading_obs, prev_b, loss, grad_norms, gamma_hat)

            if spec.learns:
                replay.add(ReplayEntry(state, action, float(rb.r_total), next_state, t == cfg.n_rounds, "real"))
                snap_next = TwinSnapshot(net, train, task, terms, geom, cfg, loss_scale, weights)
                for entry in imagine_rollout(actor, snap_next, next_state, cfg.imagine_len, sac_rng):
                    replay.add(entry)
                if len(replay.pools["real"]) >= SAC_WARMUP:
                    for _ in range(SAC_STEPS):
                        sac.update(replay.sample(SAC_BATCH, sac_rng), sac_rng)
        except EpisodeError:
            raise
        except Exception as exc:
            raise EpisodeError(f"round {t}, phase {phase}: {exc}") from exc

        records.append(RoundRecord(t, gamma_hat, gamma_real, loss, dloss, out.latency, out.energy,
                                   out.volume_bits, out.violation, float(rb.r_task), float(rb.r_comm),
                                   float(rb.r_pen), float(rb.r_total), eps))
        actions.append(action)
        gamma_trace.append(gamma_held)
        reward_trace.append(float(rb.r_total))

    final_gamma = trainer.evaluate()
    e_tot, lat, vol, viol = aggregate_metrics(records)
    return MetricsReport(
        final_gamma=final_gamma,
        rta={th: rta(gamma_trace, th) for th in RTA_THRESHOLDS},
        energy_total=e_tot,
        latency_avg=lat,
        volume_total=vol,
        violation_avg=viol,
        gamma_trace=tuple(gamma_trace),
        reward_trace=tuple(reward_trace),
        records=tuple(records),
        actions=tuple(actions),
        final_loss=trainer.pooled_loss(),
        seed=seed,
        policy=spec.label,
        config_hash=config_hash(cfg),
    )


# suite -----------------------------------------------------------------------


def write_report(report: MetricsReport, stem: Path, *, plan_log=None, cal_log=None) -> None:
    """Per-round CSV and JSON summary; diagnostics CSVs when logs are given."""
    stem = Path(stem)
    stem.with_suffix(".csv").write_text(report.csv_text())
    stem.with_suffix(".json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    if plan_log:
        _write_log(stem.with_name(stem.name + "_plan.csv"), PLAN_COLUMNS, plan_log)
    if cal_log:
        _write_log(stem.with_name(stem.name + "_calibration.csv"), CAL_COLUMNS, cal_log)


def _write_log(path: Path, columns, rows) -> None:
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(columns)
        for row in rows:
            wr.writerow([repr(v) if isinstance(v, float) else v for v in (row[c] for c in columns)])


def _median(values):
    vals = [v for v in values if isinstance(v, (int, float))]
    return float(np.median(vals)) if len(vals) == len(values) and vals else UNREACHED


def run_suite(manifest_path, out_dir, *, overwrite: bool = False) -> Path:
    """Run every (config, policy, seed) listed in a JSON manifest.

    Manifest layout::

        {"runs": [{"name": "tilp", "config": "desk.cfg", "policy": "tilp", "seeds": [0, 1, 2]}],
         "sweep": {"config": "desk.cfg", "policy": "static_equal", "field": "compression_max",
                   "values": [0.0, 0.3, 0.6, 0.9], "seeds": [0, 1, 2, 3, 4]}}

    Config paths are resolved relative to the manifest.
    """
    manifest_path = Path(manifest_path)
    spec = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    runs = list(spec.get("runs", []))
    sweep = spec.get("sweep")
    cfg_paths = [base / r["config"] for r in runs] + ([base / sweep["config"]] if sweep else [])
    missing = [str(p) for p in cfg_paths if not p.is_file()]
    if missing:
        raise FileNotFoundError(f"missing config file(s): {', '.join(missing)}")
    configs = [load_config(p) for p in cfg_paths]
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise FileExistsError(f"{out} is not empty; pass overwrite to replace it")
    out.mkdir(parents=True, exist_ok=True)

    table = []
    for r, cfg in zip(runs, configs):
        pol = PolicySpec.parse(r["policy"])
        name = r.get("name", pol.label)
        reports = []
        for seed in r["seeds"]:
            plan_log, cal_log = [], []
            rep = run_episode(cfg, pol, seed, plan_log=plan_log, cal_log=cal_log)
            write_report(rep, out / f"{name}_seed{seed}", plan_log=plan_log, cal_log=cal_log)
            reports.append(rep.summary())
        row = {"method": name, "n_seeds": len(reports)}
        for key in ("final_gamma", "rta_60", "rta_70", "rta_80", "energy_total_j", "latency_avg_s",
                    "volume_total_bits", "violation_avg", "final_loss"):
            row[key] = _median([s[key] for s in reports])
        table.append(row)
    if table:
        _write_table(out / "summary.csv", table)
    if sweep:
        cfg = configs[-1]
        rows = []
        for value, losses in sweep_final_loss(cfg, sweep["field"], sweep["values"], sweep["seeds"],
                                              sweep.get("policy", "static_equal")).items():
            rows.append({"field": sweep["field"], "value": value, "median_final_loss": float(np.median(losses)),
                         "n_seeds": len(losses)})
        _write_table(out / "sweep.csv", rows)
    return out


def _write_table(path: Path, rows) -> None:
    with path.open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        wr.writeheader()
        for row in rows:
            wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def sweep_final_loss(cfg: SimConfig, field_name: str, values, seeds, policy="static_equal") -> dict:
    """Final pooled training loss per swept value and seed."""
    out = {}
    for v in values:
        c = replace(cfg, **{field_name: type(getattr(cfg, field_name))(v)})
        out[v] = [run_episode(c, policy, s).final_loss for s in seeds]
    return out
