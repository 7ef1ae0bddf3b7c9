"""Scenario catalogue, episode runner and replicated experiments.

Trace CSV columns (one row per recorded round per replication)::

    round,context,arm,phase,inst_regret,cum_regret,replication,policy,seed

Summary CSV columns::

    round,policy,mean_cum_regret,stderr,reps

Floats are written with 17 significant digits, UTF-8, LF line endings.
``arm`` is the registry index of the played vector; ``phase`` is ``na``
for policies without phases.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .instance import (
    BanditInstance,
    RegretTrace,
    build_registry,
    sample_context,
    validate_instance,
)
from .policies import OAM, POLICY_NAMES, Policy, make_policy

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ("round", "context", "arm", "phase", "inst_regret", "cum_regret", "replication", "policy", "seed")
SUMMARY_COLUMNS = ("round", "policy", "mean_cum_regret", "stderr", "reps")

SCENARIOS = ("fixed-u", "changing-one", "changing-two", "span-bounded", "sphere", "random-theta")
# scenarios whose instance is redrawn for every replication
PER_REPLICATION = frozenset({"random-theta"})


class ConfigError(ValueError):
    pass


class TraceSchemaError(ValueError):
    pass


class EpisodeError(RuntimeError):
    pass


class ExperimentError(RuntimeError):
    def __init__(self, policy: str, replication: int, seed: int, cause: BaseException):
        super().__init__(f"policy={policy} replication={replication} seed={seed}: {cause}")
        self.policy, self.replication, self.seed = policy, replication, seed


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def sphere_arms(k: int, d: int, seed: int) -> np.ndarray:
    g = np.random.default_rng(seed).standard_normal((k, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def builtin_scenario(name: str, params: dict | None = None) -> BanditInstance:
    """Instances from the experiment catalogue.

    ``fixed-u`` takes ``u``; ``sphere`` takes ``k``, ``d`` and ``arm_seed``;
    ``random-theta`` also takes ``seed`` (for theta).
    """
    params = dict(params or {})
    if name == "fixed-u":
        u = float(params.get("u", 0.1))
        return BanditInstance.from_arrays([1.0, 0.0], [[[1.0, 0.0], [0.0, 1.0], [1.0 - u, 5.0 * u]]])
    if name == "changing-one":
        return BanditInstance.from_arrays(
            [1.0, 0.0, 1.0],
            [
                [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.9, 0.5, 0.0]],
                [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.5, 0.9]],
            ],
            [0.3, 0.7],
        )
    if name in ("changing-two", "span-bounded"):
        probs = [0.99, 0.01] if name == "changing-two" else [0.8, 0.2]
        return BanditInstance.from_arrays(
            [1.0, 0.0],
            [[[1.0, 0.0], [0.0, 1.0], [0.9, 0.5]], [[0.0, 1.0], [-1.0, 0.0], [-1.0, 0.0]]],
            probs,
        )
    if name in ("sphere", "random-theta"):
        k = int(params.get("k", 100))
        d = int(params.get("d", 2))
        if k < d or d < 1:
            raise ConfigError(f"{name}: need k >= d >= 1, got k={k}, d={d}")
        arms = sphere_arms(k, d, int(params.get("arm_seed", 0)))
        if name == "sphere":
            theta = np.zeros(d)
            theta[0] = 1.0
        else:
            theta = np.random.default_rng(int(params.get("seed", 0))).normal(0.0, np.sqrt(10.0), d)
            theta /= np.linalg.norm(theta)
        return BanditInstance.from_arrays(theta, [arms])
    raise ConfigError(f"unknown scenario '{name}'; choose from {', '.join(SCENARIOS)}")


def run_episode(
    instance: BanditInstance,
    policy: str,
    horizon: int,
    seed: int,
    params: dict | None = None,
) -> RegretTrace:
    """Play ``horizon`` rounds of ``policy`` on ``instance``.

    Contexts, reward noise and the policy's own randomness come from three
    independent streams spawned from ``seed``, so every policy sees the same
    contexts and noise for a given seed.
    """
    ctx_ss, noise_ss, pol_ss = np.random.SeedSequence(seed).spawn(3)
    contexts = np.asarray(sample_context(instance, np.random.default_rng(ctx_ss), size=horizon))
    noise = np.random.default_rng(noise_ss).standard_normal(horizon)
    sets = [ctx.arms for ctx in instance.contexts]
    pol: Policy = make_policy(policy, sets, horizon, np.random.default_rng(pol_ss), **(params or {}))

    registry = build_registry(instance)
    means = [instance.means(m) for m in range(instance.num_contexts)]
    best = [mu.max() for mu in means]
    theta = instance.theta

    local = np.empty(horizon, dtype=np.int64)
    reg = np.empty(horizon, dtype=np.int64)
    inst = np.empty(horizon)
    realized = np.empty(horizon)
    phases: list[str] = []
    for t in range(1, horizon + 1):
        m = int(contexts[t - 1])
        arms = sets[m]
        try:
            k = pol.select(m, arms, t)
            if not 0 <= k < arms.shape[0]:
                raise IndexError(f"policy returned arm {k} for a set of size {arms.shape[0]}")
            x = arms[k]
            y = float(x @ theta + noise[t - 1])
            pol.observe(x, y)
        except Exception as exc:
            raise EpisodeError(f"{policy} failed at round {t} (context {m}): {exc}") from exc
        local[t - 1] = k
        reg[t - 1] = registry.context_index[m][k]
        inst[t - 1] = best[m] - means[m][k]
        realized[t - 1] = best[m] - y
        phases.append(pol.last_phase)
    meta = {}
    if isinstance(pol, OAM):
        meta = {"oam_log": pol.log, "num_solves": pol.num_solves, "registry_size": len(pol.registry)}
    return RegretTrace(contexts.astype(np.int64), reg, local, inst, realized, phases, meta)


@dataclass
class ScenarioConfig:
    scenario: str
    horizon: int
    reps: int = 1
    seed: int = 0
    algos: list[str] = field(default_factory=lambda: ["oam", "linucb"])
    scenario_params: dict = field(default_factory=dict)
    policy_params: dict = field(default_factory=dict)
    out_dir: str | None = None
    stride: int = 1
    jobs: int = 1
    keep_traces: bool = False

    def instance(self, replication_seed: int | None = None) -> BanditInstance:
        if Path(self.scenario).suffix == ".json" or Path(self.scenario).is_file():
            try:
                return BanditInstance.load(self.scenario)
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot load instance '{self.scenario}': {exc}") from exc
        params = dict(self.scenario_params)
        if replication_seed is not None and self.scenario in PER_REPLICATION:
            params["seed"] = replication_seed
        return builtin_scenario(self.scenario, params)

    def validate(self) -> None:
        inst = self.instance(self.seed)
        report = validate_instance(inst)
        if not report.ok:
            raise ConfigError("invalid instance: " + "; ".join(report.failures))
        if self.horizon < inst.d:
            raise ConfigError(f"horizon {self.horizon} is shorter than d={inst.d}")
        if self.reps < 1:
            raise ConfigError("reps must be at least 1")
        if self.stride < 1:
            raise ConfigError("stride must be at least 1")
        for name in self.algos:
            if name not in POLICY_NAMES:
                raise ConfigError(f"unknown policy '{name}'; choose from {', '.join(POLICY_NAMES)}")


def recorded_rounds(horizon: int, stride: int) -> np.ndarray:
    rounds = np.arange(stride, horizon + 1, stride)
    if rounds.size == 0 or rounds[-1] != horizon:
        rounds = np.append(rounds, horizon)
    return rounds


@dataclass
class ExperimentSummary:
    rounds: np.ndarray
    mean: dict[str, np.ndarray]
    stderr: dict[str, np.ndarray]
    reps: dict[str, int]
    phase_totals: dict[str, dict[str, int]]
    wall_clock: dict[str, float]
    final_realized: dict[str, float]
    traces: dict[str, list[RegretTrace]] = field(default_factory=dict)

    def join(self, policy: str, rounds, mean, stderr=None, reps: int = 0) -> None:
        """Add an external series, resampled onto ``self.rounds``."""
        self.mean[policy] = step_resample(rounds, mean, self.rounds)
        se = np.zeros_like(mean) if stderr is None else stderr
        self.stderr[policy] = step_resample(rounds, se, self.rounds)
        self.reps[policy] = reps

    def to_json(self) -> dict:
        return {
            "final_mean_cum_regret": {p: float(v[-1]) for p, v in self.mean.items()},
            "final_stderr": {p: float(v[-1]) for p, v in self.stderr.items()},
            "final_mean_realized_regret": self.final_realized,
            "reps": self.reps,
            "phase_totals": self.phase_totals,
            "wall_clock_seconds": self.wall_clock,
        }


def aggregate(cum: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error across replications (rows)."""
    R = cum.shape[0]
    mean = cum.mean(axis=0)
    if R == 1:
        return mean, np.zeros_like(mean)
    return mean, cum.std(axis=0, ddof=1) / np.sqrt(R)


def _episode_job(args):
    cfg, policy, r = args
    seed = cfg.seed + r
    inst = cfg.instance(seed)
    params = dict(cfg.policy_params.get(policy, {}))
    try:
        return run_episode(inst, policy, cfg.horizon, seed, params)
    except Exception as exc:
        raise ExperimentError(policy, r, seed, exc) from exc


def run_experiment(cfg: ScenarioConfig) -> ExperimentSummary:
    """Run ``cfg.reps`` episodes per policy and aggregate them.

    Replication ``r`` uses seed ``cfg.seed + r`` for every policy. Writes
    ``trace.csv``, ``summary.csv`` and ``summary.json`` when ``out_dir`` is set.
    """
    cfg.validate()
    rounds = recorded_rounds(cfg.horizon, cfg.stride)
    idx = rounds - 1
    summary = ExperimentSummary(rounds, {}, {}, {}, {}, {}, {})
    trace_rows: list[list[str]] = []
    for policy in cfg.algos:
        start = time.perf_counter()
        jobs = [(cfg, policy, r) for r in range(cfg.reps)]
        if cfg.jobs > 1:
            with ProcessPoolExecutor(cfg.jobs) as pool:
                traces = list(pool.map(_episode_job, jobs))
        else:
            traces = [_episode_job(j) for j in jobs]
        summary.wall_clock[policy] = time.perf_counter() - start
        cum = np.vstack([tr.cum_regret[idx] for tr in traces])
        summary.mean[policy], summary.stderr[policy] = aggregate(cum)
        summary.reps[policy] = cfg.reps
        summary.final_realized[policy] = float(np.mean([tr.cum_realized_regret[-1] for tr in traces]))
        if policy == "oam":
            totals: dict[str, int] = {}
            for tr in traces:
                for ph, n in tr.phase_counts().items():
                    totals[ph] = totals.get(ph, 0) + n
            summary.phase_totals[policy] = totals
        if cfg.keep_traces:
            summary.traces[policy] = traces
        for r, tr in enumerate(traces):
            trace_rows.extend(_trace_rows(tr, idx, r, policy, cfg.seed + r))
        logger.info("%s: %d reps in %.1fs", policy, cfg.reps, summary.wall_clock[policy])
    if cfg.out_dir is not None:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "trace.csv", TRACE_COLUMNS, trace_rows)
        write_summary_csv(out / "summary.csv", summary)
        (out / "summary.json").write_text(json.dumps(summary.to_json(), indent=2) + "\n", encoding="utf-8")
    return summary


def _trace_rows(tr: RegretTrace, idx: np.ndarray, replication: int, policy: str, seed: int):
    cum = tr.cum_regret
    for i in idx:
        yield [
            str(i + 1), str(tr.contexts[i]), str(tr.arms[i]), tr.phases[i],
            _fmt(tr.inst_regret[i]), _fmt(cum[i]), str(replication), policy, str(seed),
        ]


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_trace_csv(path, trace: RegretTrace, policy: str, replication: int = 0, seed: int = 0, stride: int = 1) -> None:
    idx = recorded_rounds(trace.horizon, stride) - 1
    _write_csv(Path(path), TRACE_COLUMNS, _trace_rows(trace, idx, replication, policy, seed))


def write_summary_csv(path, summary: ExperimentSummary) -> None:
    rows = []
    for policy in summary.mean:
        for t, mu, se in zip(summary.rounds, summary.mean[policy], summary.stderr[policy]):
            rows.append([str(t), policy, _fmt(mu), _fmt(se), str(summary.reps[policy])])
    _write_csv(Path(path), SUMMARY_COLUMNS, rows)


def step_resample(rounds, values, targets) -> np.ndarray:
    """Value at the last recorded round <= each target (0 before the first)."""
    rounds = np.asarray(rounds)
    values = np.asarray(values, dtype=float)
    pos = np.searchsorted(rounds, np.asarray(targets), side="right") - 1
    out = np.where(pos >= 0, values[np.clip(pos, 0, None)], 0.0)
    return out


@dataclass
class ExternalSeries:
    rounds: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    reps: int


def import_external_trace(path, stride: int | None = None, horizon: int | None = None) -> dict[str, ExternalSeries]:
    """Read a trace CSV and return the per-round mean cumulative regret per policy.

    With ``stride``, each series is resampled onto ``recorded_rounds(horizon, stride)``
    by step-function interpolation.
    """
    data: dict[str, dict[int, dict[int, float]]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TraceSchemaError(f"{path}: line 1: empty file") from None
        for col in TRACE_COLUMNS:
            if col not in header:
                raise TraceSchemaError(f"{path}: line 1: missing column '{col}'")
        pos = {c: header.index(c) for c in TRACE_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise TraceSchemaError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                t = int(row[pos["round"]])
                rep = int(row[pos["replication"]])
                cum = float(row[pos["cum_regret"]])
            except ValueError as exc:
                raise TraceSchemaError(f"{path}: line {lineno}: {exc}") from None
            data.setdefault(row[pos["policy"]], {}).setdefault(rep, {})[t] = cum
    out = {}
    for policy, by_rep in data.items():
        rounds = np.array(sorted(set().union(*[set(v) for v in by_rep.values()])))
        cum = np.vstack([step_resample(sorted(v), [v[k] for k in sorted(v)], rounds) for v in by_rep.values()])
        mean, se = aggregate(cum)
        if stride is not None:
            targets = recorded_rounds(horizon if horizon is not None else int(rounds[-1]), stride)
            mean, se = step_resample(rounds, mean, targets), step_resample(rounds, se, targets)
            rounds = targets
        out[policy] = ExternalSeries(rounds, mean, se, len(by_rep))
    return out
