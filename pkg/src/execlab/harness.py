"""Experiment orchestration and persistence.

A single JSON config document describes an experiment (market parameters,
kind, learner/DQN settings, run count, seeds, output directory). Runs use
seeds base_seed + run_index; all artifacts are plain CSV/JSON written
deterministically, so re-running a sigma=0 config reproduces every file
byte for byte.
"""

from __future__ import annotations

import concurrent.futures as cf
import csv
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import benchmarks, diagnostics
from .dqn import DQNConfig, DQNRunResult, greedy_eval, train_ddqn_pair
from .market import Convention, MarketConfigError, MarketParams
from .networks import load_checkpoint, save_checkpoint
from .schedules import ScheduleLearnerConfig, ScheduleTrainingLog, train_schedule_learners
from .seeding import derive_seed

__all__ = [
    "ExperimentConfig",
    "ConfigError",
    "load_config",
    "config_from_dict",
    "save_config",
    "run_experiment",
    "derive_seed",
    "ENV_PREFIX",
]

ENV_PREFIX = "EXECLAB_"
KINDS = ("bench", "schedule-learn", "dqn-train", "eval", "diagnose", "sweep")


class ConfigError(ValueError):
    """Invalid experiment configuration; carries per-field violations."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "bench"
    runs: int = 1
    base_seed: int = 1000
    out_dir: str = "out/experiment"
    parallel: int = 1
    market: MarketParams = field(default_factory=MarketParams)
    dqn: DQNConfig = field(default_factory=DQNConfig)
    learner: ScheduleLearnerConfig = field(default_factory=ScheduleLearnerConfig)
    fix_opponent: str | None = None  # None | "agg-nash"
    sweep_horizons: tuple[int, ...] = (10000, 20000, 30000, 40000, 50000, 60000)
    eval_run_dir: str | None = None
    diagnose_dir: str | None = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "runs": self.runs,
            "base_seed": self.base_seed,
            "out_dir": self.out_dir,
            "parallel": self.parallel,
            "market": self.market.to_dict(),
            "dqn": self.dqn.to_dict(),
            "learner": self.learner.to_dict(),
            "fix_opponent": self.fix_opponent,
            "sweep_horizons": list(self.sweep_horizons),
            "eval_run_dir": self.eval_run_dir,
            "diagnose_dir": self.diagnose_dir,
        }


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Validate a raw config document, collecting violations by field path."""
    violations: list[str] = []
    known = set(ExperimentConfig.__dataclass_fields__)
    for key in doc:
        if key not in known:
            violations.append(f"{key}: unknown field")
    kwargs: dict = {}
    for section, cls in (("market", MarketParams), ("dqn", DQNConfig), ("learner", ScheduleLearnerConfig)):
        if section in doc:
            try:
                kwargs[section] = (
                    cls.from_dict(doc[section]) if hasattr(cls, "from_dict") else cls(**doc[section])
                )
            except TypeError as exc:
                violations.append(f"{section}: {exc}")
            except (MarketConfigError, ValueError) as exc:
                violations.append(f"{section}: {exc}")
    for key in ("kind", "runs", "base_seed", "out_dir", "parallel", "fix_opponent",
                "eval_run_dir", "diagnose_dir"):
        if key in doc:
            kwargs[key] = doc[key]
    if "sweep_horizons" in doc:
        kwargs["sweep_horizons"] = tuple(doc["sweep_horizons"])
    if kwargs.get("kind", "bench") not in KINDS:
        violations.append(f"kind: must be one of {KINDS}, got {kwargs.get('kind')!r}")
    if kwargs.get("runs", 1) < 1:
        violations.append("runs: must be >= 1")
    if kwargs.get("parallel", 1) < 1:
        violations.append("parallel: must be >= 1")
    if kwargs.get("fix_opponent") not in (None, "agg-nash"):
        violations.append("fix_opponent: must be null or 'agg-nash'")
    if violations:
        raise ConfigError(violations)
    return ExperimentConfig(**kwargs)


def _apply_env_overrides(doc: dict, environ=None) -> dict:
    """EXECLAB_SECTION__KEY=value (JSON literal or bare string) overrides."""
    environ = os.environ if environ is None else environ
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX):].lower().split("__")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value
    return doc


def load_config(path, apply_env: bool = True) -> ExperimentConfig:
    """Parse and validate a config file; environment overrides apply on top."""
    p = Path(path)
    if not p.exists():
        raise ConfigError([f"{path}: no such config file"])
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON ({exc})"])
    if apply_env:
        doc = _apply_env_overrides(doc)
    return config_from_dict(doc)


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# artifact writers (deterministic byte-for-byte at sigma=0)


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([x if isinstance(x, (str, int)) else repr(float(x)) for x in row])
    Path(path).write_text(buf.getvalue())


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _nash_point(market: MarketParams) -> float:
    table = benchmarks.benchmark_table(market)
    key = "agg_nash" if market.convention is Convention.AGGREGATE else "own_nash"
    return table["is_points"][key]


def _twap_point(market: MarketParams) -> float:
    table = benchmarks.benchmark_table(market)
    key = "twap_agg" if market.convention is Convention.AGGREGATE else "twap_own"
    return table["is_points"][key]


def write_dqn_run(run_dir: Path, res: DQNRunResult, bench_is: float) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    log = res.log
    rows = []
    for e in range(len(log["episode"])):
        pair = (log["is_p0"][e], log["is_p1"][e])
        rows.append(
            [e, log["eps"][e], pair[0], pair[1],
             diagnostics.classify_quadrant(pair, (bench_is, bench_is)),
             log["loss_p0"][e], log["loss_p1"][e]]
        )
    _write_csv(run_dir / "training_log.csv",
               ["episode", "eps", "is_p0", "is_p1", "quadrant", "loss_p0", "loss_p1"],
               rows)
    if len(log.get("ig", [])):
        _write_csv(run_dir / "ig_series.csv",
                   ["episode", "A_price", "A_inv", "A_time"],
                   [list(r) for r in log["ig"]])
    _write_json(run_dir / "test_stats.json", res.test.to_dict())
    _write_json(run_dir / "config.json",
                {"dqn": res.config.to_dict(), "market": res.market.to_dict(), "seed": res.seed})
    for i, ag in enumerate(res.agents):
        save_checkpoint(run_dir / f"checkpoint_agent{i}.npz", ag.net, ag.params)


def write_schedule_run(run_dir: Path, log: ScheduleTrainingLog, market: MarketParams) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    rows = [
        [u, log.is_pairs[u, 0], log.is_pairs[u, 1], log.grad_norms[u, 0], log.grad_norms[u, 1]]
        for u in range(log.n_updates_run)
    ]
    _write_csv(run_dir / "sched_log.csv",
               ["update", "is_p0", "is_p1", "grad_norm_p0", "grad_norm_p1"], rows)
    _write_json(run_dir / "final_schedules.json", {
        "seed": log.seed,
        "config": log.config.to_dict(),
        "market": market.to_dict(),
        "schedules": log.final_schedules.tolist(),
        "final_is": log.is_pairs[-1].tolist(),
        "n_updates_run": log.n_updates_run,
    })


# ---------------------------------------------------------------------------
# experiment kinds


def _limit_blas_threads():
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(1)
    except ImportError:
        pass


def _dqn_one_run(args):
    cfg_doc, run_idx, limit_threads = args
    if limit_threads:
        _limit_blas_threads()
    config = config_from_dict(cfg_doc)
    seed = config.base_seed + run_idx
    res = train_ddqn_pair(config.market, config.dqn, seed=seed)
    return run_idx, res


def _run_dqn_experiment(config: ExperimentConfig, out: Path) -> dict:
    bench_is = _nash_point(config.market)
    twap_is = _twap_point(config.market)
    results: dict[int, DQNRunResult] = {}
    failures: dict[int, str] = {}
    jobs = [(config.to_dict(), r, config.parallel > 1) for r in range(config.runs)]
    if config.parallel > 1:
        with cf.ProcessPoolExecutor(max_workers=config.parallel) as pool:
            futs = {pool.submit(_dqn_one_run, j): j[1] for j in jobs}
            for fut in cf.as_completed(futs):
                r = futs[fut]
                try:
                    _, res = fut.result()
                    results[r] = res
                except Exception as exc:  # record and continue
                    failures[r] = f"{type(exc).__name__}: {exc}"
    else:
        for j in jobs:
            try:
                r, res = _dqn_one_run(j)
                results[r] = res
            except Exception as exc:
                failures[j[1]] = f"{type(exc).__name__}: {exc}"
    per_run = {}
    is_pairs_by_run = []
    for r in sorted(results):
        res = results[r]
        write_dqn_run(out / f"run_{r}", res, bench_is)
        sw = [
            diagnostics.classify_quadrant(p, (bench_is, bench_is)) == "SW"
            for p in res.test.is_pairs
        ]
        per_run[str(r)] = {
            "seed": res.seed,
            "centroid": res.test.centroid.tolist(),
            "test_sw_share": float(np.mean(sw)),
        }
        is_pairs_by_run.append(res.test.is_pairs)
    summary = {
        "kind": "dqn-train",
        "benchmark_is": bench_is,
        "twap_is": twap_is,
        "runs": per_run,
        "failures": failures,
    }
    if is_pairs_by_run:
        cents, d_n, d_t = diagnostics.centroid_distances(
            is_pairs_by_run, (bench_is / config.market.n_slices,) * 2,
            (twap_is / config.market.n_slices,) * 2, config.market.n_slices,
        )
        summary["centroids"] = cents.tolist()
        summary["d_nash"] = d_n
        summary["d_twap"] = d_t
    return summary


def _sched_one_run(args):
    cfg_doc, run_idx, limit_threads = args
    if limit_threads:
        _limit_blas_threads()
    config = config_from_dict(cfg_doc)
    fixed = None
    if config.fix_opponent == "agg-nash":
        fixed = benchmarks.agg_nash_grid_schedule(config.market, player=1).trades
    log = train_schedule_learners(
        config.market, config.learner, seed=config.base_seed + run_idx, fixed_opponent=fixed
    )
    return run_idx, log


def _run_schedule_experiment(config: ExperimentConfig, out: Path) -> dict:
    market = config.market
    agg_path = benchmarks.agg_nash_grid_schedule(market).trades
    own_path = benchmarks.own_nash_grid_schedule(market).trades
    bench_is = _nash_point(market)
    results: dict[int, ScheduleTrainingLog] = {}
    failures: dict[int, str] = {}
    jobs = [(config.to_dict(), r, config.parallel > 1) for r in range(config.runs)]
    if config.parallel > 1:
        with cf.ProcessPoolExecutor(max_workers=config.parallel) as pool:
            futs = {pool.submit(_sched_one_run, j): j[1] for j in jobs}
            for fut in cf.as_completed(futs):
                r = futs[fut]
                try:
                    _, log = fut.result()
                    results[r] = log
                except Exception as exc:
                    failures[r] = f"{type(exc).__name__}: {exc}"
    else:
        for j in jobs:
            try:
                r, log = _sched_one_run(j)
                results[r] = log
            except Exception as exc:
                failures[j[1]] = f"{type(exc).__name__}: {exc}"
    per_run = {}
    for r in sorted(results):
        log = results[r]
        write_schedule_run(out / f"run_{r}", log, market)
        v0 = log.final_schedules[0]
        per_run[str(r)] = {
            "seed": log.seed,
            "final_is": log.is_pairs[-1].tolist(),
            "final_is_rel_bench": float(abs(log.is_pairs[-1, 0] - bench_is) / bench_is),
            "l2_to_agg_path": float(np.linalg.norm(v0 - agg_path)),
            "l2_to_own_path": float(np.linalg.norm(v0 - own_path)),
            "n_updates_run": log.n_updates_run,
        }
    return {
        "kind": "schedule-learn",
        "benchmark_is": bench_is,
        "convention": market.convention.value,
        "fix_opponent": config.fix_opponent,
        "runs": per_run,
        "failures": failures,
    }


def _run_eval(config: ExperimentConfig, out: Path) -> dict:
    from .dqn import DQNAgent

    if not config.eval_run_dir:
        raise ConfigError(["eval_run_dir: required for kind=eval"])
    run_dir = Path(config.eval_run_dir)
    run_cfg = json.loads((run_dir / "config.json").read_text())
    market = MarketParams.from_dict(run_cfg["market"])
    dqn_cfg = DQNConfig.from_dict(run_cfg["dqn"])
    seed = run_cfg["seed"]
    agents = []
    for i in range(market.n_players):
        net, params = load_checkpoint(run_dir / f"checkpoint_agent{i}.npz")
        ag = DQNAgent(dqn_cfg, market, i, seed)
        ag.params = params
        ag.target = params.copy()
        agents.append(ag)
    stats = greedy_eval(agents, market, config.dqn.test_episodes, seed)
    _write_json(out / "test_stats_eval.json", stats.to_dict())
    return {"kind": "eval", "centroid": stats.centroid.tolist(), "run_dir": str(run_dir)}


def _run_diagnose(config: ExperimentConfig, out: Path) -> dict:
    """Post-process a finished dqn experiment directory."""
    src = Path(config.diagnose_dir or config.out_dir)
    bench_is = _nash_point(config.market)
    twap_is = _twap_point(config.market)
    n = config.market.n_slices
    bench = (bench_is, bench_is)
    runs = sorted(p for p in src.glob("run_*") if (p / "training_log.csv").exists())
    if not runs:
        raise ConfigError([f"diagnose_dir: no run_*/training_log.csv under {src}"])
    is_pairs_by_run = []
    occupancy = {}
    for run_dir in runs:
        rows = list(csv.DictReader((run_dir / "training_log.csv").open()))
        pairs = [(float(r["is_p0"]), float(r["is_p1"])) for r in rows]
        labels = [diagnostics.classify_quadrant(p, bench) for p in pairs]
        _write_csv(out / run_dir.name / "quadrants.csv", ["episode", "quadrant", "rolling_sw"],
                   [[i, l, s] for i, (l, s) in
                    enumerate(zip(labels, diagnostics.rolling_share(labels)))])
        tail = labels[-500:]
        occ, trans = diagnostics.transition_stats(tail)
        occupancy[run_dir.name] = occ.tolist()
        _write_json(out / run_dir.name / "transitions.json", {
            "quadrants": list(diagnostics.QUADRANTS),
            "occupancy": occ.tolist(),
            "transitions": [[None if np.isnan(x) else x for x in row] for row in trans],
            "tail_episodes": len(tail),
        })
        stats = json.loads((run_dir / "test_stats.json").read_text())
        is_pairs_by_run.append(np.asarray(stats["is_pairs"]))
        paths = np.asarray(stats["inventory_paths"])
        _write_csv(out / run_dir.name / "paths.csv",
                   ["t", "q_mean_p0", "q_mean_p1"],
                   [[t, paths[t, 0], paths[t, 1]] for t in range(len(paths))])
    cents, d_n, d_t = diagnostics.centroid_distances(
        is_pairs_by_run, (bench_is / n,) * 2, (twap_is / n,) * 2, n
    )
    episodes = len(is_pairs_by_run[0])
    _write_csv(out / "distances.csv", ["episodes", "d_nash", "d_twap"],
               [[episodes, d_n, d_t]])
    return {
        "kind": "diagnose",
        "runs": [r.name for r in runs],
        "occupancy": occupancy,
        "d_nash": d_n,
        "d_twap": d_t,
    }


def _run_sweep(config: ExperimentConfig, out: Path) -> dict:
    rows = []
    per_horizon = {}
    for e in config.sweep_horizons:
        sub_doc = config.to_dict()
        sub_doc["kind"] = "dqn-train"
        sub_doc["dqn"]["episodes"] = int(e)
        sub_doc["out_dir"] = str(out / f"E_{e}")
        sub = config_from_dict(sub_doc)
        summary = _run_dqn_experiment(sub, Path(sub.out_dir))
        _write_json(Path(sub.out_dir) / "summary.json", summary)
        per_horizon[str(e)] = {"d_nash": summary.get("d_nash"), "d_twap": summary.get("d_twap")}
        rows.append([int(e), summary.get("d_nash", float("nan")), summary.get("d_twap", float("nan"))])
    _write_csv(out / "distances.csv", ["episodes", "d_nash", "d_twap"], rows)
    return {"kind": "sweep", "horizons": per_horizon}


def run_experiment(config: ExperimentConfig):
    """Execute all runs of the configured experiment and persist artifacts."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.json")
    if config.kind == "bench":
        table = benchmarks.benchmark_table(config.market)
        _write_json(out / "benchmark.json", table)
        summary = {"kind": "bench", **{k: table[k] for k in ("beta_agg", "beta_own", "rho", "is_points")}}
    elif config.kind == "dqn-train":
        summary = _run_dqn_experiment(config, out)
    elif config.kind == "schedule-learn":
        summary = _run_schedule_experiment(config, out)
    elif config.kind == "eval":
        summary = _run_eval(config, out)
    elif config.kind == "diagnose":
        summary = _run_diagnose(config, out)
    elif config.kind == "sweep":
        summary = _run_sweep(config, out)
    else:  # pragma: no cover - guarded by validation
        raise ConfigError([f"kind: unhandled {config.kind!r}"])
    _write_json(out / "summary.json", summary)
    return summary
