"""Command-line front end.

Configuration is a TOML file whose keys are read as flat dotted names
(``env.kind``, ``plan.n0``, ...). Unknown keys are errors. Every command
echoes the fully defaulted configuration to ``effective_config.toml`` in the
output directory; running that file again reproduces the results.

Exit codes: 0 on success, 1 on configuration errors, 2 on runtime failures
(with whatever rows were produced already written out).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import math
import os
import statistics
import sys
import warnings
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .diagnostics import DELTA0_GRID, SIGMA_GRID, STUDY_ESTIMATORS, STUDY_SHIFTS, distance_sweep, estimator_study
from .engine import RUNNERS, LambdaRule, RolloutPlan, RunError, RunResult, reference_loss, run_many, skyline_model
from .env import ENV_KINDS
from .objective import LAMBDA_GRID, ObjectiveConfig
from .optimizer import OptimizerConfig
from .policy import PolicySpec, WeightBoundWarning

SCHEMA_LINE = "# scrm-lab schema v1"
RUN_COLUMNS = ["run_id", "seed", "method", "m", "n_m", "cum_n", "lambda", "test_loss", "excess_risk", "regret_partial"]
STUDY_COLUMNS = ["shift", "estimator", "n", "replications", "bias", "variance", "truth"]
THREADS_ENV = "SCRM_LAB_THREADS"

_POLICY_KEYS = ("family", "sigma", "epsilon", "action_bits", "weight_bound")
_OBJECTIVE_KEYS = ("delta", "complexity_dim")
_RUN_DEFAULTS = {"methods": ["crm", "scrm"], "seeds": [0], "output": "results"}
_STUDY_DEFAULTS = {
    "shifts": list(STUDY_SHIFTS),
    "estimators": [e.value for e in STUDY_ESTIMATORS],
    "n": 1000,
    "replications": 500,
    "seed": 0,
}
_SWEEP_DEFAULTS = {
    "kind": "lambda",
    "lambda_grid": list(LAMBDA_GRID),
    "delta0_grid": list(DELTA0_GRID),
    "sigma_grid": list(SIGMA_GRID),
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


# config parsing


def _flatten(table: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat = {}
    for key, value in table.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def _check_type(name: str, value, default):
    """Coerce ``value`` to the type of ``default`` or raise."""
    if isinstance(default, Enum):
        try:
            return type(default)(value)
        except ValueError:
            allowed = [e.value for e in type(default)]
            raise ConfigError(f"{name}: {value!r} is not one of {allowed}") from None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and default is not None:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    if isinstance(default, (list, tuple)):
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        return list(value)
    return value


def _section(flat: Dict[str, Any], section: str) -> Dict[str, Any]:
    pre = section + "."
    return {k[len(pre):]: v for k, v in flat.items() if k.startswith(pre)}


def _build(cls, name: str, given: Dict[str, Any], allowed: Optional[Sequence[str]] = None, base=None):
    """Instantiate a dataclass from config values, type-checked against its defaults."""
    base = base if base is not None else cls()
    fields = [f.name for f in dataclasses.fields(cls) if f.init]
    allowed = list(allowed) if allowed is not None else fields
    values = {}
    for key, value in given.items():
        if key not in allowed:
            raise ConfigError(f"{name}.{key}: unknown key (allowed: {', '.join(allowed)})")
        values[key] = _check_type(f"{name}.{key}", value, getattr(base, key))
    try:
        return dataclasses.replace(base, **values)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def _list_of(name: str, values, kind) -> list:
    out = []
    for v in values:
        if kind is float and isinstance(v, (int, float)) and not isinstance(v, bool):
            out.append(float(v))
        elif kind is int and isinstance(v, int) and not isinstance(v, bool):
            out.append(v)
        elif kind is str and isinstance(v, str):
            out.append(v)
        else:
            raise ConfigError(f"{name}: bad entry {v!r}")
    return out


@dataclasses.dataclass
class ExperimentConfig:
    env: Any = None
    policy: Optional[PolicySpec] = None
    theta0: Optional[List[float]] = None
    plan: RolloutPlan = RolloutPlan()
    objective: ObjectiveConfig = ObjectiveConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    methods: List[str] = dataclasses.field(default_factory=lambda: list(_RUN_DEFAULTS["methods"]))
    seeds: List[int] = dataclasses.field(default_factory=lambda: list(_RUN_DEFAULTS["seeds"]))
    output: str = _RUN_DEFAULTS["output"]
    study: Dict[str, Any] = dataclasses.field(default_factory=lambda: dict(_STUDY_DEFAULTS))
    sweep: Dict[str, Any] = dataclasses.field(default_factory=lambda: dict(_SWEEP_DEFAULTS))


def parse_config(text: str, need_env: bool = True) -> ExperimentConfig:
    """Parse and validate a config document."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"parse error: {exc}") from None
    flat = _flatten(raw)
    sections = {"env", "policy", "plan", "objective", "optimizer", "run", "estimators", "sweep"}
    for key in flat:
        if key.split(".")[0] not in sections or "." not in key:
            raise ConfigError(f"{key}: unknown key")
    cfg = ExperimentConfig()

    env_keys = _section(flat, "env")
    if env_keys or need_env:
        kind = env_keys.pop("kind", None)
        if kind is None:
            raise ConfigError("env.kind: missing required field")
        if kind not in ENV_KINDS:
            raise ConfigError(f"env.kind: {kind!r} is not one of {sorted(ENV_KINDS)}")
        cls = ENV_KINDS[kind]
        cfg.env = _build(cls, "env", env_keys)

        pol = _section(flat, "policy")
        theta0 = pol.pop("theta0", None)
        cfg.policy = _build(PolicySpec, "policy", pol, _POLICY_KEYS, base=cfg.env.default_policy())
        default_theta = cfg.env.logging_theta().tolist()
        if theta0 is None:
            cfg.theta0 = default_theta
        else:
            cfg.theta0 = _list_of("policy.theta0", _check_type("policy.theta0", theta0, []), float)
            if len(cfg.theta0) != len(default_theta):
                raise ConfigError(f"policy.theta0: expected {len(default_theta)} entries, got {len(cfg.theta0)}")
    elif _section(flat, "policy"):
        raise ConfigError("env.kind: missing required field")

    plan = _section(flat, "plan")
    if "cv_candidates" in plan:
        plan["cv_candidates"] = _list_of("plan.cv_candidates", _check_type("plan.cv_candidates", plan["cv_candidates"], []), float)
    cfg.plan = _build(RolloutPlan, "plan", plan)
    obj = _section(flat, "objective")
    if "complexity_dim" in obj:
        # the default is None, so type-check against an integer
        _check_type("objective.complexity_dim", obj["complexity_dim"], 0)
    cfg.objective = _build(ObjectiveConfig, "objective", obj, _OBJECTIVE_KEYS)
    cfg.optimizer = _build(OptimizerConfig, "optimizer", _section(flat, "optimizer"))

    run = _section(flat, "run")
    for key, value in run.items():
        if key not in _RUN_DEFAULTS:
            raise ConfigError(f"run.{key}: unknown key (allowed: {', '.join(_RUN_DEFAULTS)})")
        _check_type(f"run.{key}", value, _RUN_DEFAULTS[key])
    if "methods" in run:
        cfg.methods = _list_of("run.methods", run["methods"], str)
        for method in cfg.methods:
            if method not in RUNNERS:
                raise ConfigError(f"run.methods: {method!r} is not one of {sorted(RUNNERS)}")
        if not cfg.methods:
            raise ConfigError("run.methods: empty")
    if "seeds" in run:
        cfg.seeds = _list_of("run.seeds", run["seeds"], int)
    if "output" in run:
        cfg.output = run["output"]

    for key, value in _section(flat, "estimators").items():
        if key not in _STUDY_DEFAULTS:
            raise ConfigError(f"estimators.{key}: unknown key (allowed: {', '.join(_STUDY_DEFAULTS)})")
        kind = {"shifts": float, "estimators": str}.get(key)
        value = _check_type(f"estimators.{key}", value, _STUDY_DEFAULTS[key])
        cfg.study[key] = _list_of(f"estimators.{key}", value, kind) if kind else value

    for key, value in _section(flat, "sweep").items():
        if key not in _SWEEP_DEFAULTS:
            raise ConfigError(f"sweep.{key}: unknown key (allowed: {', '.join(_SWEEP_DEFAULTS)})")
        value = _check_type(f"sweep.{key}", value, _SWEEP_DEFAULTS[key])
        cfg.sweep[key] = value if key == "kind" else _list_of(f"sweep.{key}", value, float)
    if cfg.sweep["kind"] not in ("lambda", "distance"):
        raise ConfigError(f"sweep.kind: {cfg.sweep['kind']!r} is not one of ['distance', 'lambda']")
    return cfg


def _plain(value):
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return list(value)
    return value


def effective_config(cfg: ExperimentConfig) -> Dict[str, Any]:
    """Fully defaulted config as a nested dict suitable for TOML output."""
    doc: Dict[str, Any] = {}
    if cfg.env is not None:
        env = {"kind": cfg.env.kind}
        env.update({f.name: _plain(getattr(cfg.env, f.name)) for f in dataclasses.fields(cfg.env) if f.init})
        doc["env"] = env
        policy = {k: _plain(getattr(cfg.policy, k)) for k in _POLICY_KEYS}
        policy["theta0"] = list(cfg.theta0)
        doc["policy"] = policy
    doc["plan"] = {f.name: _plain(getattr(cfg.plan, f.name)) for f in dataclasses.fields(RolloutPlan)}
    doc["objective"] = {"delta": cfg.objective.delta}
    if cfg.objective.complexity_dim is not None:
        doc["objective"]["complexity_dim"] = cfg.objective.complexity_dim
    doc["optimizer"] = {f.name: _plain(getattr(cfg.optimizer, f.name)) for f in dataclasses.fields(OptimizerConfig)}
    doc["run"] = {"methods": list(cfg.methods), "seeds": list(cfg.seeds), "output": cfg.output}
    doc["estimators"] = {k: _plain(v) for k, v in cfg.study.items()}
    doc["sweep"] = {k: _plain(v) for k, v in cfg.sweep.items()}
    return doc


# output helpers


def fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".12g")
    return str(value)


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[Sequence], comments: Sequence[str] = ()) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(SCHEMA_LINE + "\n")
        for line in comments:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def run_rows(result: RunResult) -> List[list]:
    run_id = f"{result.method}-{result.seed}"
    rows = []
    partial = result.regret_partial()
    for rec, regret in zip(result.records, partial):
        rows.append([run_id, result.seed, result.method, rec.m, rec.n_m, rec.cum_n, rec.lam, rec.test_loss, rec.excess_risk, regret])
    if result.records:
        fin = result.final
        rows.append([run_id, result.seed, result.method, "summary", "", fin.cum_n, "", fin.test_loss, fin.excess_risk, partial[-1]])
    return rows


def parse_seeds(text: str) -> List[int]:
    """``"0,1,5-7"`` -> ``[0, 1, 5, 6, 7]``."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    return seeds


def resolve_threads(flag: Optional[int]) -> int:
    if flag is not None:
        return max(1, flag)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}: expected an integer, got {env!r}") from None
    return 1


# commands


def _reference(cfg: ExperimentConfig) -> float:
    ref = reference_loss(cfg.env, cfg.policy)
    if math.isfinite(ref):
        return ref
    sky = skyline_model(cfg.env, cfg.policy, cfg.theta0, radius=cfg.optimizer.radius)
    return reference_loss(cfg.env, cfg.policy, sky)


def _run_jobs(cfg: ExperimentConfig, plan: RolloutPlan, threads: int, reference: float, tag=()):
    """Run every (seed, method); failures come back as RunError values."""

    def job(method, seed):
        def go():
            try:
                return RUNNERS[method](cfg.env, cfg.policy, cfg.theta0, plan, cfg.objective, cfg.optimizer, seed, reference)
            except RunError as exc:
                return exc

        return go

    jobs = {tag + (seed, method): job(method, seed) for seed in cfg.seeds for method in cfg.methods}
    return run_many(jobs, threads)


def _collect(outcomes) -> tuple:
    results, failures = [], []
    for key, out in outcomes.items():
        if isinstance(out, RunError):
            failures.append(out)
            results.append((key, out.partial))
        else:
            results.append((key, out))
    return results, failures


def cmd_run(cfg: ExperimentConfig, out: Path, threads: int) -> int:
    outcomes = _run_jobs(cfg, cfg.plan, threads, _reference(cfg))
    results, failures = _collect(outcomes)
    rows = [row for _, r in results for row in run_rows(r)]
    write_csv(out / "results.csv", RUN_COLUMNS, rows)
    write_csv(out / "timings.csv", ["run_id", "wall_clock_s"], [[f"{r.method}-{r.seed}", r.wall_clock] for _, r in results])
    for exc in failures:
        print(f"error: {exc}", file=sys.stderr)
    return 2 if failures else 0


def cmd_estimators(cfg: ExperimentConfig, out: Path, threads: int) -> int:
    study = cfg.study
    rows = estimator_study(study["shifts"], study["estimators"], study["n"], study["replications"], study["seed"])
    write_csv(out / "estimators.csv", STUDY_COLUMNS, [[getattr(r, c) for c in STUDY_COLUMNS] for r in rows])
    return 0


def cmd_sweep(cfg: ExperimentConfig, out: Path, threads: int) -> int:
    if cfg.sweep["kind"] == "distance":
        return _distance(cfg, out, threads)
    grid = sorted(cfg.sweep["lambda_grid"])
    if not grid:
        raise ConfigError("sweep.lambda_grid: empty grid")
    reference = _reference(cfg)
    raw, cells, failures = [], [], []
    for lam in grid:
        plan = dataclasses.replace(cfg.plan, lambda_rule=LambdaRule.FIXED, lambda_value=lam)
        results, fails = _collect(_run_jobs(cfg, plan, threads, reference, (lam,)))
        failures += fails
        for _, r in results:
            raw += run_rows(r)
            if r.records:
                cells.append([lam, r.seed, r.method, r.final.test_loss, r.final.excess_risk, r.regret])
    write_csv(out / "sweep_raw.csv", RUN_COLUMNS, raw)
    write_csv(out / "sweep_cells.csv", ["lambda", "seed", "method", "final_test_loss", "final_excess_risk", "regret"], cells)
    best = []
    for method in cfg.methods:
        medians = []
        for lam in grid:
            losses = [c[3] for c in cells if c[0] == lam and c[2] == method]
            if losses:
                medians.append((statistics.median(losses), lam))
        if medians:
            # min over (loss, lambda): ties go to the smaller lambda
            loss, lam = min(medians)
            best.append([method, lam, loss])
    write_csv(out / "sweep_best.csv", ["method", "lambda", "median_final_test_loss"], best)
    for exc in failures:
        print(f"error: {exc}", file=sys.stderr)
    return 2 if failures else 0


def _distance(cfg: ExperimentConfig, out: Path, threads: int) -> int:
    if cfg.env.kind != "gaussian_quadratic":
        raise ConfigError("env.kind: the distance sweep needs gaussian_quadratic")
    if not cfg.sweep["delta0_grid"] or not cfg.sweep["sigma_grid"] or not cfg.seeds:
        raise ConfigError("sweep.delta0_grid/sigma_grid: empty grid")
    cells, best = distance_sweep(
        cfg.sweep["delta0_grid"], cfg.sweep["sigma_grid"], cfg.plan, cfg.seeds, cfg.methods,
        cfg.env.theta_star, cfg.env.sigma_star, cfg.objective, cfg.optimizer, threads,
    )
    note = ["delta0 grid values are a stand-in choice"]
    write_csv(out / "distance_cells.csv", list(cells[0]._fields), [list(c) for c in cells], note)
    write_csv(out / "distance_best.csv", list(best[0]._fields), [list(b) for b in best], note)
    return 0


COMMANDS = {"run": cmd_run, "estimators": cmd_estimators, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scrm-lab", description="Sequential counterfactual risk minimization experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML config file")
        p.add_argument("--out", help="output directory (overrides run.output)")
        p.add_argument("--seeds", help="seed list such as 0,1,2 or 0-9 (overrides run.seeds)")
        p.add_argument("--threads", type=int, help=f"worker threads (fallback: ${THREADS_ENV}, then 1)")
    return parser


def _report_warnings(caught) -> None:
    bound = [w for w in caught if issubclass(w.category, WeightBoundWarning)]
    if bound:
        print(f"warning: {len(bound)} objective evaluations saw weights above the declared bound W", file=sys.stderr)
    for w in caught:
        if not issubclass(w.category, WeightBoundWarning):
            print(f"warning: {w.message}", file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        cfg = parse_config(text, need_env=args.command != "estimators")
        if args.seeds is not None:
            try:
                cfg.seeds = parse_seeds(args.seeds)
            except ValueError:
                raise ConfigError(f"--seeds: cannot parse {args.seeds!r}") from None
        if not cfg.seeds:
            raise ConfigError("run.seeds: empty seed list")
        if args.out is not None:
            cfg.output = args.out
        threads = resolve_threads(args.threads)
        out = Path(cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "effective_config.toml", "wb") as fh:
            tomli_w.dump(effective_config(cfg), fh)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", WeightBoundWarning)
            code = COMMANDS[args.command](cfg, out, threads)
        _report_warnings(caught)
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
