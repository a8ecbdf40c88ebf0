"""Command-line entry point: ``etcest solve | simulate | validate``.

Configuration is one JSON (or TOML) file; every field except ``system`` has a
default, listed in :data:`DEFAULTS`.  Command-line flags override the file.
Every report embeds the fully resolved configuration and seed.

Exit codes: 0 success, 1 invalid input, 2 numerical non-convergence,
3 property-suite failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lin_gauss import ModelError, RiccatiConvergenceError, SystemModel, example_system, solve_riccati
from .mdp_solver import (
    DEFAULT_ALPHAS,
    DegeneracyError,
    MdpConfig,
    StationaryPolicy,
    ValueIterationError,
    average_cost,
    build_mdp,
    extract_degenerate_policy,
    value_iteration,
)
from .sim_harness import comparison_to_csv, monte_carlo_cost, policy_comparison
from .validation import FAULTS, ValidationSettings, run_all

log = logging.getLogger("etcest")

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGENCE, EXIT_SUITE_FAILURE = 0, 1, 2, 3

DEFAULTS = {
    "mdp": {"M": 6, "zeta": 0.1, "delta_max": 10.0, "alpha": 0.999, "n": 2, "boundary": "transmit"},
    "kappa": [5.0, 20.0, 35.0],
    "alpha_schedule": list(DEFAULT_ALPHAS),
    "vi_tol": 1e-6,
    "simulation": {
        "T": 400,
        "runs": 500,
        "master_seed": 0,
        "fixed_thresholds": [0.5, 1.5, 2.5, 3.5, 4.5, 5.5],
        "rate_kappa": [1.0, 5.0, 10.0, 20.0, 30.0, 40.0],
        "rate_runs": 250,
        "rate_T": 400,
    },
    "validation": ValidationSettings().to_dict(),
    "out": "results",
    "threads": 1,
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RunConfig:
    raw: dict
    system: SystemModel
    mdp: MdpConfig
    kappas: tuple
    alpha_schedule: tuple
    vi_tol: float
    T: int
    runs: int
    seed: int
    fixed_thresholds: tuple
    rate_kappas: tuple
    rate_runs: int
    rate_T: int
    validation: ValidationSettings
    out: Path
    threads: int


def _merge(defaults, given, path=""):
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown config field {path + key!r}")
        if isinstance(defaults[key], dict) and key != "validation":
            if not isinstance(val, dict):
                raise ConfigError(f"config field {path + key!r} must be a table")
            out[key] = _merge(defaults[key], val, path + key + ".")
        elif key == "validation":
            if not isinstance(val, dict):
                raise ConfigError("config field 'validation' must be a table")
            out[key] = {**defaults[key], **val}
        else:
            out[key] = val
    return out


def _number_list(value, name, positive=False):
    if isinstance(value, (int, float)):
        value = [value]
    try:
        vals = tuple(float(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config field {name!r} must be a list of numbers") from exc
    if not vals:
        raise ConfigError(f"config field {name!r} must not be empty")
    if positive and any(not v > 0 for v in vals):
        raise ConfigError(f"config field {name!r} must contain positive numbers")
    return vals


def _positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value or value < minimum:
        raise ConfigError(f"config field {name!r} must be an integer >= {minimum}")
    return int(value)


def load_config_file(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python 3.10
            import tomli as tomllib
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc


def resolve_config(data, overrides=None):
    """Validate a config mapping (plus flag overrides) into a :class:`RunConfig`."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a table")
    if "system" not in data:
        raise ConfigError("config is missing required field 'system'")
    merged = _merge({**DEFAULTS, "system": None}, data)
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key == "seed":
            merged["simulation"]["master_seed"] = val
        elif key == "alpha":
            merged["alpha_schedule"] = val
        else:
            merged[key] = val

    sys_spec = merged["system"]
    try:
        if sys_spec == "example":
            system = example_system()
        elif isinstance(sys_spec, dict):
            system = SystemModel.from_dict(sys_spec)
        else:
            raise ConfigError("config field 'system' must be \"example\" or a table with A, C, Q, R, x0_mean, P0")
    except ModelError as exc:
        raise ConfigError(f"invalid system: {exc}") from exc

    try:
        mdp = MdpConfig(**merged["mdp"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid mdp section: {exc}") from exc
    if mdp.boundary not in ("transmit", "self_loop"):
        raise ConfigError("config field 'mdp.boundary' must be 'transmit' or 'self_loop'")
    if mdp.n != system.rank_C:
        raise ConfigError(f"config field 'mdp.n' ({mdp.n}) must equal rank(C) = {system.rank_C}")

    kappas = _number_list(merged["kappa"], "kappa")
    if any(k < 0 for k in kappas):
        raise ConfigError("config field 'kappa' must be non-negative")
    alphas = _number_list(merged["alpha_schedule"], "alpha_schedule")
    if any(not 0 <= a < 1 for a in alphas) or any(b <= a for a, b in zip(alphas, alphas[1:])):
        raise ConfigError("config field 'alpha_schedule' must be strictly ascending values in [0, 1)")
    vi_tol = merged["vi_tol"]
    if not isinstance(vi_tol, (int, float)) or not vi_tol > 0:
        raise ConfigError("config field 'vi_tol' must be positive")
    sim = merged["simulation"]
    seed = sim["master_seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("config field 'simulation.master_seed' must be an integer in [0, 2^64)")
    try:
        validation = ValidationSettings.from_dict(merged["validation"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid validation section: {exc}") from exc
    return RunConfig(
        raw=merged,
        system=system,
        mdp=mdp,
        kappas=kappas,
        alpha_schedule=alphas,
        vi_tol=float(vi_tol),
        T=_positive_int(sim["T"], "simulation.T"),
        runs=_positive_int(sim["runs"], "simulation.runs"),
        seed=seed,
        fixed_thresholds=_number_list(sim["fixed_thresholds"], "simulation.fixed_thresholds", positive=True),
        rate_kappas=_number_list(sim["rate_kappa"], "simulation.rate_kappa"),
        rate_runs=_positive_int(sim["rate_runs"], "simulation.rate_runs"),
        rate_T=_positive_int(sim["rate_T"], "simulation.rate_T"),
        validation=validation,
        out=Path(merged["out"]),
        threads=_positive_int(merged["threads"], "threads"),
    )


def _resolved_dict(cfg):
    out = copy.deepcopy(cfg.raw)
    out["system"] = cfg.system.to_dict()
    out["mdp"] = {k: v for k, v in cfg.mdp.to_dict().items() if k != "kappa"}
    out["kappa"] = list(cfg.kappas)
    out["alpha_schedule"] = list(cfg.alpha_schedule)
    out["validation"] = cfg.validation.to_dict()
    out["out"] = str(cfg.out)
    return out


def _write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, default=_json_default) + "\n", encoding="utf-8")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


class NonConvergence(RuntimeError):
    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


def solve_one(cfg, steady, kappa, with_average=True):
    """Value iteration, policy extraction and average cost for one kappa."""
    model = build_mdp(MdpConfig(**{**cfg.mdp.to_dict(), "kappa": kappa}), steady, cfg.system.A)
    try:
        vi = value_iteration(model, tol=cfg.vi_tol)
    except ValueIterationError as exc:
        raise NonConvergence(str(exc), {"kappa": kappa, "residual": exc.residual, "iterations": exc.iterations}) from exc
    try:
        chain = extract_degenerate_policy(vi.policy, model)
        degenerate_note = None
    except DegeneracyError as exc:
        chain, degenerate_note = None, str(exc)
    alpha = cfg.mdp.alpha
    J0 = float(vi.J.values[0, 0])
    row = {
        "kappa": kappa,
        "J_star": J0,
        "J_star_minus_floor": J0 - model.trace_P_bar / (1.0 - alpha),
        "discounted_average": (1.0 - alpha) * J0,
        "thresholds": chain,
        "degeneracy_note": degenerate_note,
        "iterations": vi.iterations,
        "bellman_residual": vi.bellman_residual,
        "policy_residual": vi.policy_residual,
        "policy": vi.policy.to_dict(),
    }
    if with_average:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                ac = average_cost(model, alphas=cfg.alpha_schedule, vi_tol=cfg.vi_tol)
            except ValueIterationError as exc:
                raise NonConvergence(
                    str(exc), {"kappa": kappa, "residual": exc.residual, "iterations": exc.iterations}
                ) from exc
        row["lambda_hat"] = ac.lambda_hat
        row["average_cost"] = {
            "alphas": list(ac.alphas),
            "per_alpha": list(ac.per_alpha),
            "iterations": list(ac.iterations),
            "spread": ac.spread,
            "warnings": list(ac.warnings) + [str(w.message) for w in caught if str(w.message) not in ac.warnings],
        }
    return row


def _solve_task(args):
    return solve_one(*args)


def _solve_many(cfg, steady, kappas, with_average):
    """Solve independent kappas, in ``cfg.threads`` worker processes if > 1."""
    tasks = [(cfg, steady, k, with_average(k)) for k in kappas]
    if cfg.threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.threads, len(tasks))) as pool:
            return list(pool.map(_solve_task, tasks))
    return [_solve_task(t) for t in tasks]


def _steady(cfg):
    try:
        return solve_riccati(cfg.system)
    except RiccatiConvergenceError as exc:
        raise NonConvergence(str(exc), {"residual": exc.residual, "iterations": exc.iterations}) from exc


def _header(cfg, command):
    return {"command": command, "seed": cfg.seed, "config": _resolved_dict(cfg)}


def cmd_solve(cfg):
    steady = _steady(cfg)
    rows = _solve_many(cfg, steady, list(cfg.kappas), lambda k: True)
    cfg.out.mkdir(parents=True, exist_ok=True)
    M = cfg.mdp.M
    header = (
        ["kappa", "J_star", "J_star_minus_floor"]
        + [f"tau_plus_{t}" for t in range(M + 1)]
        + ["lambda_hat", "discounted_average", "bellman_residual"]
    )
    table = []
    for r in rows:
        chain = r["thresholds"] or [""] * (M + 1)
        table.append(
            [r["kappa"], r["J_star"], r["J_star_minus_floor"], *chain, r["lambda_hat"], r["discounted_average"], r["bellman_residual"]]
        )
    _write_csv(cfg.out / "solve_table.csv", header, table)
    report = _header(cfg, "solve")
    report["trace_P_bar"] = float(np.trace(steady.P_bar))
    report["riccati_residual"] = steady.residual
    report["notes"] = [
        "J_star is the optimal discounted cost from state (tau_plus=0, delta=zeta).",
        "J_star_minus_floor subtracts tr(P_bar)/(1-alpha), the part every policy pays.",
        "lambda_hat is (1-alpha) J_star at the largest alpha of alpha_schedule; "
        "discounted_average is (1-alpha) J_star at mdp.alpha.",
    ]
    report["results"] = rows
    _write_json(cfg.out / "solve_report.json", report)
    _write_json(
        cfg.out / "policies.json",
        {
            "mdp": {k: v for k, v in cfg.mdp.to_dict().items() if k != "kappa"},
            "seed": cfg.seed,
            "policies": [
                {"kappa": r["kappa"], "lambda_hat": r["lambda_hat"], "thresholds": r["thresholds"], **r["policy"]}
                for r in rows
            ],
        },
    )
    for r in rows:
        log.info("kappa=%g J*=%.4f lambda_hat=%.4f thresholds=%s", r["kappa"], r["J_star"], r["lambda_hat"], r["thresholds"])
    return EXIT_OK


def load_policies(path, cfg):
    """Policies from a ``policies.json`` written by ``solve``, keyed by kappa."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read policy file {path}: {exc}") from exc
    want = {k: v for k, v in cfg.mdp.to_dict().items() if k not in ("kappa", "alpha")}
    have = data.get("mdp", {})
    for key, val in want.items():
        if key in ("M", "zeta", "delta_max", "n") and have.get(key) != val:
            raise ConfigError(f"policy file has mdp.{key}={have.get(key)!r} but config has {val!r}")
    out = {}
    controls = cfg.mdp.controls
    for entry in data.get("policies", []):
        try:
            pol = StationaryPolicy.from_dict(entry)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"invalid policy for kappa={entry.get('kappa')}: {exc}") from exc
        if pol.action.shape != (cfg.mdp.M + 1, controls.size) or not np.allclose(pol.controls, controls):
            raise ConfigError(
                f"policy for kappa={entry.get('kappa')} has shape {pol.action.shape}, "
                f"config implies {(cfg.mdp.M + 1, controls.size)}"
            )
        out[float(entry["kappa"])] = (pol, entry.get("lambda_hat"))
    return out


def cmd_simulate(cfg, policy_path=None):
    steady = _steady(cfg)
    needed = sorted(set(cfg.kappas) | set(cfg.rate_kappas))
    solved = load_policies(policy_path, cfg) if policy_path else {}
    if policy_path:
        missing = [k for k in cfg.kappas if k not in solved]
        if missing:
            raise ConfigError(f"policy file has no policy for kappa {missing}")
    todo = [k for k in needed if k not in solved or (k in cfg.kappas and solved[k][1] is None)]
    rows = _solve_many(cfg, steady, todo, lambda k: k in cfg.kappas)
    for k, r in zip(todo, rows):
        solved[k] = (StationaryPolicy.from_dict(r["policy"]), r.get("lambda_hat"))
    cfg.out.mkdir(parents=True, exist_ok=True)
    alpha = cfg.mdp.alpha

    # communication rate vs kappa
    rate_rows = []
    for k in cfg.rate_kappas:
        s = monte_carlo_cost(cfg.system, steady, solved[k][0], cfg.rate_T, cfg.rate_runs, k, alpha, cfg.seed)
        rate_rows.append([k, s.comm_rate, s.comm_rate_se, s.runs * s.T])
    _write_csv(cfg.out / "comm_rate.csv", ["kappa", "comm_rate", "comm_rate_se", "steps"], rate_rows)
    rates = [r[1] for r in rate_rows]
    rate_order = sorted(range(len(rate_rows)), key=lambda i: rate_rows[i][0])
    ordered = [rates[i] for i in rate_order]

    # running average of the per-step sample-mean cost vs lambda_hat
    curve_rows, convergence = [], []
    for k in cfg.kappas:
        s = monte_carlo_cost(cfg.system, steady, solved[k][0], cfg.T, cfg.runs, k, alpha, cfg.seed)
        lam = solved[k][1]
        for t, v in enumerate(s.time_avg_curve, start=1):
            curve_rows.append([k, t, float(v), lam])
        rel = abs(s.time_avg - lam) / lam
        convergence.append({"kappa": k, "final": s.time_avg, "final_se": s.time_avg_final_se, "lambda_hat": lam, "rel_err": rel})
    _write_csv(cfg.out / "running_average.csv", ["kappa", "k", "running_average", "lambda_hat"], curve_rows)

    # MDP policy against fixed thresholds
    by_kappa = {
        k: {"mdp": solved[k][0], **{f"fixed_{d:g}": float(d) for d in cfg.fixed_thresholds}} for k in cfg.kappas
    }
    table = policy_comparison(cfg.system, steady, by_kappa, cfg.T, cfg.runs, alpha, cfg.seed)
    comparison_to_csv(table, cfg.out / "policy_comparison.csv")

    report = _header(cfg, "simulate")
    report["policy_file"] = str(policy_path) if policy_path else None
    report["comm_rate"] = [dict(zip(["kappa", "comm_rate", "comm_rate_se", "steps"], r)) for r in rate_rows]
    report["comm_rate_strictly_decreasing"] = all(a > b for a, b in zip(ordered, ordered[1:]))
    report["running_average"] = convergence
    report["running_average_within_5pct"] = all(c["rel_err"] < 0.05 for c in convergence)
    report["mdp_policy_minimal"] = {str(k): v for k, v in table.reference_is_min.items()}
    _write_json(cfg.out / "simulate_report.json", report)
    log.info("comm rates %s", ", ".join(f"{r[0]:g}:{r[1]:.4f}" for r in rate_rows))
    return EXIT_OK


def cmd_validate(cfg, fault=None):
    kappa = cfg.validation.mse_kappa
    mdp = MdpConfig(**{**cfg.mdp.to_dict(), "kappa": kappa})
    results = run_all(cfg.system, mdp, cfg.validation, seed=cfg.seed, fault=fault)
    cfg.out.mkdir(parents=True, exist_ok=True)
    report = _header(cfg, "validate")
    report["fault"] = fault
    report["suites"] = [r.to_dict() for r in results]
    report["passed"] = all(r.passed for r in results)
    _write_json(cfg.out / "validate_report.json", report)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}")
    return EXIT_OK if report["passed"] else EXIT_SUITE_FAILURE


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _u64(text):
    try:
        v = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from exc
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2^64)")
    return v


def build_parser():
    parser = argparse.ArgumentParser(prog="etcest", description="Optimal event-triggered remote estimation.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON or TOML run configuration")
    common.add_argument("--seed", type=_u64, help="master seed (overrides simulation.master_seed)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--kappa", type=_float_list, help="comma-separated transmission prices")
    common.add_argument("--alpha", type=_float_list, help="comma-separated ascending discount schedule for the average cost")
    common.add_argument("--threads", type=int, help="worker processes for independent per-kappa solves")
    common.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("solve", parents=[common], help="solve the MDP for each kappa")
    p_sim = sub.add_parser("simulate", parents=[common], help="Monte-Carlo evaluation of solved policies")
    p_sim.add_argument("--policy", help="policies.json written by solve (solved on the fly if omitted)")
    p_val = sub.add_parser("validate", parents=[common], help="run the property suites")
    p_val.add_argument("--inject-fault", choices=FAULTS, help="deliberately break a component")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        data = load_config_file(args.config)
        cfg = resolve_config(
            data,
            {"seed": args.seed, "out": args.out, "kappa": args.kappa, "alpha": args.alpha, "threads": args.threads},
        )
        if args.command == "solve":
            return cmd_solve(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.policy)
        return cmd_validate(cfg, args.inject_fault)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NonConvergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(json.dumps({"diagnostics": exc.diagnostics}, default=_json_default), file=sys.stderr)
        return EXIT_NONCONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
