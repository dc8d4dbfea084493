"""Command-line entry point: JSON configs in, CSV/JSON artifacts out.

Subcommands:
    simulate <cfg>   one seeded trajectory plus per-estimator estimate CSVs
    sweep <cfg>      eta sweep of KF-DOB: sweep.csv and per-eta bias/std CSVs
    verify           run the oracle/identity property checks

Exit codes: 0 success, 1 runtime or property failure, 2 configuration error.
The environment variable DOBLAB_SEED overrides the configured seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys as _sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .estimators import MkcConfig
from .harness import (
    ImmKfDob,
    KfDob,
    MkcKfDob,
    MonteCarloConfig,
    NkfDob,
    Sise,
    eta_estimator_name,
    run_eta_sweep,
    run_single,
    write_bias_std_csv,
    write_estimates_csv,
    write_report_json,
    write_sweep_csv,
)
from .model import LinearSystem, ModelError
from .scenario import (
    DEFAULT_D_STAR,
    DisturbanceProfile,
    default_disturbance_profile,
    default_tracking_system,
    simulate_truth,
    trajectory_to_csv,
)

SEED_ENV_VAR = "DOBLAB_SEED"


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.field_path = path
        super().__init__(f"{path}: {message}")


def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


def _take(block: dict, allowed: dict, path: str) -> dict:
    """Apply defaults and reject unknown keys; ``allowed`` maps key -> default."""
    _require(isinstance(block, dict), path, "must be a JSON object")
    unknown = set(block) - set(allowed)
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}", "unknown key")
    out = dict(allowed)
    out.update(block)
    return out


def _number(value, path: str, *, positive=False, nonnegative=False) -> float:
    _require(isinstance(value, (int, float)) and not isinstance(value, bool),
             path, "must be a number")
    if positive:
        _require(value > 0, path, "must be positive")
    if nonnegative:
        _require(value >= 0, path, "must be nonnegative")
    return float(value)


def _integer(value, path: str, *, minimum=None) -> int:
    _require(isinstance(value, int) and not isinstance(value, bool),
             path, "must be an integer")
    if minimum is not None:
        _require(value >= minimum, path, f"must be >= {minimum}")
    return int(value)


@dataclass
class ScenarioConfig:
    T: float
    q_x: float
    r: float
    d_star: float
    steps: int
    seed: int
    x0_mean: np.ndarray
    x0_cov: np.ndarray
    profile: DisturbanceProfile

    def system(self) -> LinearSystem:
        return default_tracking_system(T=self.T, q_x=self.q_x, r=self.r)


@dataclass
class HarnessConfig:
    trials: int
    window: tuple[int, int]
    eta_grid: tuple[float, ...]


@dataclass
class RunConfig:
    scenario: ScenarioConfig
    estimators: tuple
    harness: HarnessConfig
    output_dir: Path

    def monte_carlo(self, workers: int = 1) -> MonteCarloConfig:
        sc = self.scenario
        return MonteCarloConfig(
            sys=sc.system(), profile=sc.profile, steps=sc.steps,
            estimators=self.estimators, base_seed=sc.seed,
            trials=self.harness.trials, window=self.harness.window,
            x0_mean=sc.x0_mean, x0_cov=sc.x0_cov,
            eta_grid=self.harness.eta_grid or None, workers=workers,
        )


def _parse_profile(block, d_star: float, path: str) -> DisturbanceProfile:
    if block is None:
        return default_disturbance_profile(d_star)
    block = _take(block, {"segments": None, "noise_cov": d_star}, path)
    _require(isinstance(block["segments"], list) and block["segments"],
             f"{path}.segments", "must be a nonempty list of [start, level]")
    segments = []
    for i, seg in enumerate(block["segments"]):
        _require(isinstance(seg, list) and len(seg) == 2,
                 f"{path}.segments[{i}]", "must be [start_step, level]")
        segments.append((_integer(seg[0], f"{path}.segments[{i}][0]", minimum=0),
                         _number(seg[1], f"{path}.segments[{i}][1]")))
    noise = block["noise_cov"]
    if isinstance(noise, (int, float)):
        noise = [[_number(noise, f"{path}.noise_cov", nonnegative=True)]]
    try:
        return DisturbanceProfile(segments=tuple(segments), noise_cov=noise)
    except ModelError as exc:
        raise ConfigError(f"{path}.segments", str(exc)) from None


def _parse_scenario(block, path: str) -> ScenarioConfig:
    block = _take(block, {
        "T": 0.1, "q_x": 1e-4, "r": 1e-2, "d_star": DEFAULT_D_STAR,
        "steps": 2000, "seed": 20260810, "x0_mean": [0.0, 0.0],
        "x0_cov": 1e-2, "profile": None,
    }, path)
    T = _number(block["T"], f"{path}.T", positive=True)
    q_x = _number(block["q_x"], f"{path}.q_x", nonnegative=True)
    r = _number(block["r"], f"{path}.r", positive=True)
    d_star = _number(block["d_star"], f"{path}.d_star", nonnegative=True)
    steps = _integer(block["steps"], f"{path}.steps", minimum=1)
    seed = _integer(block["seed"], f"{path}.seed")
    x0_mean = np.asarray(block["x0_mean"], dtype=float).reshape(-1)
    _require(x0_mean.size == 2, f"{path}.x0_mean", "must have 2 entries")
    cov = block["x0_cov"]
    if isinstance(cov, (int, float)):
        x0_cov = _number(cov, f"{path}.x0_cov", nonnegative=True) * np.eye(2)
    else:
        x0_cov = np.asarray(cov, dtype=float)
        _require(x0_cov.shape == (2, 2), f"{path}.x0_cov",
                 "must be a scalar or a 2x2 matrix")
    profile = _parse_profile(block["profile"], d_star, f"{path}.profile")
    return ScenarioConfig(T=T, q_x=q_x, r=r, d_star=d_star, steps=steps,
                          seed=seed, x0_mean=x0_mean, x0_cov=x0_cov,
                          profile=profile)


def _estimator_D(block, d_star: float, path: str) -> np.ndarray:
    has_eta = block.get("eta") is not None
    has_D = block.get("D") is not None
    _require(has_eta != has_D, path, "exactly one of 'eta' or 'D' is required")
    if has_eta:
        return _number(block["eta"], f"{path}.eta", positive=True) * d_star * np.eye(1)
    return np.array([[_number(block["D"], f"{path}.D", nonnegative=True)]])


def _parse_estimator(block, d_star: float, path: str):
    _require(isinstance(block, dict), path, "must be a JSON object")
    kind = block.get("kind")
    _require(isinstance(kind, str), f"{path}.kind", "must name an estimator kind")
    name = block.get("name", kind)
    _require(isinstance(name, str) and name, f"{path}.name", "must be a nonempty string")

    if kind == "sise":
        _take(block, {"kind": None, "name": name}, path)
        return Sise(name)
    if kind in ("kf_dob", "nkf_dob"):
        blk = _take(block, {"kind": None, "name": name, "eta": None, "D": None}, path)
        D = _estimator_D(blk, d_star, path)
        return KfDob(name, D) if kind == "kf_dob" else NkfDob(name, D)
    if kind == "mkckf_dob":
        blk = _take(block, {"kind": None, "name": name, "eta": None, "D": None,
                            "sigma_d": None, "epsilon": 1e-6, "max_iters": 50}, path)
        D = _estimator_D(blk, d_star, path)
        _require(blk["sigma_d"] is not None, f"{path}.sigma_d", "is required")
        cfg = MkcConfig(
            sigma_d=[_number(blk["sigma_d"], f"{path}.sigma_d", positive=True)],
            epsilon=_number(blk["epsilon"], f"{path}.epsilon", positive=True),
            max_iters=_integer(blk["max_iters"], f"{path}.max_iters", minimum=1),
        )
        return MkcKfDob(name, D, cfg)
    if kind == "immkf_dob":
        blk = _take(block, {"kind": None, "name": name, "etas": None,
                            "transition": None, "init_probs": None}, path)
        _require(isinstance(blk["etas"], list) and blk["etas"],
                 f"{path}.etas", "must be a nonempty list of eta multipliers")
        D_list = tuple(
            _number(e, f"{path}.etas[{i}]", positive=True) * d_star * np.eye(1)
            for i, e in enumerate(blk["etas"]))
        _require(blk["transition"] is not None, f"{path}.transition", "is required")
        trans = np.asarray(blk["transition"], dtype=float)
        probs = (np.asarray(blk["init_probs"], dtype=float)
                 if blk["init_probs"] is not None else None)
        return ImmKfDob(name, D_list, trans, probs)
    raise ConfigError(f"{path}.kind", f"unknown estimator kind {kind!r}")


def _parse_harness(block, path: str) -> HarnessConfig:
    block = _take(block, {"trials": 100, "window": [1260, 1320],
                          "eta_grid": []}, path)
    trials = _integer(block["trials"], f"{path}.trials", minimum=1)
    window = block["window"]
    _require(isinstance(window, list) and len(window) == 2,
             f"{path}.window", "must be [m1, m2]")
    m1 = _integer(window[0], f"{path}.window[0]", minimum=1)
    m2 = _integer(window[1], f"{path}.window[1]", minimum=m1)
    grid = block["eta_grid"]
    _require(isinstance(grid, list), f"{path}.eta_grid", "must be a list")
    grid = tuple(_number(e, f"{path}.eta_grid[{i}]", positive=True)
                 for i, e in enumerate(grid))
    return HarnessConfig(trials=trials, window=(m1, m2), eta_grid=grid)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("config", f"file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    raw = _take(raw, {"scenario": {}, "estimators": [], "harness": {},
                      "output_dir": "out"}, "config")
    scenario = _parse_scenario(raw["scenario"], "scenario")
    if SEED_ENV_VAR in os.environ:
        scenario.seed = int(os.environ[SEED_ENV_VAR])
    _require(isinstance(raw["estimators"], list), "estimators", "must be a list")
    estimators = tuple(
        _parse_estimator(blk, scenario.d_star, f"estimators[{i}]")
        for i, blk in enumerate(raw["estimators"]))
    names = [e.name for e in estimators]
    _require(len(set(names)) == len(names), "estimators", "names must be unique")
    harness = _parse_harness(raw["harness"], "harness")
    _require(harness.window[1] <= scenario.steps, "harness.window",
             "window end exceeds scenario steps")
    out_dir = raw["output_dir"]
    _require(isinstance(out_dir, str) and out_dir, "output_dir",
             "must be a nonempty string")
    return RunConfig(scenario=scenario, estimators=estimators, harness=harness,
                     output_dir=Path(out_dir))


def _anchored_message(cfg_path, err: ConfigError) -> str:
    """Best-effort line anchor: locate the offending key in the config text."""
    leaf = err.field_path.split(".")[-1].split("[")[0]
    try:
        lines = Path(cfg_path).read_text().splitlines()
        for lineno, line in enumerate(lines, start=1):
            if f'"{leaf}"' in line:
                return f"{cfg_path}:{lineno}: config error: {err}"
    except OSError:
        pass
    return f"{cfg_path}: config error: {err}"


def cmd_simulate(cfg_path, threads: int = 1) -> int:
    try:
        cfg = load_config(cfg_path)
    except ConfigError as exc:
        print(_anchored_message(cfg_path, exc), file=_sys.stderr)
        return 2
    sc = cfg.scenario
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    system = sc.system()
    traj = simulate_truth(system, sc.profile, sc.steps, sc.seed, sc.x0_mean,
                          sc.x0_cov)
    trajectory_to_csv(traj, sc.T, out / "trajectory.csv")
    try:
        for kind in cfg.estimators:
            run = run_single(system, traj, kind, sc.x0_mean, sc.x0_cov)
            write_estimates_csv(out / f"estimates_{kind.name}.csv", run, sc.T)
    except Exception as exc:  # estimator failure -> runtime error exit code
        print(f"estimator failure: {exc}", file=_sys.stderr)
        return 1
    return 0


def cmd_sweep(cfg_path, threads: int = 1) -> int:
    try:
        cfg = load_config(cfg_path)
        if not cfg.harness.eta_grid:
            raise ConfigError("harness.eta_grid", "must be nonempty for a sweep")
    except ConfigError as exc:
        print(_anchored_message(cfg_path, exc), file=_sys.stderr)
        return 2
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    mc = cfg.monte_carlo(workers=threads)
    # Timing varies run to run; the sweep artifacts must be byte-stable.
    mc = MonteCarloConfig(
        sys=mc.sys, profile=mc.profile, steps=mc.steps, estimators=mc.estimators,
        base_seed=mc.base_seed, trials=mc.trials, window=mc.window,
        x0_mean=mc.x0_mean, x0_cov=mc.x0_cov, eta_grid=mc.eta_grid,
        workers=threads, time_trials=False,
    )
    try:
        report, rows = run_eta_sweep(mc, d_star=cfg.scenario.d_star)
    except Exception as exc:
        print(f"sweep failure: {exc}", file=_sys.stderr)
        return 1
    write_sweep_csv(out / "sweep.csv", rows)
    for i in range(len(cfg.harness.eta_grid)):
        name = eta_estimator_name(i)
        write_bias_std_csv(out / f"bias_std_{name}.csv",
                           report.estimators[name], cfg.scenario.T)
    write_report_json(out / "report.json", report)
    return 0


def cmd_verify(trials: int = 100, seed: int = 20260810) -> int:
    from .checks import run_all_checks

    results = run_all_checks(trials=trials, seed=seed)
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(f"{status} {res.name}: {res.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}",
              file=_sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="doblab",
        description="Disturbance-observer simulation and verification runs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="one seeded run with estimate CSVs")
    p_sim.add_argument("config")
    p_sim.add_argument("--threads", type=int, default=1)

    p_sweep = sub.add_parser("sweep", help="Monte Carlo eta sweep of KF-DOB")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--threads", type=int, default=1)

    p_verify = sub.add_parser("verify", help="run the property checks")
    p_verify.add_argument("--trials", type=int, default=100)
    p_verify.add_argument("--seed", type=int, default=20260810)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "simulate":
        return cmd_simulate(args.config, threads=args.threads)
    if args.command == "sweep":
        return cmd_sweep(args.config, threads=args.threads)
    return cmd_verify(trials=args.trials, seed=args.seed)


if __name__ == "__main__":
    raise SystemExit(main())
