"""Command-line entry point: generate | targets | train | eval | plan | simulate.

Every failure prints one ``error: <message>`` line on stderr and exits with
status 2.  Result files are written atomically and start with a ``# config:``
line echoing the settings that produced them.  Wall-clock measurements go to
``*.timing.csv`` sidecars so the primary outputs stay byte-identical across
identical runs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import evaluation as ev
from . import simulator as sim
from .objective import ProblemInstance, stack_instances
from .policy import CheckpointError, NetworkConfig, PolicyNetwork, encode_instance
from .policy import load as load_net
from .slpg import SlpgConfig
from .solver import SolverConfig, batch_solve, solve
from .training import AlmState, Method, TrainConfig, TrainingDiverged, train
from .vehicle import PlannerConfig


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message.replace("\n", " "))


def _floats(text: str, n: int | None = None) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise CliError(f"expected comma-separated numbers, got {text!r}") from exc
    if n is not None and len(vals) != n:
        raise CliError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def _config_line(cfg: dict) -> str:
    return "# config: " + json.dumps(cfg, sort_keys=True) + "\n"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ds.atomic_write_text(path, text)


def _timing_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".timing.csv")


def _read_data(path):
    if not Path(path).exists():
        raise CliError(f"dataset not found: {path}")
    return ds.load(path)


def _planner_cfg(args) -> PlannerConfig:
    return PlannerConfig(N=args.N)


def _solver_cfg(args) -> SolverConfig:
    return SolverConfig(restarts=args.restarts, seed=args.solver_seed)


def _add_planner(p):
    p.add_argument("--N", type=int, default=20, help="horizon length")


def _add_solver(p):
    p.add_argument("--restarts", type=int, default=3)
    p.add_argument("--solver-seed", type=int, default=0)


def _add_correction(p):
    p.add_argument("--correction", choices=ev.CORRECTIONS, default="slpg", help="test-time correction")
    p.add_argument("--no-correction", action="store_true", help="same as --correction none")
    p.add_argument("--nm", type=int, default=10, help="SLPG outer steps")
    p.add_argument("--im", type=int, default=2, help="SLPG inner steps")
    p.add_argument("--lambda-c", type=float, default=ev.TEST_LAMBDA_C, help="SLPG penalty weight")
    p.add_argument("--dc3-gamma", type=float, default=1e-3)
    p.add_argument("--dc3-steps", type=int, default=5)


def _correction(args) -> ev.Correction:
    kind = "none" if args.no_correction else args.correction
    return ev.Correction(kind, SlpgConfig(n_m=args.nm, i_m=args.im, lambda_c=args.lambda_c), args.dc3_gamma, args.dc3_steps)


def _correction_echo(c: ev.Correction) -> dict:
    if c.kind == "slpg":
        return {"correction": "slpg", "nm": c.slpg.n_m, "im": c.slpg.i_m, "lambda_c": c.slpg.lambda_c}
    if c.kind == "dc3":
        return {"correction": "dc3", "dc3_gamma": c.dc3_gamma, "dc3_steps": c.dc3_steps}
    return {"correction": "none"}


def _load_checkpoint(path) -> PolicyNetwork:
    if not Path(path).exists():
        raise CliError(f"checkpoint not found: {path}")
    return load_net(path)


# --- generate ---------------------------------------------------------------


def cmd_generate(args) -> None:
    ratio = _floats(args.ratio, 3)
    total = sum(ratio)
    dcfg = ds.DatasetConfig(
        n_instances=args.n,
        seed=args.seed,
        half_extent=args.half_extent,
        n_obs=args.n_obs,
        r_lo=args.r_lo,
        r_hi=args.r_hi,
        goal_bounds=(-args.half_extent, args.half_extent),
        split_ratio=tuple(r / total for r in ratio) if total > 0 else tuple(ratio),
    )
    parts = ds.split(ds.generate(dcfg), ratio, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(("train", "test", "val"), parts):
        ds.save(part, out / f"{name}.jsonl", dcfg)
    print(f"wrote {len(parts[0])}/{len(parts[1])}/{len(parts[2])} instances to {out}")


# --- targets ----------------------------------------------------------------


def cmd_targets(args) -> None:
    data = _read_data(args.data)
    cfg, scfg = _planner_cfg(args), _solver_cfg(args)
    res = batch_solve(data, cfg, scfg)
    meta = {"planner": cfg.to_dict(), "restarts": scfg.restarts, "solver_seed": scfg.seed, "data": str(args.data)}
    header = ["index", "converged"] + [f"u{p}" for p in range(2 * cfg.N)]
    rows = [[i, int(r.converged)] + [float(v) for v in r.u.reshape(-1)] for i, r in enumerate(res)]
    _write(args.out, _config_line(meta) + _csv_text(header, rows))
    print(f"wrote {len(rows)} targets ({sum(r.converged for r in res)} converged) to {args.out}")


def load_targets(path, n: int, N: int) -> np.ndarray:
    if not Path(path).exists():
        raise CliError(f"targets file not found: {path}")
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    rows = list(csv.reader(lines))[1:]
    if len(rows) != n:
        raise CliError(f"targets file has {len(rows)} rows, dataset has {n}")
    u = np.array([[float(v) for v in row[2:]] for row in rows])
    if u.shape[1] != 2 * N:
        raise CliError(f"targets have {u.shape[1]} columns, expected {2 * N}")
    return u.reshape(n, N, 2)


# --- train ------------------------------------------------------------------


def cmd_train(args) -> None:
    method = Method(args.method)
    if method.supervised and not args.targets:
        raise CliError(f"method {method.value} needs --targets (run the targets command first)")
    data = _read_data(args.data)
    if not data:
        raise CliError("training dataset is empty")
    cfg = _planner_cfg(args)
    n_obs = data[0].n_obs
    ncfg = NetworkConfig(3 + 3 * n_obs, 2 * cfg.N, args.layers, args.hidden, args.dropout)
    net = PolicyNetwork(ncfg, cfg, seed=args.seed)
    tcfg = TrainConfig(
        method=method,
        epochs=args.epochs,
        batch_size=args.batch,
        seed=args.seed,
        optimizer=args.optimizer,
        lr=args.lr,
        lambda_g=args.lambda_g,
        slpg=SlpgConfig(n_m=args.nm, i_m=args.im, lambda_c=args.lambda_c),
    )
    targets = load_targets(args.targets, len(data), cfg.N) if method.supervised else None
    alm = AlmState.zeros(cfg.N, n_obs, eta_theta=args.lr) if method.uses_alm else None
    meta = {
        "method": method.value,
        "epochs": args.epochs,
        "batch": args.batch,
        "seed": args.seed,
        "optimizer": args.optimizer,
        "lr": args.lr,
        "lambda_g": args.lambda_g,
        "nm": args.nm,
        "im": args.im,
        "lambda_c": args.lambda_c,
        "network": dataclasses.asdict(ncfg),
        "planner": cfg.to_dict(),
        "data": str(args.data),
    }
    report_path = Path(args.report) if args.report else Path(str(args.out) + ".report.csv")
    try:
        net, report, _ = train(data, net, alm, cfg, tcfg, targets)
    except TrainingDiverged as exc:
        _write(report_path, _config_line(meta) + exc.report.to_csv())
        raise CliError(f"{exc}; partial report written to {report_path}") from exc
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    net.save(args.out)
    _write(report_path, _config_line(meta) + report.to_csv())
    _write(_timing_path(report_path), report.timing_csv())
    last = report.records[-1] if report.records else None
    summary = f"loss {last.loss:.4f} mean_viol {last.mean_viol:.3e}" if last else "no epochs run"
    print(f"trained {method.value}: {summary}; checkpoint {args.out}")


# --- eval -------------------------------------------------------------------


def cmd_eval(args) -> None:
    data = _read_data(args.data)
    if not data:
        raise CliError("evaluation dataset is empty")
    goals, obstacles = stack_instances(data)
    sample = data[: args.timing_samples] if args.timing_samples is not None else data
    if args.solver:
        cfg, scfg = _planner_cfg(args), _solver_cfg(args)
        res = batch_solve(data, cfg, scfg)
        u = np.stack([r.u for r in res])
        method, corrected = "solver", "none"
        plan = lambda inst: solve(inst, cfg, scfg)  # noqa: E731
        echo = {"planner": cfg.to_dict(), "restarts": scfg.restarts, "solver_seed": scfg.seed}
    else:
        if not args.checkpoint:
            raise CliError("eval needs --checkpoint or --solver")
        net = _load_checkpoint(args.checkpoint)
        cfg = net.planner
        if net.config.input_dim != goals.shape[1] + 3 * obstacles.shape[1]:
            raise CliError(
                f"checkpoint expects input width {net.config.input_dim}, dataset encodes to "
                f"{goals.shape[1] + 3 * obstacles.shape[1]}"
            )
        corr = _correction(args)
        u = ev.network_controls(net, goals, obstacles, corr)
        method, corrected = args.label or Path(args.checkpoint).stem, corr.kind
        plan = ev.network_call(net, corr)
        echo = {"checkpoint": str(args.checkpoint), "planner": cfg.to_dict(), **_correction_echo(corr)}
    echo.update({"data": str(args.data), "infeas_tol": args.infeas_tol, "correction": corrected})
    m = ev.instance_metrics(u, goals, obstacles, cfg)
    row = ev.summarize(method, corrected, m, args.infeas_tol)
    _write(args.out, _config_line(echo) + _csv_text(ev.SUMMARY_COLUMNS, [row.values()]))
    if args.per_instance:
        rows = [[i, float(m.objective[i]), float(m.sum_relu[i]), float(m.max_viol[i])] for i in range(len(data))]
        _write(args.per_instance, _config_line(echo) + _csv_text(ev.INSTANCE_COLUMNS, rows))
    if args.timing_samples != 0:
        ms = ev.time_planner(plan, sample, repeats=3)
        _write(
            _timing_path(args.out),
            _csv_text(["method", "samples", "time_ms_mean", "time_ms_median"], [[method, len(sample), float(ms.mean()), float(np.median(ms))]]),
        )
        tinfo = f" time {ms.mean():.3f} ms"
    else:
        tinfo = ""
    print(
        f"{method}: obj {row.obj_mean:.4f} mean_cbf {row.mean_cbf:.3e} max_cbf {row.max_cbf:.3e} "
        f"infeasible {row.infeasible_pct:.2f}% (tol {args.infeas_tol:g}){tinfo}"
    )


# --- plan -------------------------------------------------------------------


def _instance_from_args(args) -> ProblemInstance:
    if args.instance:
        data = _read_data(args.instance)
        if not 0 <= args.index < len(data):
            raise CliError(f"--index {args.index} out of range for {len(data)} instances")
        return data[args.index]
    if args.goal is None:
        raise CliError("plan needs --goal or --instance")
    obs = [_floats(o, 3) for o in (args.obstacle or [])]
    for o in obs:
        if o[2] < 0:
            raise CliError("obstacle radius must be nonnegative")
    return ProblemInstance(_floats(args.goal, 3), np.array(obs).reshape(-1, 3))


def cmd_plan(args) -> None:
    inst = _instance_from_args(args)
    if args.checkpoint:
        net = _load_checkpoint(args.checkpoint)
        cfg = net.planner
        if net.config.input_dim != 3 + 3 * inst.n_obs:
            raise CliError(f"checkpoint expects {(net.config.input_dim - 3) // 3} obstacles, instance has {inst.n_obs}")
        corr = _correction(args)
        u = ev.network_call(net, corr)(inst)
        echo = {"checkpoint": str(args.checkpoint), "planner": cfg.to_dict(), **_correction_echo(corr)}
    else:
        cfg, scfg = _planner_cfg(args), _solver_cfg(args)
        u = solve(inst, cfg, scfg).u
        echo = {"solver": True, "planner": cfg.to_dict(), "restarts": scfg.restarts}
    from .cbf import all_residuals
    from .vehicle import rollout

    states = rollout(u, cfg)
    r = all_residuals(u, inst.obstacles, cfg)
    echo["goal"] = [float(v) for v in inst.x_go]
    echo["obstacles"] = [[float(v) for v in row] for row in inst.obstacles]
    header = ["step", "X", "Y", "phi", "v", "q"] + [f"r{j}" for j in range(inst.n_obs)]
    rows = []
    for k in range(cfg.N + 1):
        ctrl = [float(v) for v in u[k]] if k < cfg.N else ["", ""]
        res = [float(v) for v in r[k]] if k < cfg.N else [""] * inst.n_obs
        rows.append([k] + [float(v) for v in states[k]] + ctrl + res)
    _write(args.out, _config_line(echo) + _csv_text(header, rows))
    print(f"planned {cfg.N} steps, max residual {max(0.0, float(r.max()) if r.size else 0.0):.3e}; wrote {args.out}")


# --- simulate ---------------------------------------------------------------


def cmd_simulate(args) -> None:
    out = Path(args.out)
    if args.tasks:
        if not Path(args.tasks).exists():
            raise CliError(f"task suite not found: {args.tasks}")
        tasks = sim.load_tasks(args.tasks)
        suite = {"tasks": str(args.tasks)}
    elif args.n_tasks is not None:
        cfg_t = _planner_cfg(args)
        tasks = sim.generate_tasks(args.n_tasks, args.n_obs, args.seed, cfg_t, max_steps=args.max_steps)
        suite = {"n_tasks": args.n_tasks, "n_obs": args.n_obs, "seed": args.seed, "max_steps": args.max_steps}
        out.mkdir(parents=True, exist_ok=True)
        sim.save_tasks(tasks, out / "tasks.jsonl", suite)
    else:
        raise CliError("simulate needs --tasks or --n-tasks")
    if args.checkpoint:
        net = _load_checkpoint(args.checkpoint)
        cfg = net.planner
        corr = _correction(args)
        planner = sim.network_planner(net, cfg, corr)
        label = {"checkpoint": str(args.checkpoint), **_correction_echo(corr)}
    else:
        cfg = _planner_cfg(args)
        planner = sim.solver_planner(cfg, _solver_cfg(args))
        label = {"solver": True, "restarts": args.restarts}
    results = [sim.run_task(t, planner, cfg) for t in tasks]
    out.mkdir(parents=True, exist_ok=True)
    for i, r in enumerate(results):
        _write(out / f"trace_{i:03d}.csv", sim.trace_csv(r))
    rate, dist = sim.score(results, cfg)
    echo = {**suite, **label, "planner": cfg.to_dict()}
    rows = [[i, r.outcome, r.steps, r.final_distance, r.note] for i, r in enumerate(results)]
    _write(out / "episodes.csv", _config_line(echo) + _csv_text(["task", "outcome", "steps", "final_distance", "note"], rows))
    _write(out / "summary.csv", _config_line(echo) + _csv_text(["success_pct", "mean_distance", "n"], [[100.0 * rate, dist, len(results)]]))
    print(f"success {100.0 * rate:.1f}% mean distance {dist:.4f} over {len(results)} tasks")


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="somtp", description="Safe optimizer-network trajectory planning toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("generate", help="random instances split into train/test/val files")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--n-obs", type=int, default=3)
    g.add_argument("--half-extent", type=float, default=3.0)
    g.add_argument("--r-lo", type=float, default=0.0)
    g.add_argument("--r-hi", type=float, default=0.5)
    g.add_argument("--ratio", default="18,1,1", help="train,test,val parts")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("targets", help="reference-solver controls for supervised baselines")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    _add_planner(t)
    _add_solver(t)
    t.set_defaults(func=cmd_targets)

    tr = sub.add_parser("train", help="train a policy network")
    tr.add_argument("--method", required=True, choices=[m.value for m in Method])
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.add_argument("--report", help="epoch report CSV (default: <out>.report.csv)")
    tr.add_argument("--targets", help="targets file (mse/mae only)")
    tr.add_argument("--epochs", type=int, default=50)
    tr.add_argument("--batch", type=int, default=64)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--optimizer", choices=["sgd", "adam"], default="sgd")
    tr.add_argument("--lr", type=float, default=1e-4)
    tr.add_argument("--lambda-g", type=float, default=10.0)
    tr.add_argument("--hidden", type=int, default=256)
    tr.add_argument("--layers", type=int, default=5)
    tr.add_argument("--dropout", type=float, default=0.3)
    tr.add_argument("--nm", type=int, default=2)
    tr.add_argument("--im", type=int, default=2)
    tr.add_argument("--lambda-c", type=float, default=10.0, help="SLPG penalty weight")
    _add_planner(tr)
    tr.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="summary metrics on a dataset split")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="summary CSV")
    e.add_argument("--checkpoint")
    e.add_argument("--solver", action="store_true")
    e.add_argument("--label", help="method name in the report (default: checkpoint stem)")
    _add_correction(e)
    e.add_argument("--infeas-tol", type=float, default=1e-3)
    e.add_argument("--per-instance", help="per-instance CSV")
    e.add_argument("--timing-samples", type=int, default=None, help="instances to time (default all, 0 disables)")
    _add_planner(e)
    _add_solver(e)
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plan", help="plan one instance")
    pl.add_argument("--goal", help="x,y,phi in the local frame")
    pl.add_argument("--obstacle", action="append", help="x,y,r (repeatable)")
    pl.add_argument("--instance", help="dataset file")
    pl.add_argument("--index", type=int, default=0)
    pl.add_argument("--checkpoint")
    _add_correction(pl)
    pl.add_argument("--out", required=True)
    _add_planner(pl)
    _add_solver(pl)
    pl.set_defaults(func=cmd_plan)

    s = sub.add_parser("simulate", help="closed-loop episodes over a task suite")
    s.add_argument("--tasks", help="task suite file")
    s.add_argument("--n-tasks", type=int, help="generate this many tasks instead")
    s.add_argument("--n-obs", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-steps", type=int, default=200)
    s.add_argument("--checkpoint")
    _add_correction(s)
    s.add_argument("--out", required=True, help="output directory")
    _add_planner(s)
    _add_solver(s)
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except (CliError, CheckpointError, ds.DatasetError, ValueError, OSError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {msg}", file=sys.stderr)
        return 2
    return 0
