"""Command-line front end: simulate, analyze, decompose, estimate, bench.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import benchmark as bm
from .config import ConfigError, RunConfig, load_config
from .cstr4 import Q_NOMINAL, TALLY_ORDER, CSTR4Params, refined_steady_state
from .decomposition import (DecompositionResult, extract_subsystems, subsystem_observability_check)
from .graph import Partition, build_graph, louvain_levels, modularity, rank_partitions
from .model import augment, available_models, get_model
from .selection import cutoff_value, orthogonalize_select, tally_selection
from .sensitivity import (build_sensitivity_matrix, normalize_sensitivity, rank_and_condition)

log = logging.getLogger("dmhe")


class _Scenario:
    """Operating point, scales and nominal inputs for a registered model."""

    def __init__(self, model_id: str):
        if model_id not in available_models():
            raise ConfigError(f"unknown model id {model_id!r}; known: {available_models()}")
        if model_id != "cstr4":
            raise ConfigError(f"no simulation scenario registered for {model_id!r}")
        self.model = get_model(model_id)
        params = CSTR4Params()
        self.x0 = refined_steady_state(params)
        self.theta = params.theta()
        self.u = Q_NOMINAL
        self.scales, self.output_scales = bm.cstr4_scales(params)
        self.tally_order = TALLY_ORDER

    def trajectory(self, steps: int, seed: int, noise_level: float):
        return bm.truth_trajectory(self.model, steps, seed, noise_level)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise RuntimeError(f"output directory {out} is not writable: {exc}") from None
    return out


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2))
    return path


def cmd_simulate(cfg: RunConfig) -> dict:
    sc = _Scenario(cfg.model)
    out = _out_dir(cfg)
    traj = sc.trajectory(cfg.steps, cfg.seed, cfg.noise_level)
    return {"trajectory": str(traj.to_csv(out / "trajectory.csv"))}


def _selections(cfg: RunConfig, sc: _Scenario):
    aug = augment(sc.model)
    traj = sc.trajectory(cfg.steps, cfg.seed, 0.0)
    alpha = cutoff_value(cfg.w_bar, cfg.v_bar)
    reports, sels, last = [], [], None
    N = min(cfg.horizon, cfg.steps + 1)
    for t in range(N - 1, cfg.steps + 1):
        S = normalize_sensitivity(build_sensitivity_matrix(aug, traj, t, N), sc.scales, sc.output_scales)
        reports.append(rank_and_condition(S, cfg.rank_tol))
        sels.append(orthogonalize_select(S.S, alpha, range(sc.model.n_x), labels=aug.names))
        last = S
    return traj, reports, sels, last, alpha


def cmd_analyze(cfg: RunConfig) -> dict:
    sc = _Scenario(cfg.model)
    out = _out_dir(cfg)
    _, reports, sels, last, alpha = _selections(cfg, sc)
    ranks = [r.rank for r in reports]
    values, counts = np.unique(ranks, return_counts=True)
    obs = {"n_windows": len(reports), "window": cfg.horizon, "columns": last.S.shape[1],
           "rank_histogram": {str(int(v)): int(c) for v, c in zip(values, counts)},
           "ranks": ranks,
           "well_conditioned_fraction": float(np.mean([r.condition <= cfg.cond_tol for r in reports])),
           "last_window": reports[-1].to_dict()}
    tally = tally_selection(sels, augment(sc.model).names, sc.tally_order)
    files = {"observability": str(_write_json(out / "observability.json", obs)),
             "selection_tally": str(tally.to_csv(out / "selection_tally.csv")),
             "selection": str(_write_json(out / "selection.json",
                                          {"alpha": alpha, "steps": [s.to_dict() for s in sels]})),
             "sensitivity": str(last.to_csv(out / "sensitivity_last_window.csv"))}
    print(f"rank {reports[-1].rank} of {last.S.shape[1]} (mode {int(values[np.argmax(counts)])}); "
          f"selected {sels[-1].names('greedy')}")
    return files


def cmd_decompose(cfg: RunConfig, variables=None, single: bool = False) -> dict:
    sc = _Scenario(cfg.model)
    out = _out_dir(cfg)
    model = sc.model
    aug_names = model.augmented_names
    if variables:
        unknown = [v for v in variables if v not in aug_names]
        if unknown:
            raise ConfigError(f"unknown variables {unknown}")
        selected = sorted(aug_names.index(v) for v in variables)
        traj = sc.trajectory(cfg.steps, cfg.seed, 0.0)
    else:
        traj, _, sels, _, _ = _selections(cfg, sc)
        selected = sorted(sels[-1].selected)
    eq = (sc.x0, sc.theta)
    graph = build_graph(model, selected, eq, sc.u, scales=(sc.x0, sc.theta, sc.output_scales))
    if graph.m == 0:
        raise RuntimeError("graph has no edges; modularity is undefined")
    if single:
        part = Partition(np.zeros(graph.n, dtype=int))
        candidates = [(part, modularity(graph, part))]
    else:
        res = louvain_levels(graph)
        part = res.partition
        candidates = rank_partitions(graph, restarts=cfg.restarts, seed=cfg.seed)
    specs = extract_subsystems(graph, part, model, eq, sc.u)
    N = min(cfg.horizon, len(traj))
    verdicts = subsystem_observability_check(specs, augment(model), traj, N, sc.scales, sc.output_scales,
                                             rank_tol=cfg.rank_tol)
    dec = DecompositionResult(part, modularity(graph, part), specs, verdicts, candidates, graph)
    dec.check()
    files = {"decomposition": str(out / "decomposition.json"),
             "edges": str(graph.to_edge_csv(out / "graph_edges.csv")),
             "adjacency": str(graph.to_adjacency_csv(out / "graph_adjacency.csv"))}
    dec.to_json(model, files["decomposition"])
    print(f"omega {dec.omega:.4f} with {part.n_communities} communities")
    return files


def _cases(cfg: RunConfig):
    return [1, 2, 3, 4] if cfg.case == "all" else [int(cfg.case)]


def _case_cfg(cfg: RunConfig, c: int) -> bm.CaseConfig:
    return bm.case_config(c, steps=cfg.steps, horizon=cfg.horizon, mismatch=cfg.mismatch,
                          noise_level=cfg.noise_level, q_std=cfg.q_std, r_std=cfg.r_std,
                          p_state_std=cfg.p_state_std, p_param_std=cfg.p_param_std, max_iter=cfg.max_iter,
                          cutoff=cutoff_value(cfg.w_bar, cfg.v_bar))


def cmd_estimate(cfg: RunConfig) -> dict:
    _Scenario(cfg.model)
    out = _out_dir(cfg)
    files = {}
    for c in _cases(cfg):
        res = bm.run_case(_case_cfg(cfg, c), cfg.seed)
        model = get_model(cfg.model)
        files[f"case{c}_estimates"] = str(bm.write_estimate_log(res, model, out / f"case{c}_estimates.csv"))
        files[f"case{c}_rmse"] = str(res.report.to_csv(out / f"case{c}_rmse.csv"))
        summary = res.summary()
        summary["config"] = res.config.to_dict()
        files[f"case{c}_summary"] = str(_write_json(out / f"case{c}_summary.json", summary))
        print(f"case {c}: RMSE_x {summary['rmse_x']:.2f}%  RMSE_theta {summary['rmse_theta']:.2f}%  "
              f"RMSE_xtheta {summary['rmse_xtheta']:.2f}%")
    return files


def cmd_bench(cfg: RunConfig) -> dict:
    _Scenario(cfg.model)
    out = _out_dir(cfg)
    files, summaries = {}, []
    for c in _cases(cfg):
        res = bm.run_case(_case_cfg(cfg, c), cfg.seed)
        for k, v in bm.write_case_outputs(res, out).items():
            files[f"case{c}_{k}"] = v
        s = res.summary()
        summaries.append(s)
        print(f"case {c}: RMSE_x {s['rmse_x']:.2f}%  RMSE_theta {s['rmse_theta']:.2f}%  "
              f"RMSE_xtheta {s['rmse_xtheta']:.2f}%  ({s['wall_time_s']:.0f} s)")
    if len(summaries) > 1:
        table = out / "comparison.csv"
        table.write_text(bm.comparison_table(summaries))
        files["comparison"] = str(table)
    return files


COMMANDS = {"simulate": cmd_simulate, "analyze": cmd_analyze, "decompose": cmd_decompose,
            "estimate": cmd_estimate, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmhe", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("model_pos", nargs="?", metavar="MODEL", help="model id (same as --model)")
        s.add_argument("--model")
        s.add_argument("--config", help="INI file with [run], [analysis], [estimation] sections")
        s.add_argument("--seed", type=int)
        s.add_argument("--steps", type=int)
        s.add_argument("--horizon", type=int)
        s.add_argument("--out")
        s.add_argument("--case", choices=["1", "2", "3", "4", "all"])
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "decompose":
            s.add_argument("--variables", nargs="+", help="use these variables instead of the selection")
            s.add_argument("--single-community", action="store_true", help="score the one-community partition")
    return p


def main(argv=None) -> int:
    # argparse itself exits with status 2 on malformed arguments
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.model and args.model_pos and args.model != args.model_pos:
        print("error: conflicting model ids", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config, model=args.model or args.model_pos, seed=args.seed, steps=args.steps,
                          horizon=args.horizon, out=args.out, case=args.case)
        if cfg.model not in available_models():
            raise ConfigError(f"unknown model id {cfg.model!r}; known: {available_models()}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    start = time.perf_counter()
    try:
        kwargs = {}
        if args.command == "decompose":
            kwargs = {"variables": args.variables, "single": args.single_community}
        files = COMMANDS[args.command](cfg, **kwargs)
        cfg.to_ini(Path(cfg.out) / f"{args.command}_config.ini")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit code 1
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - start)
    for k, v in files.items():
        print(f"{k}: {v}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
