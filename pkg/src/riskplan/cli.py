"""Command line interface.

Subcommands:
  map build     build a belief-map snapshot by scanning a generated world
  plan geo      A* on a map snapshot, waypoints to CSV
  plan mpc      one kinodynamic planning call on a snapshot + geo path
  qp solve      solve a QP debug file
  sim run       Monte Carlo study over paired worlds
  sim plotdata  box-plot quartile table from a study.json
"""

import argparse
import json
import sys

import numpy as np


def _parse_xy(text):
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected 'x,y'")
    return tuple(parts)


def _cmd_map_build(args):
    from .config import load_config
    from .episode import SimConfig
    from .grid import save_snapshot
    from .mapping import RiskMapper
    from .sensor import sensor_model
    from .world import WorldSpec, gen_world

    if args.config:
        world_spec, sim, _ = load_config(args.config)
    else:
        world_spec, sim = WorldSpec(), SimConfig()
    world = gen_world(world_spec)
    if args.truth:
        save_snapshot(world.grid, args.out)
        print(f"wrote truth snapshot {args.out} ({world.grid.width}x{world.grid.height})")
        return 0
    grid_t = world.grid
    mapper = RiskMapper(grid_t.origin, grid_t.resolution, grid_t.width, grid_t.height,
                        cfg=sim.risk, alpha=args.alpha)
    rng = np.random.default_rng(world_spec.seed)
    pose = np.array([world.start[0], world.start[1], 0.0, 0.0])
    for i in range(args.scans):
        pose[2] = 2.0 * np.pi * i / max(args.scans, 1)
        obs = sensor_model(world, pose, sim.sensor_range, sim.noise, rng)
        mapper.update(obs, (pose[0], pose[1]))
    save_snapshot(mapper.grid, args.out)
    print(f"wrote belief snapshot {args.out} (alpha={args.alpha}, {args.scans} scans)")
    return 0


def _cmd_plan_geo(args):
    from .cvar import cvar_gaussian
    from .geom_planner import plan_astar
    from .grid import load_snapshot

    grid = load_snapshot(args.map)
    if args.alpha is not None and "risk_mu" in grid and "risk_sigma" in grid:
        grid["cvar"][:] = cvar_gaussian(grid["risk_mu"], grid["risk_sigma"], args.alpha)
    start = grid.world_to_cell(*_parse_xy(args.start))
    goal = grid.world_to_cell(*_parse_xy(args.goal))
    path = plan_astar(grid, start, goal, lam=args.length_weight)
    if path is None:
        print("unreachable", file=sys.stderr)
        return 1
    with open(args.out, "w") as fh:
        fh.write("x,y,cell_cvar\n")
        for (x, y), v in zip(path.waypoints, path.cell_cvar):
            fh.write(f"{x:.10g},{y:.10g},{v:.10g}\n")
    print(f"wrote {args.out}: {len(path.cells)} waypoints, "
          f"risk cost {path.total_risk_cost:.4f}, length {path.total_length:.2f} m")
    return 0


def _cmd_plan_mpc(args):
    from .config import load_config
    from .episode import SimConfig
    from .geom_planner import GeometricPath
    from .grid import load_snapshot
    from .mpc import MpcPlanner, RiskContext

    if args.config:
        _, sim, _ = load_config(args.config)
    else:
        sim = SimConfig()
    cfg = sim.mpc
    grid = load_snapshot(args.map)
    wp = np.loadtxt(args.path, delimiter=",", skiprows=1, ndmin=2)
    cells = np.column_stack(grid.world_to_cell(wp[:, 0], wp[:, 1]))
    geo = GeometricPath(waypoints=wp[:, :2], cells=cells, total_risk_cost=0.0,
                        total_length=0.0, cell_cvar=wp[:, 2] if wp.shape[1] > 2 else np.zeros(len(wp)),
                        cost=0.0)
    state = [float(v) for v in args.state.split(",")]
    if len(state) != cfg.n_x:
        raise SystemExit(f"--state needs {cfg.n_x} values for model {cfg.model}")
    ctx = RiskContext.from_grid(grid, cfg, center=(state[0], state[1]),
                                window_m=cfg.sd_activation + cfg.v_cruise * cfg.horizon * cfg.dt)
    planner = MpcPlanner(cfg)
    traj, status = planner.plan(np.array(state), geo, ctx)
    with open(args.out, "w") as fh:
        if cfg.model == "omni6":
            fh.write("t,x,y,theta,vx,vy,vtheta,ax,ay,atheta,step_cvar\n")
        else:
            fh.write("t,x,y,theta,vx,ax,vtheta_cmd,step_cvar\n")
        for k in range(traj.controls.shape[0]):
            row = [k * cfg.dt, *traj.states[k].tolist(), *traj.controls[k].tolist(),
                   float(traj.step_cvar[k])]
            fh.write(",".join(f"{v:.10g}" for v in row) + "\n")
    print(f"wrote {args.out}: status={status}, cost={traj.cost:.4f}, "
          f"violations={traj.violations}")
    return 0 if status != "emergency" else 2


def _cmd_qp_solve(args):
    from .qp import load_problem, solve_qp

    problem = load_problem(args.problem)
    sol = solve_qp(problem, tol_abs=args.tol_abs, tol_rel=args.tol_rel,
                   max_iter=args.max_iter)
    payload = {
        "status": sol.status,
        "iterations": sol.iterations,
        "objective": None if not sol.solved else sol.objective,
        "primal_residual": sol.primal_residual,
        "dual_residual": sol.dual_residual,
        "x": sol.x.tolist() if sol.solved else None,
        "y": sol.y.tolist() if sol.solved else None,
        "certificate": sol.certificate.tolist() if sol.certificate is not None else None,
    }
    text = json.dumps(payload, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        print(text)
    return 0 if sol.solved else 1


def _cmd_sim_run(args):
    from .config import load_config, write_default_config
    from .episode import SimConfig
    from .study import monte_carlo
    from .world import WorldSpec

    if args.write_default_config:
        write_default_config(args.write_default_config)
        print(f"wrote {args.write_default_config}")
        return 0
    if args.config:
        world_spec, sim, study = load_config(args.config)
    else:
        world_spec, sim, study = WorldSpec(), SimConfig(), {}
    alphas = [float(a) for a in args.alpha.split(",")] if args.alpha else study.get(
        "alphas", [0.05, 0.1, 0.5, 0.95])
    runs = args.runs if args.runs is not None else study.get("runs", 50)
    seed = args.seed if args.seed is not None else study.get("base_seed", 1000)

    def progress(i, a, rec):
        if args.quiet:
            return
        print(f"world {i} alpha {a:g}: {rec.reason} len={rec.path_length:.2f} "
              f"max_risk={rec.max_truth_risk:.3f} ({rec.wall_ms:.0f} ms)")

    result = monte_carlo(runs, alphas, seed, cfg=sim, world_spec=world_spec,
                         out_dir=args.out, progress=progress)
    st = result.sign_tests
    print(f"wrote study to {args.out}")
    print(f"paired sign tests (alpha {st['alpha_hi']:g} vs {st['alpha_lo']:g}, "
          f"{st['paired_runs']} pairs):")
    print(f"  length greater at high alpha: p={st['length_hi_gt_lo']['p_value']:.4g}")
    print(f"  max risk lower at high alpha: p={st['risk_hi_lt_lo']['p_value']:.4g}")
    return 0


def _cmd_sim_plotdata(args):
    import os

    path = args.study
    if os.path.isdir(path):
        path = os.path.join(path, "study.json")
    with open(path) as fh:
        payload = json.load(fh)
    cols = ["alpha", "metric", "q1", "median", "q3", "whisker_lo", "whisker_hi", "n_outliers"]
    lines = [",".join(cols)]
    for a in payload["alphas"]:
        stats = payload["stats"][f"{a:g}"]
        for metric in ("path_length", "max_risk"):
            s = stats[metric]
            lines.append(",".join(str(v) for v in [
                a, metric, s["q1"], s["median"], s["q3"], s["lo"], s["hi"],
                len(s["outliers"]),
            ]))
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="riskplan",
                                description="risk-aware traversability mapping and planning")
    sub = p.add_subparsers(dest="command", required=True)

    p_map = sub.add_parser("map", help="belief map tools").add_subparsers(
        dest="subcommand", required=True)
    b = p_map.add_parser("build", help="scan a generated world into a snapshot")
    b.add_argument("--config", help="YAML config (world/sim sections)")
    b.add_argument("--out", required=True)
    b.add_argument("--alpha", type=float, default=0.9)
    b.add_argument("--scans", type=int, default=8)
    b.add_argument("--truth", action="store_true", help="dump the truth grid instead")
    b.set_defaults(func=_cmd_map_build)

    p_plan = sub.add_parser("plan", help="planners").add_subparsers(
        dest="subcommand", required=True)
    g = p_plan.add_parser("geo", help="A* geometric plan to CSV")
    g.add_argument("--map", required=True)
    g.add_argument("--start", required=True, help="x,y (m)")
    g.add_argument("--goal", required=True, help="x,y (m)")
    g.add_argument("--alpha", type=float, default=None,
                   help="re-evaluate the CVaR layer at this risk level")
    g.add_argument("--length-weight", type=float, default=0.01)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_plan_geo)
    m = p_plan.add_parser("mpc", help="one kinodynamic planning call")
    m.add_argument("--map", required=True)
    m.add_argument("--path", required=True, help="geo path CSV from 'plan geo'")
    m.add_argument("--config", help="YAML config for the mpc section")
    m.add_argument("--state", required=True, help="comma-separated state vector")
    m.add_argument("--out", required=True)
    m.set_defaults(func=_cmd_plan_mpc)

    p_qp = sub.add_parser("qp", help="QP solver").add_subparsers(
        dest="subcommand", required=True)
    q = p_qp.add_parser("solve", help="solve a QP debug file")
    q.add_argument("--problem", required=True)
    q.add_argument("--tol-abs", type=float, default=1e-4)
    q.add_argument("--tol-rel", type=float, default=1e-4)
    q.add_argument("--max-iter", type=int, default=4000)
    q.add_argument("--out")
    q.set_defaults(func=_cmd_qp_solve)

    p_sim = sub.add_parser("sim", help="simulation studies").add_subparsers(
        dest="subcommand", required=True)
    r = p_sim.add_parser("run", help="Monte Carlo study")
    r.add_argument("--config")
    r.add_argument("--alpha", help="comma-separated risk levels")
    r.add_argument("--runs", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", default="study_out")
    r.add_argument("--quiet", action="store_true")
    r.add_argument("--write-default-config", metavar="PATH",
                   help="write the documented default config and exit")
    r.set_defaults(func=_cmd_sim_run)
    d = p_sim.add_parser("plotdata", help="quartile table from study.json")
    d.add_argument("--study", required=True, help="study dir or study.json")
    d.add_argument("--out")
    d.set_defaults(func=_cmd_sim_plotdata)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
