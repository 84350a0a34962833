"""Monte Carlo study: paired-seed episodes across risk levels.

Runs n worlds, each executed once per risk level with identical truth
(paired comparison), aggregates path-length and max-risk distributions
into box-plot quartile summaries, and runs paired sign tests between the
extreme risk levels.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .episode import EpisodeRecord, SimConfig, run_episode
from .world import WorldSpec, gen_world


def study_world_spec(**overrides):
    """World generation parameters of the distance-vs-risk study.

    A 20 m map sized for 8 m goals: a correlated sub-lethal hazard field
    with calibrated lethal rubble, two walls, one pit and one water patch.
    """
    base = dict(
        size=(20.0, 20.0), resolution=0.2, lethal_fraction=0.06,
        correlation_length=1.6, field_risk_quantile=0.93,
        n_walls=2, n_pits=1, n_water=1, goal_distance=8.0,
    )
    base.update(overrides)
    return WorldSpec(**base)


@dataclass
class StudyResult:
    alphas: list
    records: dict                 # alpha -> [EpisodeRecord]
    stats: dict                   # alpha -> metric -> quartile summary
    sign_tests: dict
    runs: int


def _box_stats(values):
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {k: float("nan") for k in ("q1", "median", "q3", "lo", "hi")} | {"outliers": []}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo_fence = q1 - 1.5 * iqr
    hi_fence = q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    lo = float(inside.min()) if inside.size else float(v.min())
    hi = float(inside.max()) if inside.size else float(v.max())
    outliers = sorted(float(x) for x in v[(v < lo_fence) | (v > hi_fence)])
    return {"q1": float(q1), "median": float(med), "q3": float(q3),
            "lo": lo, "hi": hi, "outliers": outliers}


def _paired_sign_test(hi_vals, lo_vals, direction):
    """One-sided sign test that hi > lo (direction=+1) or hi < lo (-1)."""
    hi_vals = np.asarray(hi_vals, dtype=float)
    lo_vals = np.asarray(lo_vals, dtype=float)
    diff = (hi_vals - lo_vals) * direction
    wins = int((diff > 0).sum())
    ties = int((diff == 0).sum())
    n = diff.size - ties
    if n == 0:
        return {"wins": wins, "n": 0, "p_value": 1.0}
    p = stats.binomtest(wins, n, 0.5, alternative="greater").pvalue
    return {"wins": wins, "n": n, "p_value": float(p)}


def monte_carlo(n_runs, alphas, base_seed, cfg=None, world_spec=None, out_dir=None,
                progress=None):
    """Run the paired Monte Carlo study.

    Episodes with the same run index share the seed, hence the identical
    truth world and goal, across all risk levels.  Returns a
    :class:`StudyResult`; when ``out_dir`` is given, also writes
    episodes.csv, study.json, per-episode trajectory CSVs and the
    behavior event log.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    cfg = cfg if cfg is not None else SimConfig()
    base_spec = world_spec if world_spec is not None else WorldSpec()
    alphas = [float(a) for a in alphas]
    records = {a: [] for a in alphas}
    for i in range(n_runs):
        spec = dataclasses.replace(base_spec, seed=base_seed + i)
        world = gen_world(spec)
        for a in alphas:
            rec = run_episode(world, a, cfg)
            records[a].append(rec)
            if progress is not None:
                progress(i, a, rec)

    stats_out = {}
    for a in alphas:
        lengths = [r.path_length for r in records[a] if r.success]
        risks = [r.max_truth_risk for r in records[a]]
        stats_out[a] = {
            "path_length": _box_stats(lengths),
            "max_risk": _box_stats(risks),
            "success_rate": float(np.mean([r.success for r in records[a]])),
            "n_success": int(sum(r.success for r in records[a])),
        }

    hi, lo = max(alphas), min(alphas)
    both_ok = [i for i in range(n_runs)
               if records[hi][i].success and records[lo][i].success]
    sign_tests = {
        "alpha_hi": hi,
        "alpha_lo": lo,
        "paired_runs": len(both_ok),
        "length_hi_gt_lo": _paired_sign_test(
            [records[hi][i].path_length for i in both_ok],
            [records[lo][i].path_length for i in both_ok], +1),
        "risk_hi_lt_lo": _paired_sign_test(
            [records[hi][i].max_truth_risk for i in both_ok],
            [records[lo][i].max_truth_risk for i in both_ok], -1),
    }
    result = StudyResult(alphas=alphas, records=records, stats=stats_out,
                         sign_tests=sign_tests, runs=n_runs)
    if out_dir is not None:
        write_study(result, out_dir)
    return result


_EPISODE_FIELDS = ("seed", "alpha", "success", "reason", "steps", "path_length",
                   "max_truth_risk", "max_step_cvar", "j_pos", "wall_ms",
                   "final_distance")


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def write_study(result, out_dir):
    """Write episodes.csv, study.json, trajectories and behavior events."""
    os.makedirs(out_dir, exist_ok=True)
    traj_dir = os.path.join(out_dir, "trajectories")
    os.makedirs(traj_dir, exist_ok=True)

    with open(os.path.join(out_dir, "episodes.csv"), "w") as fh:
        fh.write(",".join(_EPISODE_FIELDS) + "\n")
        for a in result.alphas:
            for rec in result.records[a]:
                fh.write(",".join(_fmt(getattr(rec, f)) for f in _EPISODE_FIELDS) + "\n")

    with open(os.path.join(out_dir, "events.jsonl"), "w") as fh:
        for a in result.alphas:
            for rec in result.records[a]:
                for ev in rec.events:
                    fh.write(json.dumps({"seed": rec.seed, "alpha": a, **ev}) + "\n")

    for a in result.alphas:
        for rec in result.records[a]:
            name = f"ep_{rec.seed}_a{a:g}.csv"
            ncol = rec.trajectory.shape[1] if rec.trajectory.size else 0
            header = _trajectory_header(ncol)
            with open(os.path.join(traj_dir, name), "w") as fh:
                fh.write(header + "\n")
                for row in rec.trajectory:
                    fh.write(",".join(f"{v:.10g}" for v in row) + "\n")

    payload = {
        "runs": result.runs,
        "alphas": result.alphas,
        "stats": {f"{a:g}": result.stats[a] for a in result.alphas},
        "sign_tests": result.sign_tests,
    }
    with open(os.path.join(out_dir, "study.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _trajectory_header(ncol):
    if ncol == 8:      # diff4: t, x, y, th, vx, ax, vth_cmd, cvar
        return "t,x,y,theta,vx,ax,vtheta_cmd,step_cvar"
    if ncol == 11:     # omni6
        return "t,x,y,theta,vx,vy,vtheta,ax,ay,atheta,step_cvar"
    return ",".join(f"c{i}" for i in range(ncol))


def plot_data(result):
    """Box-plot-ready quartile rows: one per (alpha, metric)."""
    rows = []
    for a in result.alphas:
        for metric in ("path_length", "max_risk"):
            s = result.stats[a][metric]
            rows.append({
                "alpha": a, "metric": metric, "q1": s["q1"], "median": s["median"],
                "q3": s["q3"], "whisker_lo": s["lo"], "whisker_hi": s["hi"],
                "n_outliers": len(s["outliers"]),
            })
    return rows


def write_plot_data(result, path):
    rows = plot_data(result)
    cols = ["alpha", "metric", "q1", "median", "q3", "whisker_lo", "whisker_hi", "n_outliers"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in cols) + "\n")
