"""Command-line entry point: glacier-vi {simulate,coercivity,error-terms,halfar-verify}."""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import config as config_mod
from .errors import InvalidArgument, NonConvergence, SolverFailure
from .stokes import SECPERA

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3

log = logging.getLogger("glacier_vi")


def _load(args):
    cfg = config_mod.load(args.config) if args.config else config_mod.ExperimentConfig().validate()
    if args.out:
        cfg.out = args.out
    if getattr(args, "seed", None) is not None:
        cfg.sampling.seed = args.seed
    if getattr(args, "mask", None) is not None:
        cfg.sampling.mask = args.mask
    if getattr(args, "resolution", None) is not None:
        cfg.mesh.nx = args.resolution
    cfg.validate()
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "effective_config.txt"), "w") as f:
        f.write(cfg.to_text())
    return cfg


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_simulate(args):
    from .experiments import halfar_surface, config_dome, run_simulation
    cfg = _load(args)
    step_log = os.path.join(cfg.out, "step_log.csv")
    if os.path.exists(step_log):
        os.remove(step_log)
    t0 = time.time()

    def progress(k, n, t, s):
        log.info("step %d/%d  t=%.2f yr  max thickness %.1f m", k, n, t / SECPERA, (s.values - tr_bed).max())
    from .experiments import build_bed, config_bed
    from .mesh import build_interval
    tr_bed = build_bed(config_bed(cfg), build_interval(cfg.mesh.L, cfg.mesh.nx)).values
    tr = run_simulation(cfg, step_log=step_log, progress=progress)
    tr.to_csv(os.path.join(cfg.out, "snapshots.csv"))
    params = cfg.phys_params()
    dome = config_dome(cfg, params)
    summary = dict(
        steps=tr.steps, snapshots=len(tr.times), newton_iterations=tr.newton_iterations,
        wall_seconds=time.time() - t0, failure=tr.failure,
        final_time_s=tr.times[-1], final_max_thickness_m=float((tr.surfaces[-1].values - tr.bed.values).max()),
    )
    if cfg.bed.kind == "flat" and cfg.run.smb == 0.0:
        ex = halfar_surface(dome.t0 + tr.times[-1], tr.bed.mesh, dome)
        summary["halfar_max_thickness_m"] = float(ex.values.max())
        summary["halfar_relative_error"] = abs(summary["final_max_thickness_m"] - ex.values.max()) / ex.values.max()
    _write_json(os.path.join(cfg.out, "simulate_summary.json"), summary)
    if tr.failure:
        print(f"solver failure: {tr.failure}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def coercivity_pools(cfg, nx=None, progress=None):
    from .experiments import cached_run, pool_from_trajectories
    if nx is not None:
        cfg.mesh.nx = nx
    cache = os.path.join(cfg.out, "cache")
    pools = []
    for kind in cfg.run.beds:
        trs = []
        for smb in cfg.run.smb_list:
            tr = cached_run(cfg, kind, smb, cache, with_velocity=True, progress=progress)
            if tr.failure:
                raise SolverFailure(f"{kind} bed, smb={smb}: {tr.failure}")
            trs.append(tr)
        pools.append(pool_from_trajectories(kind, trs))
    return pools


def cmd_coercivity(args):
    from .experiments import sample_ratios, write_ratio_csv
    cfg = _load(args)
    pools = coercivity_pools(cfg)
    s = cfg.sampling
    samples, summary = sample_ratios(pools, s.n_pairs, s.seed, mask=s.mask,
                                     L_scale=cfg.physics.L_scale, r_exp=cfg.step.r_exp)
    write_ratio_csv(samples, os.path.join(cfg.out, "ratios.csv"))
    _write_json(os.path.join(cfg.out, "ratio_summary.json"),
                dict(nx=cfg.mesh.nx, mask_m=s.mask, seed=s.seed, units="s^-1", cases=summary))
    return EXIT_OK


def cmd_error_terms(args):
    from .experiments import error_terms, refinement_pair
    cfg = _load(args)
    fine_nx = cfg.mesh.nx
    coarse_nx = args.coarse if args.coarse is not None else cfg.sampling.coarse_nx
    s_ref, s_h, b, b_h, ell = refinement_pair(cfg, fine_nx, coarse_nx)
    et = error_terms(s_ref, s_h, b, b_h, ell, cfg.sampling.alpha, cfg.step.dt,
                     q_exp=cfg.step.r_exp, r_exp=cfg.step.r_exp, L_scale=cfg.physics.L_scale,
                     active_tol=cfg.sampling.active_tol)
    out = et.to_json()
    out.update(fine_nx=fine_nx, coarse_nx=coarse_nx, bed=cfg.bed.kind)
    _write_json(os.path.join(cfg.out, "error_terms.json"), out)
    return EXIT_OK


def cmd_halfar_verify(args):
    from .experiments import config_dome, halfar_margin, halfar_surface
    from .mesh import build_interval
    cfg = _load(args)
    params = cfg.phys_params()
    dome = config_dome(cfg, params)
    base = build_interval(cfg.mesh.L, cfg.mesh.nx)
    rows = []
    for t in (dome.t0, dome.t0 + cfg.run.T):
        s = halfar_surface(t, base, dome)
        vol = float(np.sum(0.5 * (s.values[:-1] + s.values[1:]) * base.dx))
        rows.append(dict(t_s=t, max_thickness_m=float(s.values.max()), margin_m=halfar_margin(t, dome), area_m2=vol))
    out = dict(H0_m=dome.H0, R0_m=dome.R0, t0_s=dome.t0, equivalent_softness=params.softness(), profiles=rows)
    _write_json(os.path.join(cfg.out, "halfar.json"), out)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="glacier-vi", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--out", help="output directory (overrides config)")
        sp.add_argument("--seed", type=int, help="RNG seed (overrides sampling.seed)")
        sp.add_argument("--mask", type=float, help="thickness mask in metres for ratios")
        sp.add_argument("--resolution", type=int, help="number of horizontal cells (overrides mesh.nx)")
        return sp

    common(sub.add_parser("simulate", help="one (bed, SMB) run")).set_defaults(func=cmd_simulate)
    common(sub.add_parser("coercivity", help="all runs, sampled ratio statistics")).set_defaults(func=cmd_coercivity)
    et = common(sub.add_parser("error-terms", help="bed-mismatch and interpolation error terms"))
    et.add_argument("--coarse", type=int, help="coarse nx (default sampling.coarse_nx)")
    et.set_defaults(func=cmd_error_terms)
    common(sub.add_parser("halfar-verify", help="analytic dome summary")).set_defaults(func=cmd_halfar_verify)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except InvalidArgument as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverFailure, NonConvergence) as err:
        print(f"solver failure: {err}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
