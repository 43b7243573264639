"""Command-line surface: experiment orchestration and persistence.

Every command reads one JSON config, writes its artifacts (CSV for curves,
JSON for summaries, VTK for field snapshots) into the output directory, and
finishes by writing a run manifest with the config hash and per-file
checksums.  Exit codes: 0 success, 1 numerical failure, 2 config error.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import os
import sys
import tempfile

import numpy as np

from . import __version__
from .grid import NumericalFailure, Vec2, fields_to_vtk
from .boussinesq import solve_state, energy_report
from .objective import Perturbation
from .optimizer import (projected_gradient, pointwise_sign_check,
                        measure_condition_estimate, adjoint_restriction_samples,
                        bang_bang_fraction)
from . import sensitivity as sen
from . import stability_lab as lab
from .config import (ConfigError, ExperimentConfig, load_config, default_config,
                     build_problem, opt_options)

COMMANDS = ("solve", "optimize", "taylor-test", "duality-check", "mms",
            "tikhonov-path", "stability-sweep", "growth-probe",
            "second-order-check", "measure-condition")


# ---------------------------------------------------------------------------
# persistence helpers
# ---------------------------------------------------------------------------

def _sha256(path):
    hsh = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            hsh.update(chunk)
    return hsh.hexdigest()


class Run:
    """Collects produced files and writes the manifest atomically at the end."""

    def __init__(self, out_dir, cfg: ExperimentConfig, cmd, seed):
        self.out_dir = out_dir
        self.cfg = cfg
        self.cmd = cmd
        self.seed = seed
        self.files = []
        self.started = datetime.datetime.now(datetime.timezone.utc).isoformat()
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name):
        p = os.path.join(self.out_dir, name)
        self.files.append(p)
        return p

    def header_lines(self):
        return [f"config_hash={self.cfg.hash()}",
                f"build=convecopt-{__version__}",
                f"command={self.cmd}",
                f"seed={self.seed}"]

    def write_csv(self, name, columns, rows, units=None):
        p = self.path(name)
        with open(p, "w") as fh:
            for line in self.header_lines():
                fh.write(f"# {line}\n")
            if units:
                fh.write(f"# units: {units}\n")
            fh.write(",".join(columns) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
        return p

    def write_json(self, name, obj):
        p = self.path(name)
        payload = {"provenance": {"config_hash": self.cfg.hash(),
                                  "build": f"convecopt-{__version__}",
                                  "command": self.cmd,
                                  "seed": self.seed},
                   **obj}
        with open(p, "w") as fh:
            json.dump(payload, fh, indent=2, default=_json_default)
            fh.write("\n")
        return p

    def finish(self):
        manifest = {
            "config_hash": self.cfg.hash(),
            "build": f"convecopt-{__version__}",
            "command": self.cmd,
            "seed": self.seed,
            "started": self.started,
            "ended": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "files": [{"path": os.path.basename(p), "sha256": _sha256(p)}
                      for p in self.files],
        }
        final = os.path.join(self.out_dir, "manifest.json")
        fd, tmp = tempfile.mkstemp(dir=self.out_dir, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")
        os.replace(tmp, final)
        return final


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def _json_default(o):
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, float) and not np.isfinite(o):
        return str(o)
    raise TypeError(f"not serializable: {type(o)}")


def _clean(x):
    """Replace non-finite floats for JSON."""
    if isinstance(x, float) and not np.isfinite(x):
        return str(x)
    return x


# ---------------------------------------------------------------------------
# shared steps
# ---------------------------------------------------------------------------

def _optimize_base(prob, cfg, run=None):
    opts = opt_options(cfg)
    res = projected_gradient(prob, prob.space.zero(), opts)
    if run is not None:
        rows = []
        for i in range(len(res.J_history)):
            step = res.step_history[i - 1] if 0 < i <= len(res.step_history) else 0.0
            nbt = res.backtrack_history[i - 1] if 0 < i <= len(res.backtrack_history) else 0
            rows.append((i, res.J_history[i], res.kkt_history[i], step, nbt,
                         res.bang_fraction[0], res.bang_fraction[1]))
        run.write_csv("iterates.csv",
                      ["iter", "J", "kkt", "step", "backtracks",
                       "bang_fraction_q", "bang_fraction_th"], rows,
                      units="J dimensionless, kkt L1-normalized")
    return res, opts


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_solve(cfg, run, seed, snapshot_stride=0):
    prob = build_problem(cfg, seed)
    ctrl = prob.space.zero()
    traj = prob.state(ctrl)
    rep = energy_report(prob.grid, prob.tg, traj,
                        prob._sources_for(ctrl, Perturbation()),
                        prob.u0, prob.theta0)
    run.write_csv("energy.csv",
                  ["k", "t", "ke_u", "ke_theta", "enstrophy_u", "grad_theta"],
                  [tuple(r) for r in rep.series],
                  units="t time units; energies are squared L2 norms")
    if snapshot_stride and snapshot_stride > 0:
        for k in range(0, prob.tg.nt + 1, snapshot_stride):
            fields_to_vtk(prob.grid, run.path(f"state_{k:05d}.vtk"),
                          scalars={"theta": traj.theta[k], "p": traj.p[k]},
                          vectors={"u": traj.u[k]},
                          title=f"state level {k}")
    run.write_json("summary.json", {
        "max_energy": rep.max_energy, "dissipation": rep.dissipation,
        "data_norm": rep.data_norm, "energy_ratio": rep.ratio,
        "max_div": max(prob.grid.norm_lp(prob.grid.divergence(u), np.inf)
                       for u in traj.u)})
    return 0


def cmd_optimize(cfg, run, seed, snapshot_stride=0):
    prob = build_problem(cfg, seed)
    res, _ = _optimize_base(prob, cfg, run)
    vio = pointwise_sign_check(prob, res.control)
    run.write_json("summary.json", {
        "J": res.J_history[-1], "kkt": res.kkt_history[-1],
        "iterations": res.iterations, "termination": res.termination,
        "bang_fraction_q": res.bang_fraction[0],
        "bang_fraction_th": res.bang_fraction[1],
        "sign_violation_mass_q": vio.mass_q,
        "sign_violation_mass_th": vio.mass_th,
        "admissible": res.control.is_admissible()})
    np.savez(run.path("control.npz"), q=res.control.q, th=res.control.th)
    return 0


def cmd_taylor(cfg, run, seed, snapshot_stride=0):
    prob = build_problem(cfg, seed)
    tcfg = cfg["taylor"]
    order = int(tcfg.get("order", 1))
    rows = []
    slopes = []
    for s in range(int(tcfg["seeds"])):
        rng = np.random.default_rng(seed + 1000 + s)
        ctrl = prob.space.zero()
        ctrl.q += 0.3 * rng.standard_normal(ctrl.q.shape)
        ctrl.th += 0.3 * rng.standard_normal(ctrl.th.shape)
        delta = prob.space.zero()
        delta.q += tcfg["amplitude"] * rng.standard_normal(delta.q.shape)
        delta.th += tcfg["amplitude"] * rng.standard_normal(delta.th.shape)
        J0 = prob.eval_J(ctrl)
        dd = prob.grad_J(ctrl).dot_l2(delta)
        j2 = prob.second_variation(ctrl, delta) if order >= 2 else 0.0
        ts, rs = [], []
        for t in tcfg["t_values"]:
            rem = prob.eval_J(ctrl.axpy(t, delta)) - J0 - t * dd
            if order >= 2:
                rem -= 0.5 * t * t * j2
            rows.append((s, t, abs(rem)))
            if abs(rem) > 0:
                ts.append(t)
                rs.append(abs(rem))
        if len(ts) >= 2:
            sl, _, r2 = lab.loglog_fit(ts, rs)
            slopes.append({"seed": s, "slope": sl, "r2": r2})
    run.write_csv("taylor.csv", ["seed", "t", "remainder"], rows)
    run.write_json("summary.json", {"order": order, "fits": slopes})
    return 0


def cmd_duality(cfg, run, seed, snapshot_stride=0):
    prob = build_problem(cfg, seed)
    g, pp, tg = prob.grid, prob.phys, prob.tg
    residuals = []
    for s in range(int(cfg["duality"]["seeds"])):
        rng = np.random.default_rng(seed + 2000 + s)

        def rv():
            w = Vec2(0.3 * rng.standard_normal((g.nx + 1, g.ny)),
                     0.3 * rng.standard_normal((g.nx, g.ny + 1)))
            return w.zero_normal_boundary()

        def rs():
            return 0.3 * rng.standard_normal((g.nx, g.ny))

        from .boussinesq import SourceData
        base = solve_state(g, pp, tg, SourceData(rv(), rs()),
                           g.leray_project(rv()), rs(), check_cfl=False)
        res = sen.duality_residual(
            g, pp, tg, base,
            tanF=[rv() for _ in range(tg.nt)], tanG=[rs() for _ in range(tg.nt)],
            v0=g.leray_project(rv()), theta0=rs(),
            adjF=[None] + [rv() for _ in range(tg.nt)],
            adjG=[None] + [rs() for _ in range(tg.nt)],
            wT=g.leray_project(rv()), psiT=rs())
        residuals.append(res)
    run.write_csv("duality.csv", ["seed", "residual"],
                  list(enumerate(residuals)))
    run.write_json("summary.json", {"max_residual": max(residuals),
                                    "residuals": residuals,
                                    "pass_1e-11": max(residuals) <= 1e-11})
    return 0


def cmd_mms(cfg, run, seed, snapshot_stride=0):
    from .mms import convergence_study
    m = cfg["mms"]
    errs, orders, nts = convergence_study(tuple(m["levels"]),
                                          cfg["physics"]["nu"],
                                          cfg["physics"]["kappa"],
                                          m["T"], m["dt_factor"])
    run.write_csv("mms.csv", ["n", "nt", "error_l2q"],
                  list(zip(m["levels"], nts, errs)))
    run.write_json("summary.json", {"errors": errs, "orders": orders,
                                    "min_order": min(orders)})
    return 0


def cmd_tikhonov(cfg, run, seed, snapshot_stride=0):
    prob = build_problem(cfg, seed)
    res, opts = _optimize_base(prob, cfg)
    rep = lab.tikhonov_path(prob, res.control, cfg["tikhonov"]["eps_grid"],
                            opts, np.asarray(cfg["measure"]["eps_grid"]))
    run.write_csv("path.csv", ["eps", "control_dist_l1", "J", "kkt", "iterations"],
                  [(p.eps, p.control_dist_l1, p.J, p.kkt, p.iterations)
                   for p in rep.points])
    run.write_json("summary.json", {
        "slope": rep.fit.describe(), "slope_value": _clean(rep.fit.slope),
        "r2": rep.fit.r2, "mu_hat": _clean(rep.mu_hat), "mu_r2": rep.mu_r2,
        "slope_minus_inv_mu": _clean(rep.slope_vs_inv_mu),
        "base_kkt": res.kkt_history[-1]})
    return 0


def cmd_sweep(cfg, run, seed, snapshot_stride=0, threads=1):
    prob = build_problem(cfg, seed)
    res, opts = _optimize_base(prob, cfg)
    sw = cfg["sweep"]
    plan = lab.SweepPlan(sw["family"], np.asarray(sw["magnitudes"]),
                         seed=seed, modes=sw["modes"], decay=sw["decay"],
                         warm_start=sw["warm_start"], threads=threads,
                         trust_radius=sw["trust_radius"])
    rep = lab.stability_sweep(prob, res.control, plan, opts,
                              s_norm=cfg["s_norm"])
    run.write_csv("sweep.csv",
                  ["magnitude", "zeta_norm", "control_dist_l1", "state_dist_l2",
                   "state_dist_linf", "adjoint_grad_gap", "kkt", "iterations",
                   "termination", "seed", "in_trust_region", "flags"],
                  [(r.magnitude, r.zeta_norm, r.control_dist_l1, r.state_dist_l2,
                    r.state_dist_linf, r.adjoint_grad_gap, r.kkt, r.iterations,
                    r.termination, r.seed, int(r.in_trust_region), r.flags)
                   for r in rep.records])
    run.write_json("summary.json", {
        "control_fit": rep.control_fit.describe(),
        "control_slope": _clean(rep.control_fit.slope),
        "control_r2": rep.control_fit.r2,
        "state_fit": rep.state_fit.describe(),
        "state_slope": _clean(rep.state_fit.slope),
        "state_r2": rep.state_fit.r2,
        "linf_constant": rep.linf_constant,
        "exponent_consistency": rep.exponent_consistency})
    return 0


def cmd_growth(cfg, run, seed, snapshot_stride=0):
    prob = build_problem(cfg, seed)
    res, opts = _optimize_base(prob, cfg)
    gcfg = cfg["growth"]
    rep = lab.growth_probe(prob, res.control, gcfg["n_samples"],
                           gcfg["radius_grid"], seed, gcfg["variant"],
                           gcfg["tau"], cfg["s_norm"])
    run.write_csv("growth_samples.csv",
                  ["radius", "delta_l1", "lhs", "rhs", "ratio", "kind"],
                  [(s.radius, s.delta_l1, s.lhs, s.rhs, _clean(s.ratio), s.kind)
                   for s in rep.samples])
    run.write_json("summary.json", {
        "variant": rep.variant, "tau": rep.tau,
        "min_ratio_per_radius": {str(k): v for k, v in rep.min_ratio_per_radius.items()},
        "c_hat": _clean(rep.c_hat),
        "mu_hat": (_clean(rep.mu_hat) if rep.fit_r2 >= 0.8 else "no reliable fit"),
        "fit_r2": rep.fit_r2,
        "tracking_misfit": rep.tracking_misfit,
        "adjoint_grad_sup": rep.adjoint_grad_sup,
        "delta_hat": _clean(rep.delta_hat),
        "margin": rep.margin,
        "margin_positive": rep.margin_positive})
    return 0


def cmd_second_order(cfg, run, seed, snapshot_stride=0):
    prob = build_problem(cfg, seed)
    res, opts = _optimize_base(prob, cfg)
    so = cfg["second_order"]
    _, _, _, margin = lab.tracking_margin(prob, res.control, cfg["s_norm"])
    mag = so["magnitude"]
    if mag is None:
        mag = 0.5 * max(margin, 0.0)
    pert = lab.make_perturbation(prob, so["family"], mag, seed + 7)
    rep = lab.second_order_stability_check(prob, res.control, pert,
                                           so["n_samples"], seed, opts,
                                           cfg["s_norm"])
    run.write_json("summary.json", {
        "skipped": rep.skipped, "reason": rep.reason,
        "margin": _clean(rep.margin), "perturbation_magnitude": mag,
        "zeta_norm": _clean(rep.zeta_norm), "smallness": _clean(rep.smallness),
        "min_ratio": _clean(rep.min_ratio),
        "adjoint_margin_degradation": _clean(rep.adjoint_margin_degradation)})
    return 0


def cmd_measure(cfg, run, seed, snapshot_stride=0):
    prob = build_problem(cfg, seed)
    res, _ = _optimize_base(prob, cfg)
    eps = np.asarray(cfg["measure"]["eps_grid"])
    weight = prob.tg.dt * prob.grid.vol
    w1, w2, ps = adjoint_restriction_samples(prob, res.control)
    out = {}
    rows = []
    for name, vals in (("w1", w1), ("w2", w2), ("psi", ps)):
        fit = measure_condition_estimate(vals, eps, weight)
        out[name] = {
            "mu_hat": (_clean(fit.mu_hat) if fit.reliable or not np.isfinite(fit.mu_hat)
                       else "no reliable fit"),
            "r2": fit.r2, "n_used": fit.n_used}
        for e, m in zip(fit.eps, fit.mass):
            rows.append((name, e, m))
    run.write_csv("measure.csv", ["component", "eps", "mass"], rows)
    run.write_json("summary.json", {"fits": out,
                                    "bang_fraction": res.bang_fraction})
    return 0


DISPATCH = {
    "solve": cmd_solve,
    "optimize": cmd_optimize,
    "taylor-test": cmd_taylor,
    "duality-check": cmd_duality,
    "mms": cmd_mms,
    "tikhonov-path": cmd_tikhonov,
    "stability-sweep": cmd_sweep,
    "growth-probe": cmd_growth,
    "second-order-check": cmd_second_order,
    "measure-condition": cmd_measure,
}


def run_command(cmd, cfg: ExperimentConfig, out_dir=None, seed=None,
                threads=1, snapshot_stride=None):
    """Dispatch one command; returns the exit status (0/1/2)."""
    if cmd not in DISPATCH:
        sys.stderr.write(f"unknown command {cmd!r}; choose from: "
                         + ", ".join(COMMANDS) + "\n")
        return 2
    out_dir = out_dir or cfg["output"]["dir"]
    seed = cfg["seed"] if seed is None else seed
    stride = cfg["output"]["snapshot_stride"] if snapshot_stride is None else snapshot_stride
    run = Run(out_dir, cfg, cmd, seed)
    try:
        if cmd == "stability-sweep":
            status = DISPATCH[cmd](cfg, run, seed, stride, threads)
        else:
            status = DISPATCH[cmd](cfg, run, seed, stride)
    except NumericalFailure as exc:
        run.write_json("failure.json", {"error": str(exc)})
        run.finish()
        sys.stderr.write(f"numerical failure: {exc}\n")
        return 1
    except ConfigError as exc:
        sys.stderr.write(str(exc) + "\n")
        return 2
    run.finish()
    return status


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="convecopt",
        description="Adjoint-based optimal control and stability experiments "
                    "for 2D buoyancy-driven flow.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON config file (defaults used if omitted)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="seed override")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--snapshot-stride", type=int, default=None)
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else default_config()
    except ConfigError as exc:
        sys.stderr.write(str(exc) + "\n")
        return 2
    except OSError as exc:
        sys.stderr.write(f"cannot read config: {exc}\n")
        return 2
    return run_command(args.command, cfg, args.out, args.seed,
                       args.threads, args.snapshot_stride)


if __name__ == "__main__":
    sys.exit(main())
