"""Configuration-driven experiment runner.

Subcommands:
    mildreg run     --config cfg.toml [--out dir]   solve + oracle comparison
    mildreg certify --config cfg.toml [--out dir]   estimate probes + verdicts
    mildreg sweep   --config cfg.toml --axis a --values v1,v2,... [--out dir]
    mildreg version

Configs are TOML (or JSON); every default is embedded here and the fully
resolved config is dumped into summary.json, so a run is reproducible from
its summary alone. Exit codes: 0 success, 2 no contraction window,
3 non-contractive iteration, 4 config error, 5 unresolved probe.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import scipy.linalg

from . import __version__, _kernels
from .admissibility import (
    DEFAULT_SEED,
    choose_window,
    estimate_gamma,
    estimate_miyadera_voigt,
    gamma_refinement_study,
    refinement_study_to_csv,
)
from .errors import ConfigError, MildregError
from .meshnorm import StateVector, TimeMesh, l2_norm
from .mildsolve import (
    MildProblem,
    PicardConfig,
    oracle_solve,
    solve,
    solve_report_to_json,
    trajectory_to_binary,
    trajectory_to_csv,
)
from .operators import (
    KERNEL_NAMES,
    NONLINEARITY_NAMES,
    make_kernel,
    make_nonlinearity,
)
from .problems import (
    UPSILON_NAMES,
    build_dirichlet_bundle,
    build_neumann_bundle,
    default_initial_state,
    make_upsilon,
    smooth_into_trace_space,
)
from .semigroup import (
    boundary_smoothing_probe,
    build_propagator,
    probe_reports_to_csv,
    probe_reports_to_json,
    resolvent_probe,
    smoothing_probe,
    volterra_reconstruct,
)

log = logging.getLogger("mildreg")

DEFAULTS: dict = {
    "experiment": {
        "example": "dirichlet_nonlocal",  # dirichlet_nonlocal | neumann_nonlocal | custom
        "boundary": "dirichlet",          # custom example only
        "n_grid": 64,
        "p": 2.0,
        "tau": 1.0,
        "m_steps": 200,
        "sigma_P": 0.2,
        "sigma_C": 0.2,
        "p_scale": 1.0,
        "smooth_eps": 0.0,                # >0: ride e^{-eps A} into the trace space
        "seed": DEFAULT_SEED,
        "output_dir": "mildreg-out",
    },
    "kernel": {"name": "sin-poly", "amplitude": 0.5, "center": 0.5, "width": 0.1},
    "nonlinearity": {"name": "tanh", "scale": 1.0, "slope": 1.0, "cap": 1.0},
    "trace": {"upsilon": "sin-poly", "c": [1.0, 1.0], "center": 0.5, "width": 0.1},
    "picard": {"rel_tol": 1e-10, "max_iter": 200, "theta_target": 0.9},
    "certify": {
        "mesh_density": 32,
        "smoothing_sigmas": [0.25, 0.5],
        "probe_t_min": 1e-4,
        "probe_t_max": 1e-2,
        "probe_points": 40,
        # decay regime: the curve is flat below the spectral distance
        # omega1 + mu_1 ~ 10, so the fit window starts well above it
        "resolvent_r_min": 1e2,
        "resolvent_r_max": 1e6,
        "resolvent_points": 25,
        "refinement_grids": [32, 64, 128],
        "mv_pairs": 50,
        "volterra_tol": 1e-4,
    },
}

THRESHOLDS = {
    "oracle_gap": 1e-3,
    "representation_residual_factor": 10.0,  # times rel_tol times max |u|
    "window_ratio_slack": 1.1,
    "increment_fit_residual": 0.1,
    "exact_gap": 1e-10,
    "smoothing_slope_tol": 0.05,
    "smoothing_prefactor_rtol": 0.10,
    "resolvent_exponent_tol": 0.1,
}


# ---------------------------------------------------------------------------
# Config handling


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in out:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(out[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config section {path + key!r} must be a table")
            out[key] = _merge(out[key], val, path + key + ".")
        else:
            out[key] = val
    return out


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    if path.suffix.lower() == ".json":
        user = json.loads(text)
    else:
        try:
            import tomllib  # py >= 3.11
        except ImportError:
            import tomli as tomllib
        user = tomllib.loads(text)
    if not isinstance(user, dict):
        raise ConfigError("config root must be a table")
    return _merge(DEFAULTS, user)


def validate_config(cfg: dict) -> None:
    exp = cfg["experiment"]
    if exp["example"] not in ("dirichlet_nonlocal", "neumann_nonlocal", "custom"):
        raise ConfigError(f"unknown example {exp['example']!r}")
    if exp["boundary"] not in ("dirichlet", "neumann"):
        raise ConfigError(f"unknown boundary {exp['boundary']!r}")
    if cfg["kernel"]["name"] not in KERNEL_NAMES:
        raise ConfigError(f"unknown kernel {cfg['kernel']['name']!r}")
    if cfg["nonlinearity"]["name"] not in NONLINEARITY_NAMES:
        raise ConfigError(f"unknown nonlinearity {cfg['nonlinearity']['name']!r}")
    if cfg["trace"]["upsilon"] not in UPSILON_NAMES:
        raise ConfigError(f"unknown upsilon {cfg['trace']['upsilon']!r}")
    for key in ("sigma_P", "sigma_C"):
        if not 0.0 <= float(exp[key]) <= 1.0:
            raise ConfigError(f"{key} must lie in [0,1], got {exp[key]}")
    if not float(exp["p"]) > 1.0:
        raise ConfigError("p must exceed 1")
    if int(exp["n_grid"]) < 4:
        raise ConfigError("n_grid must be at least 4")
    if int(exp["m_steps"]) < 2:
        raise ConfigError("m_steps must be at least 2")
    if float(exp["tau"]) <= 0:
        raise ConfigError("tau must be positive")


def build_problem(cfg: dict) -> tuple[MildProblem, PicardConfig]:
    exp = cfg["experiment"]
    kern = make_kernel(
        cfg["kernel"]["name"],
        amplitude=float(cfg["kernel"]["amplitude"]),
        center=float(cfg["kernel"]["center"]),
        width=float(cfg["kernel"]["width"]),
    )
    F = make_nonlinearity(
        cfg["nonlinearity"]["name"],
        scale=float(cfg["nonlinearity"]["scale"]),
        slope=float(cfg["nonlinearity"]["slope"]),
        cap=float(cfg["nonlinearity"]["cap"]),
    )
    bc = exp["boundary"] if exp["example"] == "custom" else (
        "dirichlet" if exp["example"] == "dirichlet_nonlocal" else "neumann"
    )
    if bc == "dirichlet":
        bundle = build_dirichlet_bundle(
            int(exp["n_grid"]), kern, F,
            float(exp["sigma_P"]), float(exp["sigma_C"]), float(exp["p_scale"]),
        )
    else:
        ups = make_upsilon(
            cfg["trace"]["upsilon"],
            center=float(cfg["trace"]["center"]),
            width=float(cfg["trace"]["width"]),
        )
        c = tuple(float(v) for v in cfg["trace"]["c"])
        if len(c) != 2:
            raise ConfigError("trace.c must have exactly two entries")
        bundle = build_neumann_bundle(int(exp["n_grid"]), kern, F, ups, c)
    x0 = default_initial_state(bundle.grid)
    if float(exp["smooth_eps"]) > 0:
        x0 = smooth_into_trace_space(bundle, x0, float(exp["smooth_eps"]))
    problem = MildProblem(bundle, x0, float(exp["tau"]), float(exp["p"]))
    pc = cfg["picard"]
    picard = PicardConfig(
        rel_tol=float(pc["rel_tol"]),
        max_iter=int(pc["max_iter"]),
        m_steps_per_window=int(exp["m_steps"]),
        theta_target=float(pc["theta_target"]),
    )
    return problem, picard


# ---------------------------------------------------------------------------
# Artifact helpers


_LOG_SEQ = 0


def _setup_out(outdir: str | Path) -> tuple[Path, logging.Logger]:
    """Output directory plus a per-run logger (sweep rows log concurrently)."""
    global _LOG_SEQ
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    _LOG_SEQ += 1
    rlog = logging.getLogger(f"mildreg.run{_LOG_SEQ}")
    for h in list(rlog.handlers):
        rlog.removeHandler(h)
        h.close()
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    rlog.addHandler(handler)
    rlog.setLevel(logging.INFO)
    return out, rlog


def _write_summary(out: Path, summary: dict) -> None:
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=float)


def _base_summary(cfg: dict, command: str) -> dict:
    return {
        "command": command,
        "version": __version__,
        "backend": _kernels.BACKEND,
        "threads_cap": os.environ.get("MILDREG_THREADS"),
        "config": cfg,
        "thresholds": dict(THRESHOLDS),
        "artifacts": [],
        "verdicts": {},
    }


def _verdict(summary: dict, name: str, passed: bool, value, threshold) -> None:
    summary["verdicts"][name] = {
        "pass": bool(passed),
        "value": value,
        "threshold": threshold,
    }


# ---------------------------------------------------------------------------
# run


def cmd_run(cfg: dict, outdir: str | Path) -> int:
    validate_config(cfg)
    out, rlog = _setup_out(outdir)
    summary = _base_summary(cfg, "run")
    exp = cfg["experiment"]
    problem, picard = build_problem(cfg)
    rlog.info(
        "run: example=%s n=%d p=%g tau=%g m=%d backend=%s",
        exp["example"], exp["n_grid"], exp["p"], exp["tau"], exp["m_steps"],
        _kernels.BACKEND,
    )
    u, report = solve(
        problem, picard, seed=int(exp["seed"]),
        total_m_steps=int(exp["m_steps"]),
    )

    trajectory_to_csv(out / "trajectory.csv", u)
    trajectory_to_binary(out / "trajectory.mrtj", u)
    solve_report_to_json(out / "solve_report.json", report)
    (out / "certificates").mkdir(exist_ok=True)
    report.cert_P.write_json(out / "certificates" / "P.json")
    report.cert_C.write_json(out / "certificates" / "C.json")
    summary["artifacts"] = [
        "trajectory.csv", "trajectory.mrtj", "solve_report.json",
        "certificates/P.json", "certificates/C.json", "run.log", "summary.json",
    ]
    _emit_heatmap_script(out, summary)

    scale = max(l2_norm(s) for s in u.states)
    rep_thresh = THRESHOLDS["representation_residual_factor"] * picard.rel_tol * max(scale, 1.0)
    _verdict(summary, "oracle_gap", report.oracle_gap <= THRESHOLDS["oracle_gap"],
             report.oracle_gap, THRESHOLDS["oracle_gap"])
    _verdict(summary, "representation_residual",
             report.representation_residual <= rep_thresh,
             report.representation_residual, rep_thresh)
    ratio_ok = all(
        w.observed_ratio <= report.bound_value * THRESHOLDS["window_ratio_slack"]
        for w in report.windows
    )
    _verdict(summary, "window_contraction", ratio_ok,
             max(w.observed_ratio for w in report.windows),
             report.bound_value * THRESHOLDS["window_ratio_slack"])
    fit_ok = all(
        w.increment_fit_residual < THRESHOLDS["increment_fit_residual"]
        for w in report.windows if w.iterations >= 6
    )
    _verdict(summary, "increment_fit", fit_ok,
             max(w.increment_fit_residual for w in report.windows),
             THRESHOLDS["increment_fit_residual"])
    if report.exact_gap is not None:
        _verdict(summary, "exact_gap", report.exact_gap <= THRESHOLDS["exact_gap"],
                 report.exact_gap, THRESHOLDS["exact_gap"])

    summary["solve_report"] = report.to_json_dict()
    summary["all_pass"] = all(v["pass"] for v in summary["verdicts"].values())
    _write_summary(out, summary)
    rlog.info("run complete: all_pass=%s", summary["all_pass"])
    return 0


def _emit_heatmap_script(out: Path, summary: dict) -> None:
    """gnuplot-compatible companion for the trajectory heat map."""
    script = (
        "# gnuplot script: solution heat map from trajectory.csv\n"
        "set datafile separator ','\n"
        "set view map\n"
        "set xlabel 't-index'; set ylabel 'node'\n"
        "splot 'trajectory.csv' matrix every ::1:1 with image notitle\n"
    )
    (out / "plot_heatmap.gp").write_text(script)
    summary["artifacts"].append("plot_heatmap.gp")


# ---------------------------------------------------------------------------
# certify


def cmd_certify(cfg: dict, outdir: str | Path) -> int:
    validate_config(cfg)
    out, rlog = _setup_out(outdir)
    summary = _base_summary(cfg, "certify")
    exp = cfg["experiment"]
    cc = cfg["certify"]
    problem, picard = build_problem(cfg)
    bundle = problem.bundle
    seed = int(exp["seed"])
    t_grid = np.geomspace(float(cc["probe_t_min"]), float(cc["probe_t_max"]),
                          int(cc["probe_points"]))

    reports = []
    for sig in cc["smoothing_sigmas"]:
        rep = smoothing_probe(bundle, float(sig), t_grid)
        reports.append(rep)
        slope_ok = abs(rep.exponent + float(sig)) <= THRESHOLDS["smoothing_slope_tol"]
        pref_ok = (
            abs(rep.prefactor - rep.extras["envelope_prefactor"])
            <= THRESHOLDS["smoothing_prefactor_rtol"] * rep.extras["envelope_prefactor"]
        )
        _verdict(summary, f"smoothing_slope[sigma={sig:g}]", slope_ok and rep.resolved,
                 rep.exponent, f"-{sig} +/- {THRESHOLDS['smoothing_slope_tol']}")
        _verdict(summary, f"smoothing_prefactor[sigma={sig:g}]", pref_ok,
                 rep.prefactor, rep.extras["envelope_prefactor"])

    which = "dirichlet_map" if bundle.bc == "dirichlet" else "neumann_map"
    brep = boundary_smoothing_probe(bundle, 0.0, which, t_grid)
    reports.append(brep)
    _verdict(summary, f"boundary_smoothing[{which}]", brep.resolved, brep.exponent,
             "resolved log-log fit")

    radii = np.geomspace(float(cc["resolvent_r_min"]), float(cc["resolvent_r_max"]),
                         int(cc["resolvent_points"]))
    rrep = resolvent_probe(bundle.A, 0.0, radii, grid=bundle.grid)
    reports.append(rrep)
    res_ok = abs(rrep.extras["imag_ray_exponent"] + 1.0) <= THRESHOLDS["resolvent_exponent_tol"]
    _verdict(summary, "resolvent_exponent", res_ok and rrep.resolved,
             rrep.extras["imag_ray_exponent"], f"-1 +/- {THRESHOLDS['resolvent_exponent_tol']}")

    probe_reports_to_csv(out / "probes.csv", reports)
    probe_reports_to_json(out / "probe_summary.json", reports)

    # Desch-Schappacher identity: Volterra reconstruction vs direct exponential
    mesh = TimeMesh(0.0, float(exp["tau"]), int(exp["m_steps"]))
    prop0 = build_propagator(bundle.A0, mesh.dt, eig=bundle.eig)
    recon = volterra_reconstruct(prop0, bundle.perturbation, problem.x0, mesh)
    errs = []
    for i in range(0, mesh.m_steps + 1, max(1, mesh.m_steps // 40)):
        direct = scipy.linalg.expm(-mesh.nodes[i] * bundle.A) @ problem.x0.values
        errs.append(l2_norm(StateVector(bundle.grid, recon.values[i] - direct)))
    volterra_err = float(max(errs))
    vol_tol = float(cc["volterra_tol"]) if bundle.kernel.amplitude != 0.0 else 1e-12
    _verdict(summary, "volterra_identity", volterra_err <= vol_tol, volterra_err, vol_tol)

    certP = estimate_gamma(bundle, "P", problem.p, problem.tau,
                           mesh_density=int(cc["mesh_density"]), seed=seed, strict=False)
    certC = estimate_gamma(bundle, "C", problem.p, problem.tau,
                           mesh_density=int(cc["mesh_density"]), seed=seed, strict=False)
    (out / "certificates").mkdir(exist_ok=True)
    certP.write_json(out / "certificates" / "P.json")
    certC.write_json(out / "certificates" / "C.json")
    _verdict(summary, "gamma_quadrature_resolved", certP.resolved and certC.resolved,
             max(certP.quadrature_rel_change, certC.quadrature_rel_change), 0.05)

    study = gamma_refinement_study(
        bundle, float(exp["sigma_C"]), problem.p, problem.tau,
        [int(g) for g in cc["refinement_grids"]],
        mesh_density=int(cc["mesh_density"]), seed=seed,
    )
    refinement_study_to_csv(out / "gamma_refinement.csv", study)
    summary["gamma_refinement"] = study
    _verdict(summary, "gamma_refinement_verdict", study["verdict"] != "INDETERMINATE",
             study["verdict"], "ADMISSIBLE or DIVERGENT")

    window = choose_window(certP, certC, bundle.F.kappa, problem.p,
                           picard.theta_target, problem.tau)
    mv = estimate_miyadera_voigt(bundle, window.alpha0, int(cc["mv_pairs"]), seed=seed)
    summary["miyadera_voigt"] = {"alpha0": window.alpha0, "gamma_tilde": mv}
    _verdict(summary, "miyadera_voigt", mv < 1.0, mv, 1.0)

    summary["artifacts"] = [
        "probes.csv", "probe_summary.json", "gamma_refinement.csv",
        "certificates/P.json", "certificates/C.json", "run.log", "summary.json",
    ]
    unresolved = [r.quantity for r in reports if not r.resolved]
    if not (certP.resolved and certC.resolved):
        unresolved.append("gamma_quadrature")
    summary["unresolved_probes"] = unresolved
    summary["all_pass"] = all(v["pass"] for v in summary["verdicts"].values())
    _write_summary(out, summary)
    rlog.info("certify complete: unresolved=%s all_pass=%s", unresolved, summary["all_pass"])
    return 5 if unresolved else 0


# ---------------------------------------------------------------------------
# sweep

SWEEP_AXES = ("sigma", "amplitude", "kappa", "n_grid", "m_steps")


def _apply_axis(cfg: dict, axis: str, value: float) -> dict:
    out = copy.deepcopy(cfg)
    if axis == "sigma":
        out["experiment"]["sigma_P"] = float(value)
        out["experiment"]["sigma_C"] = float(value)
    elif axis == "amplitude":
        out["kernel"]["amplitude"] = float(value)
    elif axis == "kappa":
        out["nonlinearity"]["scale"] = float(value)
    elif axis == "n_grid":
        out["experiment"]["n_grid"] = int(value)
    elif axis == "m_steps":
        out["experiment"]["m_steps"] = int(value)
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    return out


def _sweep_row(cfg: dict, axis: str, value: float, rowdir: Path) -> dict:
    row = {"value": value, "status": "ok", "exit_code": 0}
    try:
        code = cmd_run(_apply_axis(cfg, axis, value), rowdir)
        row["exit_code"] = code
        with open(rowdir / "summary.json") as fh:
            rs = json.load(fh)["solve_report"]
        row.update(
            gamma_P=rs["gamma_P"], gamma_C=rs["gamma_C"], alpha0=rs["alpha0"],
            iterations=sum(w["iterations"] for w in rs["windows"]),
            representation_residual=rs["representation_residual"],
            strong_residual=rs["strong_residual"], oracle_gap=rs["oracle_gap"],
        )
    except MildregError as exc:
        row["status"] = f"error: {exc}"
        row["exit_code"] = exc.exit_code
    return row


def cmd_sweep(cfg: dict, axis: str, values: list[float], outdir: str | Path) -> int:
    validate_config(cfg)
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    if not values:
        raise ConfigError("sweep needs a nonempty value list")
    out, rlog = _setup_out(outdir)
    summary = _base_summary(cfg, "sweep")
    summary["axis"] = axis
    summary["values"] = list(values)

    workers = int(os.environ.get("MILDREG_THREADS", "0")) or min(4, len(values))
    rows = [None] * len(values)
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futs = {
            pool.submit(_sweep_row, cfg, axis, v, out / "rows" / f"{axis}={v:g}"): i
            for i, v in enumerate(values)
        }
        for fut in concurrent.futures.as_completed(futs):
            rows[futs[fut]] = fut.result()

    import csv as _csv

    cols = ["value", "status", "gamma_P", "gamma_C", "alpha0", "iterations",
            "representation_residual", "strong_residual", "oracle_gap"]
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow([repr(row[c]) if isinstance(row.get(c), float) else row.get(c, "")
                        for c in cols])
    summary["rows"] = rows
    summary["artifacts"] = ["sweep.csv", "run.log", "summary.json"]
    _write_summary(out, summary)
    all_failed = all(r["status"] != "ok" for r in rows)
    rlog.info("sweep complete: %d rows, all_failed=%s", len(rows), all_failed)
    return 1 if all_failed else 0


# ---------------------------------------------------------------------------
# entry point


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="mildreg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("run", "certify"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="TOML or JSON config file")
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("sweep")
    p.add_argument("--config", default=None)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated value list")
    p.add_argument("--out", default=None)

    sub.add_parser("version")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    if args.command == "version":
        print(f"mildreg {__version__} (backend: {_kernels.BACKEND})")
        return 0

    try:
        cfg = load_config(args.config)
        validate_config(cfg)
        outdir = args.out or cfg["experiment"]["output_dir"]
        if args.command == "run":
            return cmd_run(cfg, outdir)
        if args.command == "certify":
            return cmd_certify(cfg, outdir)
        if args.command == "sweep":
            try:
                values = [float(v) for v in args.values.split(",") if v.strip()]
            except ValueError as exc:
                raise ConfigError(f"bad --values list: {exc}") from exc
            return cmd_sweep(cfg, args.axis, values, outdir)
    except MildregError as exc:
        log.error("%s (exit %d)", exc, exc.exit_code)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
