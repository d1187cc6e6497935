"""Command-line entry point: ``pvagg {lut,validate,event,mcs,design}``.

Every command loads the scenario config, builds what it needs
(calibrated panel -> table -> aggregate -> controller -> simulation) and
writes CSV/JSON files to ``--out``. Exit status is 0 on success, 2 for a
configuration error and 3 for a numerical failure; failures also print a
one-line JSON diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .care import CareError
from .config import ConfigError, ScenarioConfig, load_config
from .control import TrackingController, UioError, design_controller
from .fleet import Fleet, aggregate_params, build_aggregate_ssm
from .grid import build_combined, build_lfc, build_reference, steady_state_freq, to_hz
from .mcs import run_mcs
from .panel import ConvergenceError, PanelLut, build_lut, calibrate_panel, export_lut_csv
from .sim import IntegrationError, SimTrace, compute_metrics, run_frequency_event, run_validation

TRACKING_PASS_PCT = 0.02
TRACKING_STRETCH_PCT = 0.005


# ---------------------------------------------------------------------------
# pipeline pieces shared by the commands


def make_lut(cfg: ScenarioConfig) -> PanelLut:
    params = calibrate_panel(**cfg.panel.calibration_kwargs())
    dv, s = cfg.panel.grids()
    return build_lut(params, dv, s, t=cfg.shared.t, frac=cfg.shared.deload)


def make_controller(cfg: ScenarioConfig, lut: PanelLut, fleet: Fleet | None = None) -> TrackingController:
    fleet = cfg.event_fleet if fleet is None else fleet
    agg = aggregate_params(fleet, cfg.shared)
    combined = build_combined(build_lfc(cfg.grid), build_aggregate_ssm(agg, cfg.shared), cfg.grid.S_b)
    reference = build_reference(cfg.controller.H_ref, cfg.controller.R_ref, cfg.grid)
    return design_controller(combined, reference, agg, cfg.shared, lut, cfg.controller)


def design_report(ctrl: TrackingController) -> str:
    """Plain-text dump of gains, observer matrices, eigenvalues and residuals."""
    np_opts = np.get_printoptions()
    np.set_printoptions(precision=9, linewidth=160)
    try:
        uio = ctrl.uio
        lines = [
            "# controller design (per-unit coordinates)",
            f"state scales: {ctrl.sx}",
            f"input scales: {ctrl.su}",
            f"aggregate: P_r = {ctrl.agg.p_r:.6g} W, c_p = {ctrl.agg.c_p:.6g} 1/W, "
            f"c_i = {ctrl.agg.c_i:.6g} 1/W, S = {ctrl.agg.s:.6g} %",
            f"power reference limits: [{ctrl.p_min:.6g}, {ctrl.p_max:.6g}] W",
            f"CE = {uio.CE.ravel()}",
            "",
            "K_lqr =", str(ctrl.K_lqr),
            f"tracking CARE residual = {ctrl.lqr_care.residual:.3e} ({ctrl.lqr_care.iterations} iterations)",
            f"observer CARE residual = {uio.care.residual:.3e} ({uio.care.iterations} iterations)",
            "",
            "UIO H =", str(uio.H),
            "UIO T =", str(uio.T),
            "UIO F =", str(uio.F),
            "UIO K =", str(uio.K),
            "",
            "closed-loop eigenvalues =", str(np.sort_complex(ctrl.closed_loop_eigvals())),
            "observer eigenvalues =", str(np.sort_complex(np.linalg.eigvals(uio.F))),
        ]
    finally:
        np.set_printoptions(**np_opts)
    return "\n".join(lines) + "\n"


def design_summary(ctrl: TrackingController) -> dict:
    cl = ctrl.closed_loop_eigvals()
    ob = np.linalg.eigvals(ctrl.uio.F)
    return {
        "care_residual": ctrl.lqr_care.residual,
        "observer_care_residual": ctrl.uio.care.residual,
        "CE": float(ctrl.uio.CE[0, 0]),
        "max_closed_loop_real": float(cl.real.max()),
        "max_observer_real": float(ob.real.max()),
        "fastest_closed_loop": float(np.abs(cl).max()),
    }


def fairness_groups(fleet: Fleet) -> dict:
    """Largest set of equal-rating units and largest set of equal-irradiance units."""
    out = {}
    for name, col in (("same_rating", fleet.p_r), ("same_irradiance", fleet.s)):
        vals, counts = np.unique(col, return_counts=True)
        v = vals[np.argmax(counts)]
        out[name] = (float(v), np.flatnonzero(col == v))
    return out


def steady_unit_power(trace: SimTrace, n_units: int, tail: float = 0.1) -> np.ndarray:
    k = max(1, int(round(tail * len(trace))))
    return np.array([trace[f"dP_PV_{i}_W"][-k:].mean() for i in range(n_units)])


# ---------------------------------------------------------------------------
# commands


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_lut(cfg: ScenarioConfig, out: Path, args) -> dict:
    lut = make_lut(cfg)
    export_lut_csv(lut, out / "lut.csv")
    dv, s = np.meshgrid(lut.dv, lut.s, indexing="ij")
    with open(out / "lut_surface.csv", "w") as fh:
        fh.write("dv_V,S_pct,dP_W\n")
        for a, b, c in zip(dv.ravel(), s.ravel(), lut.table.ravel()):
            fh.write(f"{a:.9g},{b:.9g},{c:.9g}\n")
    summary = {"p_mpp_100_W": float(lut.p_mpp[-1]) if lut.s[-1] == 100 else None,
               "grid_shape": list(lut.table.shape), "deload": lut.frac, "t_K": lut.t}
    _write_json(out / "lut_summary.json", summary)
    return summary


def cmd_validate(cfg: ScenarioConfig, out: Path, args) -> dict:
    lut = make_lut(cfg)
    vc = cfg.validation_commands
    zero = np.zeros(len(cfg.validation_fleet))
    cases = {
        "case1_dV_PV": (np.array(vc.dV_PV, dtype=float), zero),
        "case2_dV_dc_ref": (zero, np.array(vc.dV_dc_ref, dtype=float)),
    }
    runtimes = {}
    report = {"published_aggregate_inputs": {"dV_PV_a": vc.published_dV_PV_a, "dV_dc_ref_a": vc.published_dV_dc_ref_a}}
    for name, (dv, dr) in cases.items():
        t0 = time.perf_counter()
        res = run_validation(cfg.validation_fleet, cfg.shared, lut, dv, dr, vc.t_step, vc.t_end,
                             dt_benchmark=cfg.run.dt_benchmark, dt_aggregate=cfg.run.dt)
        labels = ["dP_PV_a", "dV_dc_a"]
        res.benchmark.to_csv(out / f"validate_{name}_benchmark.csv",
                             labels + [k for k in res.benchmark.columns if k.startswith("dP_PV_") and k[7:].isdigit()])
        res.aggregate.to_csv(out / f"validate_{name}_aggregate.csv", labels)
        report[name] = {
            "computed_aggregate_inputs": {"dV_PV_a": res.u_agg[0], "dV_dc_ref_a": res.u_agg[1]},
            "errors": res.errors,
        }
        runtimes[name] = time.perf_counter() - t0
    _write_json(out / "validation_report.json", report)
    return {**report, "runtime_s": runtimes}


def cmd_design(cfg: ScenarioConfig, out: Path, args) -> dict:
    lut = make_lut(cfg)
    ctrl = make_controller(cfg, lut)
    (out / "design_report.txt").write_text(design_report(ctrl))
    summary = design_summary(ctrl)
    _write_json(out / "design_summary.json", summary)
    return summary


def cmd_event(cfg: ScenarioConfig, out: Path, args) -> dict:
    lut = make_lut(cfg)
    ctrl = make_controller(cfg, lut)
    (out / "design_report.txt").write_text(design_report(ctrl))
    ev = cfg.event
    fleet = cfg.event_fleet
    tr = run_frequency_event(cfg.grid, fleet, cfg.shared, lut, ctrl, ev.d_pu, ev.t_event, ev.t_end,
                             dt=cfg.run.dt, stride=ev.stride)
    tr.to_csv(out / "event_trace.csv")

    metrics = {
        "controlled": asdict(compute_metrics(tr, "f_controlled_hz", "f_reference_hz")),
        "reference": asdict(compute_metrics(tr, "f_reference_hz")),
        "uncontrolled": asdict(compute_metrics(tr, "f_uncontrolled_hz")),
    }
    flat = {f"{k}_{m}": v for k, d in metrics.items() for m, v in d.items() if v is not None}
    flat["tracking_pass_pct"] = TRACKING_PASS_PCT
    flat["tracking_stretch_pct"] = TRACKING_STRETCH_PCT
    flat["steady_state_reference_hz"] = float(to_hz(steady_state_freq(build_reference(
        cfg.controller.H_ref, cfg.controller.R_ref, cfg.grid).meta["params"], ev.d_pu)))
    flat["steady_state_uncontrolled_hz"] = float(to_hz(steady_state_freq(cfg.grid, ev.d_pu)))
    flat.update(design_summary(ctrl))
    _write_json(out / "event_metrics.json", flat)

    # per-unit powers for the fairness plots
    dp_ss = steady_unit_power(tr, len(fleet))
    with open(out / "event_unit_power.csv", "w") as fh:
        fh.write("unit,feeder,S_pct,P_r_kw,dP_PV_ss_W\n")
        for i in range(len(fleet)):
            fh.write(f"{i},{fleet.groups[i] + 1},{fleet.s[i]:.9g},{fleet.p_r[i] / 1e3:.9g},{dp_ss[i]:.9g}\n")
    groups = {}
    for name, (value, idx) in fairness_groups(fleet).items():
        x = fleet.s[idx] if name == "same_rating" else fleet.p_r[idx]
        r = float(np.corrcoef(x, dp_ss[idx])[0, 1]) if idx.size > 2 else None
        groups[name] = {"value": value, "units": idx.tolist(), "pearson_r": r}
        tr_g = SimTrace(tr.t, {f"dP_PV_{i}_W": tr[f"dP_PV_{i}_W"] for i in idx})
        tr_g.to_csv(out / f"event_{name}_units.csv")
    _write_json(out / "event_fairness.json", groups)
    flat["fairness"] = groups
    return flat


def cmd_mcs(cfg: ScenarioConfig, out: Path, args) -> dict:
    lut = make_lut(cfg)
    t0 = time.perf_counter()
    stats = run_mcs(cfg.mcs, lut, parallel=cfg.run.parallel)
    stats.to_csv(out / "mcs_histogram.csv")
    summary = stats.summary()
    summary["seed"] = cfg.mcs.seed
    summary["samples"] = cfg.mcs.samples
    summary["runtime_s"] = time.perf_counter() - t0
    _write_json(out / "mcs_summary.json", {k: v for k, v in summary.items() if k != "runtime_s"})
    return summary


COMMANDS = {"lut": cmd_lut, "validate": cmd_validate, "event": cmd_event, "mcs": cmd_mcs, "design": cmd_design}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON scenario file merged over the defaults")
    common.add_argument("--seed", type=int, help="random seed (overrides run.seed and mcs.seed)")
    common.add_argument("--dt", type=float, help="integration step for the reduced and closed-loop models [s]")
    common.add_argument("--out", type=Path, help="output directory (default: run.out)")
    common.add_argument("--parallel", type=int, help="worker processes for independent trials")
    parser = argparse.ArgumentParser(prog="pvagg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__name__.replace("cmd_", ""))
    return parser


def _overrides(args) -> dict:
    ov: dict = {}
    if args.seed is not None:
        ov.setdefault("run", {})["seed"] = args.seed
        ov.setdefault("mcs", {})["seed"] = args.seed
    if args.dt is not None:
        ov.setdefault("run", {})["dt"] = args.dt
    if args.parallel is not None:
        ov.setdefault("run", {})["parallel"] = args.parallel
    return ov


def _fail(code: int, kind: str, message: str, **extra) -> int:
    print(json.dumps({"status": "error", "exit_code": code, "kind": kind, "message": message, **extra}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as exc:
        return _fail(2, "config", str(exc), key=exc.key)
    except OSError as exc:
        return _fail(2, "config", str(exc))
    out = Path(args.out if args.out is not None else cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = COMMANDS[args.command](cfg, out, args)
    except (CareError, UioError) as exc:
        return _fail(3, "synthesis", str(exc))
    except IntegrationError as exc:
        return _fail(3, "integration", str(exc), samples=len(exc.trace))
    except (ConvergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _fail(3, "numerical", str(exc))
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
