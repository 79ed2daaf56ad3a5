"""Command-line interface: ``homtest simulate|certify|fit|theory|report``.

Exit codes: 0 success / indistinguishability not rejected, 1 runtime or input
error, 2 rejected, 3 indeterminate, 64 usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, optics, transmitter
from .analysis import FitError, certify, fit_dip_multistart, histogram_data, power_analysis, visibility_from_fit
from .config import ConfigError, ExperimentConfig, config_hash, dump_config, load_config
from .detection import NormalizationError, SimulationError, normalize_histogram, run_experiment
from .io import (
    FormatError,
    RunManifest,
    atomic_write_text,
    default_out_dir,
    fit_document,
    histogram_filename,
    read_histogram,
    read_manifest,
    render_json,
    render_text,
    report_document,
    verify_outputs,
    write_histogram,
    write_manifest,
)
from .transmitter import intensity_visibility_reduction

EXIT_OK, EXIT_ERROR, EXIT_REJECTED, EXIT_INDETERMINATE, EXIT_USAGE = 0, 1, 2, 3, 64


class _Parser(argparse.ArgumentParser):
    # exit status 2 means "rejected" for certify, so usage errors get their own code
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(doc: dict, fmt: str, stream=None):
    stream = stream or sys.stdout
    stream.write(render_json(doc) if fmt == "structured" else render_text(doc))


def standing_discrepancies(config: ExperimentConfig | None = None) -> list[str]:
    """Known gaps between reference figures and this model, reported with every certification."""
    laser = (config or ExperimentConfig()).laser
    loss = intensity_visibility_reduction(laser.intensity_variance)
    return [
        f"intensity fluctuation s_I^2={laser.intensity_variance:g} lowers the visibility by {100 * loss:.3g}% "
        "to leading order; the quoted reference figure is 0.4%",
        "jitter factor at tau_p=50 ps, s=2.2 ps evaluates to 0.967, not the quoted upper bound 0.96",
        "LR statistic itself is not available for the reference data (only p=0.18); compare verdicts, not values",
    ]


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    config = load_config(args.config) if args.config else ExperimentConfig()
    out = Path(args.out) if args.out else default_out_dir()
    manifest = RunManifest(command="simulate", config_hash=config_hash(config), seed=args.seed,
                           parameters={"mode": args.mode})
    if args.config:
        manifest.add_input(args.config)
    run_id = manifest.run_id
    # simulate everything before writing anything: no partial outputs on failure
    hists = run_experiment(config, args.seed, mode=args.mode, workers=args.workers, run_id=run_id)
    cfg_path = atomic_write_text(out / "config.ini", dump_config(config))
    manifest.add_output(cfg_path)
    for h in hists:
        manifest.add_output(write_histogram(h, out / histogram_filename(h.group), run_id))
    write_manifest(manifest, out)
    doc = {"run_id": run_id, "out": str(out), "files": [o["path"] for o in manifest.outputs]}
    if args.format == "structured":
        sys.stdout.write(json.dumps(doc, indent=2) + "\n")
    else:
        sys.stdout.write(f"run {run_id[:16]}: wrote {len(hists)} histograms to {out}\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# certify / report


def _certify_files(paths, alpha, manifest=None, config=None, power_delta_v=0.05):
    hists = [read_histogram(p) for p in paths]
    rep = certify(hists, alpha=alpha, power_delta_v=power_delta_v)
    return rep, report_document(rep, manifest, standing_discrepancies(config))


def _write_report(doc: dict, out: Path | None):
    if out is None:
        return
    atomic_write_text(out / "report.txt", render_text(doc))
    atomic_write_text(out / "report.json", render_json(doc))


def cmd_certify(args) -> int:
    rep, doc = _certify_files(args.histograms, args.alpha, power_delta_v=args.delta_v)
    _write_report(doc, Path(args.out) if args.out else None)
    _emit(doc, args.format)
    return rep.exit_code


def cmd_report(args) -> int:
    """Full report for a simulate output directory, with provenance checks."""
    run_dir = Path(args.run_dir)
    manifest = read_manifest(run_dir)
    stale = verify_outputs(manifest, run_dir)
    if stale:
        raise FormatError(f"files changed since the run: {', '.join(stale)}", run_dir)
    files = [run_dir / o["path"] for o in manifest.outputs if o["path"].startswith("hist_")]
    if not files:
        raise FormatError("manifest lists no histogram files", run_dir)
    cfg_file = run_dir / "config.ini"
    config = load_config(cfg_file) if cfg_file.exists() else None
    rep, doc = _certify_files(files, args.alpha, manifest, config, args.delta_v)
    _write_report(doc, Path(args.out) if args.out else run_dir)
    _emit(doc, args.format)
    return rep.exit_code


# ---------------------------------------------------------------------------
# fit


def cmd_fit(args) -> int:
    h = read_histogram(args.histogram)
    fit = fit_dip_multistart(histogram_data(normalize_histogram(h)))
    doc = fit_document(h.group, fit, visibility_from_fit(fit))
    if args.format == "structured":
        sys.stdout.write(render_json(doc))
    else:
        f, v = doc["fit"], doc["visibility"]
        sys.stdout.write(
            f"{h.group}: V = {v['V']:.4f} +- {v['std']:.4f}{'  (indeterminate)' if v['indeterminate'] else ''}\n"
            f"  A = {f['A']:.4f} +- {f['std_A']:.4f}\n  t0 = {f['t0']:.4f} +- {f['std_t0']:.4f} ps\n"
            f"  sigma = {f['sigma']:.4f} +- {f['std_sigma']:.4f} ps\n  B = {f['B']:.4f} +- {f['std_B']:.4f}\n"
            f"  chi2 = {f['chi2']:.4g} ({f['dof']} dof)\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# theory


def _pair(mu_a, mu_b, theta, Theta):
    return optics.PulsePair(mu_a, mu_b, theta, Theta)


# name -> (parameters, output columns, function returning a tuple)
THEORY = {
    "coincidence": (("mu_a", "mu_b", "theta", "Theta"), ("P_cc",),
                    lambda mu_a, mu_b, theta, Theta: (optics.coincidence_prob(_pair(mu_a, mu_b, theta, Theta)),)),
    "phase-averaged-coincidence": (("mu_a", "mu_b", "Theta"), ("P_cc",),
                                   lambda mu_a, mu_b, Theta: (optics.phase_averaged_coincidence(mu_a, mu_b, Theta),)),
    "visibility": (("mu_a", "mu_b", "Theta"), ("V_exact", "V_approx"),
                   lambda mu_a, mu_b, Theta: (optics.hom_visibility_exact(mu_a, mu_b, Theta),
                                              optics.hom_visibility_approx(mu_a, mu_b, math.cos(Theta) ** 2))),
    "swap-probs": (("mu_a", "mu_b", "theta", "Theta"), ("P0", "P1"),
                   lambda mu_a, mu_b, theta, Theta: optics.swap_outcome_probs_wcp(_pair(mu_a, mu_b, theta, Theta))),
    "wcp-fidelity": (("mu_a", "mu_b", "theta", "Theta"), ("F",),
                     lambda mu_a, mu_b, theta, Theta: (optics.wcp_fidelity(_pair(mu_a, mu_b, theta, Theta)),)),
    "nonvacuum-fidelity": (("mu_a", "mu_b", "Theta"), ("F2_avg",),
                           lambda mu_a, mu_b, Theta: (optics.nonvacuum_fidelity_sq_avg(mu_a, mu_b, Theta),)),
    "dip-profile": (("t", "tau_p", "a", "t0"), ("y",),
                    lambda t, tau_p, a, t0: (float(transmitter.hom_dip_profile(t, tau_p, a, t0)),)),
    "jitter-factor": (("tau_p", "s"), ("factor",),
                      lambda tau_p, s: (transmitter.jitter_factor(tau_p, s),)),
    "chirp-from-dip": (("tau_p", "sigma_dip"), ("a",),
                       lambda tau_p, sigma_dip: (transmitter.chirp_from_dip(tau_p, sigma_dip),)),
    "power": (("delta_v", "std_v", "alpha"), ("power",),
              lambda delta_v, std_v, alpha: (power_analysis(delta_v, std_v, alpha),)),
}
THEORY_DEFAULTS = {"theta": 0.0, "Theta": 0.0, "t0": 0.0, "alpha": 0.05}


def parse_grid(text: str) -> np.ndarray:
    """``x`` (scalar), ``start:stop:num`` (inclusive linspace) or ``v1,v2,...``."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"grid must be start:stop:num, got {text!r}")
        start, stop, num = float(parts[0]), float(parts[1]), int(parts[2])
        if num < 1:
            raise ValueError("grid needs at least one point")
        return np.linspace(start, stop, num)
    return np.array([float(v) for v in text.split(",")])


def theory_table(name: str, assignments: list[str]) -> tuple[list[str], list[list[float]]]:
    if name not in THEORY:
        raise ValueError(f"unknown quantity {name!r}; choose from {', '.join(THEORY)}")
    params, outputs, func = THEORY[name]
    grids = {}
    for item in assignments:
        key, sep, val = item.partition("=")
        if not sep:
            raise ValueError(f"expected name=value, got {item!r}")
        if key not in params:
            raise ValueError(f"{name} takes {', '.join(params)}; got {key!r}")
        grids[key] = parse_grid(val)
    for p in params:
        if p not in grids:
            if p not in THEORY_DEFAULTS:
                raise ValueError(f"missing parameter {p!r} for {name}")
            grids[p] = np.array([THEORY_DEFAULTS[p]])
    mesh = np.meshgrid(*(grids[p] for p in params), indexing="ij")
    rows = []
    for point in zip(*(m.ravel() for m in mesh)):
        vals = func(*(float(x) for x in point))
        rows.append([float(x) for x in point] + [float(v) for v in vals])
    return list(params) + list(outputs), rows


def cmd_theory(args) -> int:
    header, rows = theory_table(args.quantity, args.params)
    if args.format == "structured":
        sys.stdout.write(json.dumps([dict(zip(header, r)) for r in rows], indent=2) + "\n")
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(x) for x in r])
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("text", "structured"), default="text")
    common.add_argument("--out", help="output directory (default: $HOMTEST_OUT or ./homtest-out)")

    p = _Parser(prog="homtest", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="simulate coincidence histograms")
    s.add_argument("--config", help="INI config file (default: built-in apparatus)")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--mode", choices=("aggregate", "trials"), default="aggregate")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    for name, func, helptext in (("certify", cmd_certify, "test histograms for indistinguishability"),
                                 ("report", cmd_report, "certify a simulate output directory")):
        c = sub.add_parser(name, parents=[common], help=helptext)
        if name == "certify":
            c.add_argument("histograms", nargs="+")
        else:
            c.add_argument("run_dir")
        c.add_argument("--alpha", type=float, default=0.05)
        c.add_argument("--delta-v", type=float, default=0.05, help="visibility difference for the power statement")
        c.set_defaults(func=func)

    f = sub.add_parser("fit", parents=[common], help="fit one histogram")
    f.add_argument("histogram")
    f.set_defaults(func=cmd_fit)

    t = sub.add_parser("theory", parents=[common], help="tabulate closed-form quantities")
    t.add_argument("quantity", choices=sorted(THEORY))
    t.add_argument("params", nargs="*", metavar="name=value",
                   help="scalar, start:stop:num or comma list, e.g. Theta=0:1.5708:21")
    t.set_defaults(func=cmd_theory)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "alpha", 0.5) is not None and not 0 < getattr(args, "alpha", 0.5) < 1:
        parser.error("--alpha must lie in (0, 1)")
    try:
        return args.func(args)
    except (ConfigError, FormatError, SimulationError, NormalizationError, FitError, ValueError, OSError) as exc:
        sys.stderr.write(f"homtest {args.command}: error: {exc}\n")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
