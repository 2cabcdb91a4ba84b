"""Command-line front end.

Subcommands: ``fit`` (Phase I on a CSV reference), ``monitor`` (Phase II
stream evaluation, exit code 3 when any signal fires), ``diagnose``
(per-component contribution report for one observation), ``simulate``
(seeded synthetic data) and ``align`` (curve registration).  Every run
writes a manifest next to its outputs.  Configuration files are JSON (or
TOML on interpreters shipping tomllib).
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .adaptive import amfcc_evaluate, amfcc_fit, amfewma_phase1, amfewma_phase2
from .basis import build_basis
from .errors import FunmonError, IncompatibleModel, InvalidConfiguration, NotFound
from .frcc import FrccModel, frcc_phase1, frcc_phase2
from .frtm import Curve, FdtwConfig, RtModel, align_curve, frtm_phase1, frtm_phase2, procrustes_template
from .io import (
    IngestReport,
    canonical_json,
    export_csv,
    ingest_csv,
    load_model,
    model_kind,
    outcome_record,
    save_model,
    write_outcomes,
)
from .mfpca import sample_from_profiles
from .monitoring import MonitoringModel, phase1_fit, phase2_evaluate
from .robust import romfcc_phase1
from .simulate import SimConfig, generate
from .smoothing import DiscreteProfile

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_SIGNAL = 3


def _load_config(path):
    text = Path(path).read_bytes()
    if str(path).endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError as exc:
            raise InvalidConfiguration(
                "TOML configs need Python >= 3.11; use JSON here"
            ) from exc
        return tomllib.loads(text.decode("utf-8"))
    try:
        return json.loads(text.decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidConfiguration(f"config {path}: {exc}") from exc


def _cfg(config, key, default=None, required=False):
    if key in config:
        return config[key]
    if required:
        raise InvalidConfiguration(f"config key {key!r} is required")
    return default


def _write_manifest(out_paths, args, config_path, seed):
    manifest = {
        "command": " ".join(sys.argv[1:]) if sys.argv else "",
        "config": str(config_path) if config_path else None,
        "inputs": [str(p) for p in getattr(args, "_inputs", [])],
        "outputs": [str(p) for p in out_paths],
        "seed": seed,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "version": __version__,
    }
    path = Path(out_paths[0]).with_suffix(Path(out_paths[0]).suffix + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _read_profiles(data_path, config):
    domain = tuple(_cfg(config, "domain", required=True))
    components = _cfg(config, "components")
    if str(data_path) == "-":
        import io as _io
        import tempfile

        with tempfile.NamedTemporaryFile("w", suffix=".csv", delete=False) as tmp:
            tmp.write(sys.stdin.read())
            data_path = tmp.name
    report = ingest_csv(data_path, domain=domain, components=components)
    return report, domain


def _basis_from_config(config, domain):
    return build_basis(
        domain, K=int(_cfg(config, "K", 15)), order=int(_cfg(config, "order", 4))
    )


def _profiles_to_curves(profiles):
    return [Curve(prof.argvals[0], prof.values[0]) for prof in profiles]


def _split_xy(report: IngestReport, config):
    response = _cfg(config, "response", required=True)
    covariates = _cfg(config, "covariates")
    names = report.components
    if response not in names:
        raise InvalidConfiguration(f"response {response!r} not among {names}")
    if covariates is None:
        covariates = [c for c in names if c != response]
    x_profiles, y_profiles = [], []
    for prof in report.profiles:
        idx = {name: i for i, name in enumerate(names)}
        x_profiles.append(
            DiscreteProfile(
                [prof.argvals[idx[c]] for c in covariates],
                [prof.values[idx[c]] for c in covariates],
                obs_id=prof.obs_id,
            )
        )
        y_profiles.append(
            DiscreteProfile(
                [prof.argvals[idx[response]]],
                [prof.values[idx[response]]],
                obs_id=prof.obs_id,
            )
        )
    return x_profiles, y_profiles, covariates, response


# ------------------------------------------------------------------ fit


def _fit_summary(kind, model):
    if kind in ("chart", "romfcc"):
        return {
            "kind": kind,
            "L": int(model.mfpca.L),
            "eigenvalues": model.mfpca.eigenvalues.tolist(),
            "cl_t2": model.cl_t2,
            "cl_spe": model.cl_spe,
            "contrib_limits_t2": model.contrib_limits_t2.tolist(),
            "contrib_limits_spe": model.contrib_limits_spe.tolist(),
        }
    if kind == "frcc":
        return {
            "kind": kind,
            "choice": model.choice,
            "L": model.fof.L,
            "M": model.fof.M,
            "cl_t2": model.monitor.cl_t2,
            "cl_spe": model.monitor.cl_spe,
        }
    if kind == "frtm":
        return {
            "kind": kind,
            "lambda": model.lam,
            "monitoring_grid": model.monitoring_grid.tolist(),
            "per_x": [
                {"x": per.x_frac, "L": int(per.mfpca.L), "cl_t2": per.cl_t2, "cl_spe": per.cl_spe}
                for per in model.per_x
            ],
        }
    if kind == "amfewma":
        return {
            "kind": kind,
            "lambda": model.lam,
            "k": model.k,
            "cl": model.cl,
            "target_arl": model.target_arl,
            "L": int(model.mfpca.L),
        }
    if kind == "amfcc":
        return {
            "kind": kind,
            "combiner": model.combiner,
            "cl": model.cl,
            "tuning_distributions": [
                {"lambda": c.lam, "L": c.L, "n": int(c.tuning_t2.size)}
                for c in model.combos
            ],
        }
    raise InvalidConfiguration(f"unknown method {kind!r}")


def cmd_fit(args):
    config = _load_config(args.config)
    seed = int(_cfg(config, "seed", 0))
    alpha_star = float(_cfg(config, "alpha_star", 0.05))
    split = float(_cfg(config, "split", 0.7))

    if args.method == "frtm":
        report, domain = _read_profiles(args.data, config)
        curves = _profiles_to_curves(report.profiles)
        fdtw = FdtwConfig(
            s_min=float(_cfg(config, "s_min", 0.3)),
            s_max=float(_cfg(config, "s_max", 3.0)),
            lam=float(_cfg(config, "lambda", 0.01)),
            alpha_grid=tuple(_cfg(config, "alpha_grid", (0.0, 0.25, 0.5, 0.75, 1.0))),
            grid_sizes=tuple(_cfg(config, "grid_sizes", (101, 101))),
        )
        model = frtm_phase1(
            curves,
            monitoring_grid=_cfg(config, "monitoring_grid"),
            alpha_star=alpha_star,
            config=fdtw,
            lambda_grid=_cfg(config, "lambda_grid"),
            split=split,
            seed=seed,
            amp_dim=int(_cfg(config, "amp_dim", 20)),
            warp_dim=int(_cfg(config, "warp_dim", 12)),
        )
        kind = "frtm"
    elif args.method == "frcc":
        report, domain = _read_profiles(args.data, config)
        basis = _basis_from_config(config, domain)
        x_profiles, y_profiles, covariates, response = _split_xy(report, config)
        lambdas_cfg = _cfg(config, "lambdas")
        X, lambdas_x = sample_from_profiles(
            x_profiles, basis,
            lambdas=None if lambdas_cfg is None else lambdas_cfg[:-1] or None,
        )
        Y, lambdas_y = sample_from_profiles(
            y_profiles, basis,
            lambdas=None if lambdas_cfg is None else lambdas_cfg[-1:],
        )
        model = frcc_phase1(
            X, Y, split=split, alpha_star=alpha_star,
            choice=_cfg(config, "choice"), seed=seed,
            variance_fraction=float(_cfg(config, "variance_fraction", 0.8)),
        )
        model.lambdas_x = lambdas_x
        model.lambdas_y = lambdas_y
        model.covariates = covariates
        model.response = response
        kind = "frcc"
    elif args.method in ("chart", "romfcc"):
        report, domain = _read_profiles(args.data, config)
        basis = _basis_from_config(config, domain)
        sample, lambdas = sample_from_profiles(
            report.profiles, basis, lambdas=_cfg(config, "lambdas")
        )
        if args.method == "chart":
            model = phase1_fit(
                sample, split=split, alpha_star=alpha_star,
                variance_fraction=float(_cfg(config, "variance_fraction", 0.8)),
                seed=seed, lambdas=lambdas,
            )
        else:
            model = romfcc_phase1(
                sample, alpha_star=alpha_star,
                variance_fraction=float(_cfg(config, "variance_fraction", 0.8)),
                h_fraction=float(_cfg(config, "h_fraction", 0.75)),
                alpha_fil=float(_cfg(config, "alpha_fil", 0.95)),
                noise=bool(_cfg(config, "noise", True)),
                seed=seed,
            )
            model.lambdas = lambdas
        kind = args.method
    elif args.method == "amfewma":
        report, domain = _read_profiles(args.data, config)
        basis = _basis_from_config(config, domain)
        sample, lambdas = sample_from_profiles(
            report.profiles, basis, lambdas=_cfg(config, "lambdas")
        )
        model = amfewma_phase1(
            sample,
            lambda_grid=tuple(_cfg(config, "lambda_grid", (0.1, 0.3, 1.0))),
            k_grid=tuple(_cfg(config, "k_grid", (2.0, 3.0))),
            target_arl=float(_cfg(config, "target_arl", 200.0)),
            seed=seed,
            n_boot=int(_cfg(config, "n_boot", 200)),
        )
        model.lambdas = lambdas
        kind = "amfewma"
    elif args.method == "amfcc":
        report, domain = _read_profiles(args.data, config)
        basis = _basis_from_config(config, domain)
        model = amfcc_fit(
            report.profiles, basis,
            lambda_grid=_cfg(config, "lambda_grid"),
            L_grid=_cfg(config, "L_grid", (0.7, 0.8, 0.9)),
            combiner=_cfg(config, "combiner", "fisher"),
            alpha_star=alpha_star, split=split, seed=seed,
        )
        kind = "amfcc"
    else:
        raise InvalidConfiguration(f"unknown method {args.method!r}")

    save_model(model, args.out)
    summary = _fit_summary("chart" if kind == "chart" else kind, model)
    summary_path = Path(args.out).with_suffix(".summary.json")
    summary_path.write_text(canonical_json(summary) + "\n")
    args._inputs = [args.data]
    _write_manifest([args.out, summary_path], args, args.config, seed)
    print(f"wrote {args.out} ({kind}); summary in {summary_path}")
    return EXIT_OK


# -------------------------------------------------------------- monitor


def _evaluate_stream(model, report: IngestReport):
    kind = model_kind(model)
    outcomes = []
    if isinstance(model, MonitoringModel):
        for prof in report.profiles:
            outcomes.append((phase2_evaluate(prof, model), model))
    elif isinstance(model, FrccModel):
        if model.lambdas_x is None or model.covariates is None:
            raise IncompatibleModel("archive lacks the smoothing setup for raw data")
        config = {"response": model.response, "covariates": model.covariates}
        x_profiles, y_profiles, _, _ = _split_xy(report, config)
        from .smoothing import fit_penalized

        basis = model.x_std.basis
        for xp, yp in zip(x_profiles, y_profiles):
            x_row = fit_penalized(xp, basis, model.lambdas_x).coeffs.ravel()
            y_row = fit_penalized(yp, model.y_std.basis, model.lambdas_y).coeffs.ravel()
            out = frcc_phase2(x_row, y_row, model)
            out.obs_id = xp.obs_id
            outcomes.append((out, model.monitor))
    elif isinstance(model, RtModel):
        for prof in report.profiles:
            out = frtm_phase2(Curve(prof.argvals[0], prof.values[0]), model)
            out.obs_id = prof.obs_id
            x = out.context["x"]
            per = model.per_x[int(np.searchsorted(model.monitoring_grid, x))]
            outcomes.append((out, per))
    elif kind == "amfewma":
        from .smoothing import fit_penalized

        if model.lambdas is None:
            raise IncompatibleModel("archive lacks the smoothing setup for raw data")
        rows = np.stack(
            [
                fit_penalized(prof, model.basis, model.lambdas).coeffs.ravel()
                for prof in report.profiles
            ]
        )
        results = amfewma_phase2(rows, model)
        for prof, (t2, signal) in zip(report.profiles, results):
            outcomes.append(
                (
                    _plain_outcome(prof.obs_id, t2, signal),
                    model,
                )
            )
    elif kind == "amfcc":
        for prof in report.profiles:
            t2c, signal, diag = amfcc_evaluate(prof, model)
            out = _plain_outcome(prof.obs_id, t2c, signal)
            out.contrib_t2 = diag["t2"]
            out.contrib_spe = diag["spe"]
            outcomes.append((out, model))
    else:
        raise IncompatibleModel(f"cannot monitor with archive kind {kind!r}")
    return outcomes


def _plain_outcome(obs_id, t2, signal):
    from .monitoring import MonitoringOutcome

    return MonitoringOutcome(
        t2=float(t2),
        spe=0.0,
        signal_t2=bool(signal),
        signal_spe=False,
        contrib_t2=np.zeros(0),
        contrib_spe=np.zeros(0),
        flagged_components=(),
        obs_id=obs_id,
    )


def _record_for(outcome, limit_holder):
    if hasattr(limit_holder, "cl_t2"):
        return outcome_record(outcome, limit_holder)
    if hasattr(limit_holder, "cl"):
        record = outcome_record(outcome)
        record["cl"] = float(limit_holder.cl)
        return record
    return outcome_record(outcome)


def cmd_monitor(args):
    model = load_model(args.model)
    config = {"domain": _domain_of(model)}
    report, _ = _read_profiles(args.data, config)
    outcomes = _evaluate_stream(model, report)
    records = [_record_for(out, holder) for out, holder in outcomes]
    write_outcomes(records, args.out)
    args._inputs = [args.model, args.data]
    _write_manifest([args.out], args, None, None)
    any_signal = any(out.signal for out, _ in outcomes)
    print(f"{len(records)} observations, {sum(o.signal for o, _ in outcomes)} signals")
    return EXIT_SIGNAL if any_signal else EXIT_OK


def _domain_of(model):
    if isinstance(model, MonitoringModel):
        return model.standardization.basis.domain
    if isinstance(model, FrccModel):
        return model.x_std.basis.domain
    if isinstance(model, RtModel):
        return model.query_domain
    return model.basis.domain


# ------------------------------------------------------------- diagnose


def _svg_bars(values, limits, names, title):
    """Minimal deterministic SVG bar chart with limit ticks."""
    width, height, margin = 420, 180, 30
    n = len(values)
    span = max(list(np.abs(values)) + list(np.abs(limits)) + [1e-12])
    bar_w = (width - 2 * margin) / max(n, 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{margin}" y="14" font-size="11">{title}</text>',
    ]
    base = height - margin
    scale = (height - 2 * margin - 14) / span
    for i, (v, lim) in enumerate(zip(values, limits)):
        x0 = margin + i * bar_w
        h = abs(v) * scale
        color = "#c0392b" if v > lim else "#2c3e50"
        parts.append(
            f'<rect x="{x0 + 2:.1f}" y="{base - h:.1f}" width="{bar_w - 4:.1f}" '
            f'height="{h:.1f}" fill="{color}"/>'
        )
        y_lim = base - lim * scale
        parts.append(
            f'<line x1="{x0 + 1:.1f}" y1="{y_lim:.1f}" x2="{x0 + bar_w - 1:.1f}" '
            f'y2="{y_lim:.1f}" stroke="#7f8c8d" stroke-dasharray="3,2"/>'
        )
        parts.append(
            f'<text x="{x0 + bar_w / 2:.1f}" y="{base + 12:.1f}" font-size="9" '
            f'text-anchor="middle">{names[i]}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_diagnose(args):
    model = load_model(args.model)
    config = {"domain": _domain_of(model)}
    report, _ = _read_profiles(args.data, config)
    wanted = [p for p in report.profiles if p.obs_id == args.obs]
    if not wanted:
        raise NotFound(f"observation {args.obs!r} not present in {args.data}")
    sub_report = IngestReport(
        profiles=wanted, components=report.components, counts=report.counts
    )
    outcome, holder = _evaluate_stream(model, sub_report)[0]
    record = _record_for(outcome, holder)
    if hasattr(holder, "contrib_limits_t2") and outcome.contrib_t2.size:
        record["contrib_limits_t2"] = [float(v) for v in holder.contrib_limits_t2]
        record["contrib_limits_spe"] = [float(v) for v in holder.contrib_limits_spe]
    Path(args.out).write_text(canonical_json(record) + "\n")
    if args.svg:
        names = (
            list(model.block_names)
            if isinstance(model, RtModel)
            else report.components[: outcome.contrib_t2.size]
        )
        limits_t2 = record.get("contrib_limits_t2", [np.inf] * len(names))
        svg = _svg_bars(
            outcome.contrib_t2, limits_t2, names, f"T2 contributions {args.obs}"
        )
        Path(args.svg).write_text(svg)
    args._inputs = [args.model, args.data]
    _write_manifest([args.out], args, None, None)
    print(f"diagnosis for {args.obs} written to {args.out}")
    return EXIT_OK


# ------------------------------------------------------------- simulate


def cmd_simulate(args):
    config = _load_config(args.config)
    sim = SimConfig(**config)
    profiles, labels = generate(sim)
    export_csv(profiles, args.out, components=[f"c{k}" for k in range(sim.p)])
    labels_path = Path(args.out).with_suffix(".labels.json")
    labels_path.write_text(
        canonical_json(
            {
                "shifted": labels.shifted.astype(int).tolist(),
                "contaminated_cells": labels.contaminated_cells.astype(int).tolist(),
                "warp_coeffs": labels.warp_coeffs.tolist(),
            }
        )
        + "\n"
    )
    args._inputs = []
    _write_manifest([args.out, labels_path], args, args.config, sim.seed)
    print(f"{sim.n} profiles written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- align


def cmd_align(args):
    config = _load_config(args.config)
    report, domain = _read_profiles(args.data, config)
    curves = _profiles_to_curves(report.profiles)
    fdtw = FdtwConfig(
        s_min=float(_cfg(config, "s_min", 0.3)),
        s_max=float(_cfg(config, "s_max", 3.0)),
        lam=float(_cfg(config, "lambda", 0.01)),
        alpha_grid=tuple(_cfg(config, "alpha_grid", (0.0, 0.25, 0.5, 0.75, 1.0))),
        grid_sizes=tuple(_cfg(config, "grid_sizes", (101, 101))),
    )
    template_spec = _cfg(config, "template", "procrustes")
    if template_spec == "procrustes":
        template = procrustes_template(curves, fdtw).curve
    else:
        match = [c for c, p in zip(curves, report.profiles) if p.obs_id == template_spec]
        if not match:
            raise NotFound(f"template observation {template_spec!r} not found")
        template = match[0]

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    warp_rows = []
    aligned_rows = []
    svg_lines = []
    t_grid = np.linspace(template.x[0], template.x[-1], fdtw.grid_sizes[0])
    for prof, curve in zip(report.profiles, curves):
        warp, aligned = align_curve(curve, template, fdtw)
        for t, h in zip(warp.grid, warp.values):
            warp_rows.append((prof.obs_id, t, h))
        for t, y in zip(t_grid, aligned):
            aligned_rows.append((prof.obs_id, t, y))
        svg_lines.append(aligned)

    def write_long(path, rows, value_name):
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(f"obs_id,t,{value_name}\n")
            for obs_id, t, v in rows:
                handle.write(f"{obs_id},{format(float(t), '.17g')},{format(float(v), '.17g')}\n")

    warps_path = out_dir / "warps.csv"
    aligned_path = out_dir / "aligned.csv"
    write_long(warps_path, warp_rows, "h")
    write_long(aligned_path, aligned_rows, "y")

    svg_path = out_dir / "overlay.svg"
    svg_path.write_text(_svg_overlay(t_grid, svg_lines, template))
    args._inputs = [args.data]
    _write_manifest([warps_path, aligned_path, svg_path], args, args.config, None)
    print(f"aligned {len(curves)} curves into {out_dir}")
    return EXIT_OK


def _svg_overlay(t_grid, aligned_list, template):
    width, height, margin = 480, 240, 24
    all_vals = np.concatenate([np.asarray(a) for a in aligned_list] + [template.y])
    lo, hi = float(all_vals.min()), float(all_vals.max())
    span = (hi - lo) or 1.0

    def path_for(vals):
        xs = margin + (t_grid - t_grid[0]) / (t_grid[-1] - t_grid[0]) * (width - 2 * margin)
        ys = height - margin - (np.asarray(vals) - lo) / span * (height - 2 * margin)
        points = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
        return points

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">']
    for vals in aligned_list:
        parts.append(
            f'<polyline fill="none" stroke="#95a5a6" stroke-width="0.6" points="{path_for(vals)}"/>'
        )
    tpl_vals = np.interp(t_grid, template.x, template.y)
    parts.append(
        f'<polyline fill="none" stroke="#c0392b" stroke-width="1.6" points="{path_for(tpl_vals)}"/>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ----------------------------------------------------------------- main


def build_parser():
    parser = argparse.ArgumentParser(
        prog="funmon", description="Statistical process monitoring for functional data"
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit a Phase I model")
    fit.add_argument("--method", required=True,
                     choices=["chart", "frcc", "romfcc", "frtm", "amfewma", "amfcc"])
    fit.add_argument("--data", required=True)
    fit.add_argument("--config", required=True)
    fit.add_argument("--out", required=True)
    fit.set_defaults(func=cmd_fit)

    monitor = sub.add_parser("monitor", help="evaluate a Phase II stream")
    monitor.add_argument("--model", required=True)
    monitor.add_argument("--data", required=True, help="CSV path or - for stdin")
    monitor.add_argument("--out", required=True)
    monitor.set_defaults(func=cmd_monitor)

    diagnose = sub.add_parser("diagnose", help="contribution report for one observation")
    diagnose.add_argument("--model", required=True)
    diagnose.add_argument("--obs", required=True)
    diagnose.add_argument("--data", required=True)
    diagnose.add_argument("--out", required=True)
    diagnose.add_argument("--svg", default=None)
    diagnose.set_defaults(func=cmd_diagnose)

    simulate = sub.add_parser("simulate", help="generate seeded synthetic data")
    simulate.add_argument("--config", required=True)
    simulate.add_argument("--out", required=True)
    simulate.set_defaults(func=cmd_simulate)

    align = sub.add_parser("align", help="register curves to a template")
    align.add_argument("--data", required=True)
    align.add_argument("--config", required=True)
    align.add_argument("--out-dir", required=True)
    align.set_defaults(func=cmd_align)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FunmonError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
