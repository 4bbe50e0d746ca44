"""Command-line front end: ``mespecvar {filter,lagselect,fit,graph,simulate}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import report
from .data import (DEFAULT_BANDS, BandDefinition, default_band, load_manifest,
                   manifest_band, save_manifest)
from .exceptions import DataError, NumericalError
from .filtering import DEFAULT_ORDER
from .inference import (DEFAULT_ALPHA, DEFAULT_QUANTILE, diff_graphs, granger_edges,
                        random_sd_heatmaps, welch_table)
from .mixed import OptimizerConfig
from .pipeline import fit_bands, prepare_bands
from .simulation import SimulationConfig, run_replicates
from .var import CRITERIA, select_lag

log = logging.getLogger("mespecvar")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _probability(text):
    v = float(text)
    if not 0 <= v <= 1:
        raise argparse.ArgumentTypeError("must lie in [0, 1]")
    return v


def parse_band_def(text: str) -> BandDefinition:
    """``lo:7,hi:13,name:mu`` -> BandDefinition('mu', 7, 13)."""
    fields = {}
    for part in text.split(","):
        if ":" not in part:
            raise argparse.ArgumentTypeError(f"malformed band definition {text!r}")
        k, v = part.split(":", 1)
        fields[k.strip()] = v.strip()
    try:
        return BandDefinition(fields["name"], float(fields["lo"]), float(fields["hi"]))
    except KeyError as exc:
        raise argparse.ArgumentTypeError(f"band definition lacks {exc}") from None
    except (ValueError, DataError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _bands(args) -> list[BandDefinition]:
    bands = []
    if args.bands:
        for name in args.bands.split(","):
            name = name.strip()
            if name:
                try:
                    bands.append(default_band(name))
                except DataError as exc:
                    raise UsageError(str(exc)) from None
    bands.extend(args.band_def or [])
    return bands


def _common(parser, manifest=True):
    if manifest:
        parser.add_argument("--manifest", required=True, type=Path,
                            help="dataset manifest (JSON)")
    parser.add_argument("--out", required=True, type=Path, help="output directory")
    parser.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1,
                        help="worker processes (default: logical cores)")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")


def _band_flags(parser):
    parser.add_argument("--bands", default=None,
                        help="comma-separated standard bands "
                             f"({','.join(b.name for b in DEFAULT_BANDS)})")
    parser.add_argument("--band-def", action="append", type=parse_band_def,
                        metavar="lo:LO,hi:HI,name:NAME", help="custom band (repeatable)")
    parser.add_argument("--order", type=_positive_int, default=DEFAULT_ORDER,
                        help="Butterworth prototype order (default 3)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mespecvar", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("filter", help="band-pass decompose every subject")
    _common(p)
    _band_flags(p)
    p.add_argument("--clean", action="store_true",
                   help="clip outliers and z-score before filtering")
    p.add_argument("--outlier-k", type=float, default=4.0,
                   help="outlier clipping threshold in scaled MADs (with --clean)")

    p = sub.add_parser("lagselect", help="per-subject VAR lag selection")
    _common(p)
    p.add_argument("--pmax", type=_positive_int, default=6, help="largest lag (default 6)")
    p.add_argument("--criterion", choices=CRITERIA, default="bic")
    p.add_argument("--method", choices=("ols", "lassle"), default="ols",
                   help="estimator for the candidate fits")

    p = sub.add_parser("fit", help="fit the mixed-effects VAR per band and channel")
    _common(p)
    _band_flags(p)
    p.add_argument("--lag", type=_positive_int, default=1, help="VAR lag order (default 1)")
    p.add_argument("--band-label", default=None,
                   help="band name for data fitted as-is (default: manifest 'band' "
                        "key or 'broadband')")
    p.add_argument("--outlier-k", type=float, default=4.0,
                   help="outlier clipping threshold in scaled MADs (default 4)")
    p.add_argument("--no-clean", action="store_true",
                   help="skip outlier clipping and z-scoring")
    p.add_argument("--optimizer", choices=("lbfgsb", "nelder-mead"), default="lbfgsb")

    p = sub.add_parser("graph", help="Granger graphs, heatmaps and group comparisons")
    _common(p, manifest=False)
    p.add_argument("--manifest", type=Path, default=None, help=argparse.SUPPRESS)
    p.add_argument("--bundle", type=Path, default=None,
                   help="directory holding fits/ (default: --out)")
    p.add_argument("--alpha", type=_probability, default=DEFAULT_ALPHA,
                   help="edge significance level (default 1e-6)")
    p.add_argument("--quantile", type=float, default=DEFAULT_QUANTILE,
                   help="magnitude quantile in [0, 1) (default 0.8)")
    p.add_argument("--welch-alpha", type=_probability, default=0.05,
                   help="family-wise level of the Welch comparisons (default 0.05)")
    p.add_argument("--self-loops", action="store_true",
                   help="draw autoregressive (r -> r) edges")
    p.add_argument("--svg", action="store_true", help="also render heatmap figures")

    p = sub.add_parser("simulate", help="Monte Carlo consistency study")
    _common(p, manifest=False)
    p.add_argument("--manifest", type=Path, default=None, help=argparse.SUPPRESS)
    p.add_argument("--config", type=Path, default=None,
                   help="simulation config JSON (must contain 'seed')")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--replicates", type=_positive_int, default=None,
                   help="overrides n_replicates")
    p.add_argument("--svg", action="store_true", help="also render trend figures")
    return parser


# ----------------------------------------------------------------- commands

def cmd_filter(args) -> int:
    bands = _bands(args) or list(DEFAULT_BANDS)
    dataset = load_manifest(args.manifest)
    per_band = prepare_bands(dataset, bands, outlier_k=args.outlier_k,
                             clean=args.clean, order=args.order)
    out = args.out
    for name, ds in per_band.items():
        save_manifest(ds, out / f"manifest_{name}.json", band=name,
                      csv_names=[f"{s.subject_id}/{name}.csv" for s in ds.subjects])
    log.info("wrote %d bands for %d subjects to %s", len(per_band),
             len(dataset.subjects), out)
    return EXIT_OK


def cmd_lagselect(args) -> int:
    dataset = load_manifest(args.manifest)
    rep = select_lag(dataset, args.pmax, args.criterion, args.method)
    report.write_rows(args.out / "lagselect.csv", ["subject", "criterion", "p", "value"],
                      rep.rows())
    report.write_json(args.out / "lagselect.json", {
        "criterion": rep.criterion,
        "p_max": rep.p_max,
        "method": args.method,
        "selected": rep.selected,
        "modal_selection": rep.modal_selection,
        "errors": rep.errors,
    })
    return EXIT_OK


def cmd_fit(args) -> int:
    dataset = load_manifest(args.manifest)
    bands = _bands(args)
    label = args.band_label or manifest_band(args.manifest) or "broadband"
    band_data = prepare_bands(dataset, bands or None, band_label=label,
                              outlier_k=args.outlier_k, clean=not args.no_clean,
                              order=args.order)
    config = OptimizerConfig(method=args.optimizer)
    outcomes = fit_bands(band_data, args.lag, config, args.threads)
    rows = []
    for o in outcomes:
        if o.fit is not None:
            report.write_fit(args.out, o.fit)
            c = o.fit.convergence
            rows.append({"band": o.band, "target": o.channel, "status": "ok",
                         "converged": c["converged"], "deviance": o.fit.deviance,
                         "boundary_components": len(c["boundary"]),
                         "scaled_gradient_norm": c["scaled_gradient_norm"],
                         "message": c["message"]})
        else:
            rows.append({"band": o.band, "target": o.channel, "status": "failed",
                         "converged": False, "deviance": None,
                         "boundary_components": None, "scaled_gradient_norm": None,
                         "message": o.error})
    failed = sum(r["status"] == "failed" for r in rows)
    report.write_json(args.out / "fits" / "summary.json", {
        "bands": list(band_data),
        "channels": list(dataset.channel_names),
        "lag": args.lag,
        "groups": dataset.group_counts(),
        "n_subjects": len(dataset.subjects),
        "fits": rows,
        "failed": failed,
    })
    if failed:
        log.error("%d of %d fits failed", failed, len(rows))
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_graph(args) -> int:
    if not 0 <= args.quantile < 1:
        raise UsageError("--quantile must lie in [0, 1)")
    bundle = args.bundle or args.out
    try:
        summary, fits = report.read_bundle(bundle)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    heatmaps = random_sd_heatmaps(fits)
    for band, band_fits in fits.items():
        d = args.out / "graphs" / band
        edges, graphs = granger_edges(band_fits, args.alpha, args.quantile, args.self_loops)
        for g, graph in graphs.items():
            (d).mkdir(parents=True, exist_ok=True)
            (d / f"group{g}.dot").write_text(report.dot_source(graph))
        report.write_edges_json(d / "edges.json", edges, args.alpha, args.quantile)
        if 1 in graphs and 2 in graphs:
            diff = diff_graphs(graphs[1], graphs[2])
            (d / "difference.dot").write_text(report.difference_dot_source(diff))
        report.write_heatmaps(d, heatmaps[band])
        rows, adjusted, reject = welch_table(band_fits, args.welch_alpha)
        report.write_rows(
            d / "welch.csv",
            ["source", "target", "lag", "diff", "se_diff", "t", "df", "p",
             "p_bonferroni", "reject"],
            ([r.source, r.target, r.lag, r.diff, r.se_diff, r.t, r.df, r.p, a, bool(x)]
             for r, a, x in zip(rows, adjusted, reject)))
        if args.svg:
            from .plotting import plot_heatmaps
            plot_heatmaps(heatmaps[band], d / "heatmap.svg")
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.config is not None:
        doc = report.read_json(args.config)
    else:
        doc = {}
    if args.seed is not None:
        doc["seed"] = args.seed
    if "seed" not in doc:
        raise UsageError("a seed is mandatory: set 'seed' in --config or pass --seed")
    if args.replicates is not None:
        doc["n_replicates"] = args.replicates
    config = SimulationConfig.from_dict(doc)
    rep = run_replicates(config, threads=args.threads)
    out = args.out / "simulation"
    report.write_json(out / "report.json", rep.to_dict())
    names = [f"ch{j + 1}" for j in range(config.n_channels)]
    for r in rep.regimes:
        for which in ("phi", "tau"):
            summary = getattr(r, which)
            for stat in ("bias", "mse", "sd"):
                report.write_matrix_csv(out / f"T{r.n_samples}" / f"{which}_{stat}.csv",
                                        getattr(summary, stat), names, names)
    report.write_rows(out / "trend.csv",
                      ["n_samples", "estimate", "mean_abs_bias", "mean_mse", "mean_sd"],
                      ([r.n_samples, which, *getattr(r, which).means().values()]
                       for r in rep.regimes for which in ("phi", "tau")))
    if args.svg:
        from .plotting import plot_error_matrices, plot_simulation_trends
        plot_simulation_trends(rep, out / "trends.svg")
        plot_error_matrices(rep, out / "phi_mse.svg")
    return EXIT_OK


COMMANDS = {"filter": cmd_filter, "lagselect": cmd_lagselect, "fit": cmd_fit,
            "graph": cmd_graph, "simulate": cmd_simulate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"mespecvar {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"mespecvar {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"mespecvar {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
