"""moe-lab command line: run, compare, expert-usage, distill.

Exit codes: 0 ok, 2 invalid config or malformed report, 3 non-finite loss,
4 missing dataset files, 5 output directory already populated.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiments as X
from .config import ConfigError, ExperimentConfig
from .training import NonFiniteLossError

EXIT_OK, EXIT_CONFIG, EXIT_NONFINITE, EXIT_DATA, EXIT_EXISTS = 0, 2, 3, 4, 5


def _seeds(text: str) -> list[int]:
    try:
        if "-" in text and "," not in text:
            lo, hi = (int(x) for x in text.split("-"))
            return list(range(lo, hi + 1))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must look like '0,1,2' or '0-4', got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moe-lab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="verb", required=True)

    def sweep_flags(sp, config_required):
        sp.add_argument("--config", required=config_required, type=Path)
        sp.add_argument("--out", type=Path, help="output directory (default: config 'out' or runs/<name>)")
        sp.add_argument("--seeds", type=_seeds, help="override the config's seed list")
        sp.add_argument("--overwrite", action="store_true", help="replace an existing output directory")
        sp.add_argument("--threads", type=int, default=1, help="run grid/seed points concurrently")

    run = sub.add_parser("run", help="train every grid point and seed of a config")
    sweep_flags(run, True)

    cmp_ = sub.add_parser("compare", help="tabulate error, I(E;Y), H_s, H_u of several reports")
    cmp_.add_argument("reports", nargs="+", type=Path)
    cmp_.add_argument("--csv", type=Path, help="also write the table as CSV")

    use = sub.add_parser("expert-usage", help="count experts receiving at least a share of samples")
    use.add_argument("report", type=Path)
    use.add_argument("--threshold", type=float, default=0.01)

    dst = sub.add_parser("distill", help="move an attentive model's experts under a softmax gate")
    dst.add_argument("--source", required=True, type=Path, help="checkpoint or experiment directory")
    dst.add_argument("--regime", choices=sorted(X.SOURCE_REGIME),
                     help="defaults to the config's regime, else inferred from the source report")
    sweep_flags(dst, False)
    return p


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.seeds is not None:
        cfg.seeds = args.seeds
        cfg.validate()
    return cfg


def _distill_config(args) -> ExperimentConfig:
    if args.config is not None:
        raw = ExperimentConfig.load(args.config).to_dict()
    else:
        raw = {"regime": "distill_from_Ls", "name": "distilled"}
    src = args.source
    raw["source"] = str(src)
    regime = args.regime
    if regime is None and args.config is None:
        report = (src / "selected" / "report.json") if src.is_dir() else src.with_name("report.json")
        if not report.exists():
            raise ConfigError("regime", "cannot infer the distillation regime; pass --regime")
        inverse = {v: k for k, v in X.SOURCE_REGIME.items()}
        src_regime = X.read_report(report).regime
        if src_regime not in inverse:
            raise ConfigError("source", f"a {src_regime} model is not a distillation source")
        regime = inverse[src_regime]
    if regime is not None:
        raw["regime"] = regime
    if args.seeds is not None:
        raw["seeds"] = args.seeds
    return ExperimentConfig.from_dict(raw)


def _sweep(cfg: ExperimentConfig, args) -> int:
    if args.threads < 1:
        raise ConfigError("threads", "must be >= 1")
    result = X.run_experiment(cfg, args.out, overwrite=args.overwrite, threads=args.threads)
    s = result.summary
    sel = result.selected_report
    print(f"{cfg.regime}: selected {s['selected']['grid']} seed {s['selected']['seed']} "
          f"(train error {sel.train_error:.4f}); test error {sel.test_error:.4f}, "
          f"mean over seeds {s['test_error_mean']:.4f} +/- {s['test_error_std']:.4f}")
    if "source_test_error" in s:
        print(f"source test error {s['source_test_error']:.4f}")
    print(f"results in {result.out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "run":
            return _sweep(_load_config(args), args)
        if args.verb == "distill":
            return _sweep(_distill_config(args), args)
        if args.verb == "compare":
            rows = X.compare(args.reports)
            sys.stdout.write(X.format_table(rows))
            if args.csv:
                args.csv.write_text(X.rows_to_csv(rows))
            return EXIT_OK
        if args.verb == "expert-usage":
            if not 0.0 < args.threshold < 1.0:
                raise ConfigError("threshold", f"must lie in (0, 1), got {args.threshold}")
            print(X.expert_usage(args.report, args.threshold))
            return EXIT_OK
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (X.ReportError, FileNotFoundError) as exc:
        if isinstance(exc, X.DataMissingError):
            print(f"missing dataset: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"bad report: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except X.OutputExistsError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_EXISTS
    return EXIT_CONFIG  # unreachable: argparse enforces a verb


if __name__ == "__main__":
    sys.exit(main())
