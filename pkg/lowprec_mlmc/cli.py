import argparse
import asyncio
import sys

from .config import ConfigError, PROGRESS_STYLES, build_config
from .runner import run
from .sde import NumericalError

SUBCOMMAND_HELP = {
    "density": "Approximate inverse CDF on a grid plus the sampled density of its output",
    "two-way": "Variance of exact minus low-precision terminal values per level and precision",
    "four-way": "Two-way and four-way difference variances for single, low and low+Kahan variants",
    "speedup": "Per-level nested MLMC speedups from a level-stats file or live estimation",
    "step-errors": "Mean signed and absolute per-step rounding residuals",
    "estimate": "Nested MLMC estimate of E[X_T] to a target RMS error",
}


def _common_options() -> argparse.ArgumentParser:
    c = argparse.ArgumentParser(add_help=False)
    c.add_argument("--config", help="key=value config file (flags override it)")

    c.add_argument("--precision", help="Low precision, or a comma list for two-way: bf16, fp16, fp22, fp32, fp64, custom:m")
    c.add_argument("--approx", help="Gaussian inverse CDF: exact, linear:K or cubic:K (K a power of two, <= 1024)")
    c.add_argument("--kahan", action=argparse.BooleanOptionalAction, default=None,
                   help="Kahan-compensated accumulation of low-precision paths")
    c.add_argument("--levels", help="Level range a..b (default: depends on subcommand)")
    c.add_argument("--max-level", type=int, help="Shorthand for --levels 0..L")
    c.add_argument("--paths", help="Paths per level: n (halved per level above 9) or n1,n2,... per level")

    # Model parameters
    c.add_argument("--mu", type=float, help="GBM drift (default: 0.05)")
    c.add_argument("--sigma", type=float, help="GBM volatility (default: 0.2)")
    c.add_argument("--x0", type=float, help="Initial value (default: 1.0)")
    c.add_argument("--horizon", type=float, help="Time horizon T (default: 1.0)")

    c.add_argument("--seed", type=int, help="Random seed (default: 1729)")
    c.add_argument("--cost-model", help="key=value file overriding cost model fields")
    c.add_argument("--out", help="Output CSV file (default: stdout)")
    c.add_argument("--concurrency", type=int, help="Worker threads for path batches (default: 1)")
    c.add_argument("--batch-size", type=int, help="Paths per batch; output depends on it (default: 2048)")
    c.add_argument("--eps", type=float, help="Target RMS error for estimate (default: 1e-3)")
    c.add_argument("--pilot-paths", type=int, help="Pilot paths per level for estimate (default: 1000)")
    c.add_argument("--bins", type=int, help="Histogram bins for density (default: 64)")
    c.add_argument("--samples", type=int, help="Samples for density and step-errors (default: 1000000)")
    c.add_argument("--progress-style", choices=list(PROGRESS_STYLES), help="Progress output style (default: compact)")
    c.add_argument("--quiet", action=argparse.BooleanOptionalAction, default=None,
                   help="Suppress progress output (errors only)")
    c.add_argument("--validate", action=argparse.BooleanOptionalAction, default=None,
                   help="Validate output rows against JSON Schema (requires jsonschema)")
    return c


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description="Low-precision Euler-Maruyama and nested multilevel Monte Carlo experiments")
    sub = p.add_subparsers(dest="subcommand", required=True)
    common = _common_options()
    parsers = {name: sub.add_parser(name, parents=[common], help=text, description=text)
               for name, text in SUBCOMMAND_HELP.items()}
    parsers["four-way"].add_argument("--stats-out", help="Also write the full level-stats table here")
    parsers["speedup"].add_argument("--stats", help="Level-stats CSV from four-way --stats-out (default: estimate live)")
    return p


def main():
    p = build_parser()
    args = p.parse_args()

    overrides = {k: v for k, v in vars(args).items() if k not in ("subcommand", "config")}
    try:
        config = build_config(args.subcommand, overrides, args.config)
    except ConfigError as e:
        p.error(str(e))

    if not config.quiet:
        levels = f"{config.levels[0]}..{config.levels[-1]}"
        print(f"Running {config.subcommand}: precision={','.join(s.name for s in config.precisions)}, "
              f"approx={config.approx_name}, kahan={config.kahan}, levels={levels}", file=sys.stderr)

    try:
        asyncio.run(run(config))
    except ConfigError as e:
        p.error(str(e))
    except (NumericalError, ArithmeticError) as e:
        print(f"Numerical error: {e}", file=sys.stderr)
        sys.exit(3)
    except RuntimeError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
