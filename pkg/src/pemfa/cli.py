"""Command-line front door: fit, model search, synthetic generation, and
EM-vs-partial-EM comparison.

Every command takes a single --out directory for its artifacts and a
single --seed controlling all randomness.  Exit codes are part of the
contract:

    0  success
    2  usage error (argument parsing)
    3  input table failed to parse
    4  fit degenerated on every initialization
    5  fit did not converge within the iteration budget
    6  every cell of a model search failed
    7  invalid configuration (e.g. more components than rows)
    8  artifact write failure
"""

import argparse
import os
import sys

import numpy as np

from . import data as dio
from .mixture import (
    DegenerateComponentError,
    FitConfig,
    MixtureError,
    fit_em,
    fit_pem,
    model_search,
)

EXIT_OK = 0
EXIT_PARSE = 3
EXIT_DEGENERATE = 4
EXIT_NONCONVERGED = 5
EXIT_ALL_FAILED = 6
EXIT_INVALID = 7
EXIT_IO = 8

SEED_ENV_VAR = "PEMFA_SEED"
HEDONIC_SCALE = (1.0, 9.0)


class _CliError(Exception):
    """Internal: carries an exit code and a user-facing message."""

    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _default_seed():
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise SystemExit(f"{SEED_ENV_VAR} must be an integer, got {env!r}")
    return None


def _add_common_fit_args(sub):
    sub.add_argument("--input", required=True, help="rating table (CSV)")
    sub.add_argument("--out", required=True, help="artifact directory")
    sub.add_argument("--delimiter", default=",")
    sub.add_argument("--scale-check", action="store_true",
                     help="require ratings within the 1..9 hedonic scale")
    sub.add_argument("--restarts", type=int, default=10)
    sub.add_argument("--tol", type=float, default=1e-8)
    sub.add_argument("--max-iter", type=int, default=5000)
    sub.add_argument("--sweeps-per-iter", type=int, default=1)
    sub.add_argument("--psi-floor-scale", type=float, default=1e-6,
                     help="noise-variance floor as a fraction of the pooled "
                          "per-product variance")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pemfa",
        description="Cluster incomplete block-design rating tables with a "
                    "shared-loadings mixture of factor analyzers.",
        epilog="Exit codes: 0 ok, 2 usage, 3 parse failure, 4 degenerate fit, "
               "5 non-convergence, 6 all grid cells failed, 7 invalid "
               "configuration, 8 write failure.")
    commands = parser.add_subparsers(dest="command", required=True)

    fit = commands.add_parser("fit", help="fit one (G, q) model")
    _add_common_fit_args(fit)
    fit.add_argument("--algorithm", choices=("em", "pem"), default="pem")
    fit.add_argument("--G", type=int, required=True, help="component count")
    fit.add_argument("--q", type=int, required=True, help="factor count")
    fit.add_argument("--seed", type=int, default=None)

    search = commands.add_parser("search", help="BIC model search over a grid")
    _add_common_fit_args(search)
    search.add_argument("--algorithm", choices=("em", "pem"), default="pem")
    search.add_argument("--G-min", type=int, default=1)
    search.add_argument("--G-max", type=int, default=6)
    search.add_argument("--q-min", type=int, default=1)
    search.add_argument("--q-max", type=int, default=3)
    search.add_argument("--bic-rule", choices=("max", "min"), default="max")
    search.add_argument("--seed", type=int, default=None)

    compare = commands.add_parser(
        "compare", help="run EM and partial EM from one shared initialization")
    _add_common_fit_args(compare)
    compare.add_argument("--G", type=int, required=True)
    compare.add_argument("--q", type=int, required=True)
    compare.add_argument("--seed", type=int, default=None)

    gen = commands.add_parser("generate", help="synthesize a block-design table")
    gen.add_argument("--out", required=True)
    gen.add_argument("--n", type=int, default=369)
    gen.add_argument("--p", type=int, default=12)
    gen.add_argument("--k", type=int, default=6,
                     help="products presented to each consumer")
    gen.add_argument("--G", type=int, default=3)
    gen.add_argument("--q", type=int, default=2)
    gen.add_argument("--separation", type=float, default=1.5,
                     help="std-dev of component means around the scale center")
    gen.add_argument("--seed", type=int, default=None)
    return parser


def _resolve_seed(args, required: bool) -> int:
    if args.seed is not None:
        return args.seed
    env = _default_seed()
    if env is not None:
        return env
    if required:
        print(f"error: --seed is required for '{args.command}' "
              f"(or set {SEED_ENV_VAR})", file=sys.stderr)
        raise SystemExit(2)
    return 1234


def _read_table(args):
    try:
        return dio.parse_table(args.input, delimiter=args.delimiter,
                               scale=HEDONIC_SCALE if args.scale_check else None)
    except FileNotFoundError as err:
        raise _CliError(EXIT_PARSE, str(err)) from None
    except dio.ParseError as err:
        raise _CliError(EXIT_PARSE,
                        f"cannot parse {args.input}: {err}") from None


def _config(args, seed) -> FitConfig:
    return FitConfig(restarts=args.restarts, seed=seed, tol=args.tol,
                     max_iter=args.max_iter,
                     sweeps_per_iter=args.sweeps_per_iter,
                     psi_floor_scale=args.psi_floor_scale,
                     bic_rule=getattr(args, "bic_rule", "max"))


def cmd_fit(args) -> int:
    seed = _resolve_seed(args, required=False)
    table = _read_table(args)
    if args.G >= table.n:
        print(f"error: {args.G} components need more than {table.n} rows",
              file=sys.stderr)
        return EXIT_INVALID
    if not 0 <= args.q < table.p:
        print(f"error: factor count must lie in [0, {table.p - 1}]",
              file=sys.stderr)
        return EXIT_INVALID
    fitter = fit_pem if args.algorithm == "pem" else fit_em
    try:
        result = fitter(table, args.G, args.q, _config(args, seed))
    except DegenerateComponentError as err:
        print(f"error: degenerate fit: {err}", file=sys.stderr)
        return EXIT_DEGENERATE
    except MixtureError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DEGENERATE
    try:
        paths = dio.write_fit(result, table, args.out)
    except OSError as err:
        print(f"error: cannot write artifacts: {err}", file=sys.stderr)
        return EXIT_IO
    print(f"{args.algorithm} fit G={args.G} q={args.q}: "
          f"loglik={result.final_loglik:.6f} bic={result.bic:.6f} "
          f"iterations={result.iterations} converged={result.converged}")
    for name, path in paths.items():
        print(f"  {name}: {path}")
    if not result.converged:
        print("warning: iteration budget reached before the tolerance",
              file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_search(args) -> int:
    seed = _resolve_seed(args, required=False)
    table = _read_table(args)
    if args.G_min < 1 or args.G_min > args.G_max \
            or args.q_min < 0 or args.q_min > args.q_max:
        print("error: empty or inverted model ranges", file=sys.stderr)
        return EXIT_INVALID
    g_range = list(range(args.G_min, args.G_max + 1))
    q_range = list(range(args.q_min, args.q_max + 1))
    search = model_search(table, g_range, q_range, _config(args, seed),
                          algorithm=args.algorithm)
    try:
        paths = dio.write_search(search, args.out)
        if search.selected is not None:
            best_dir = os.path.join(args.out, "best_fit")
            paths.update(dio.write_fit(search.best_fit, table, best_dir))
    except OSError as err:
        print(f"error: cannot write artifacts: {err}", file=sys.stderr)
        return EXIT_IO
    n_failed = sum(1 for c in search.cells if not c.ok)
    if search.selected is None:
        print("error: every model-grid cell failed", file=sys.stderr)
        for cell in search.cells:
            print(f"  G={cell.G} q={cell.q}: {cell.error}", file=sys.stderr)
        return EXIT_ALL_FAILED
    G, q = search.selected
    print(f"selected G={G} q={q} by rule '{search.rule}' "
          f"({len(search.cells) - n_failed} cells fitted, {n_failed} failed)")
    for name, path in paths.items():
        print(f"  {name}: {path}")
    return EXIT_OK


def cmd_compare(args) -> int:
    seed = _resolve_seed(args, required=True)
    table = _read_table(args)
    if args.G >= table.n or not 0 <= args.q < table.p:
        print("error: invalid model size for these data", file=sys.stderr)
        return EXIT_INVALID
    config = _config(args, seed)
    # one shared soft initialization feeds both drivers (the rest of the
    # start is already identical because both consume the same seed stream)
    init_rng = np.random.default_rng([seed, 0])
    init_resp = init_rng.dirichlet(np.ones(args.G), size=table.n)
    try:
        result_em = fit_em(table, args.G, args.q, config, init_resp=init_resp)
        result_pem = fit_pem(table, args.G, args.q, config, init_resp=init_resp)
    except DegenerateComponentError as err:
        print(f"error: degenerate fit: {err}", file=sys.stderr)
        return EXIT_DEGENERATE
    except MixtureError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DEGENERATE
    try:
        paths = dio.write_compare(result_em, result_pem, args.out)
    except OSError as err:
        print(f"error: cannot write artifacts: {err}", file=sys.stderr)
        return EXIT_IO
    gap = abs(result_em.final_loglik - result_pem.final_loglik)
    rel = gap / max(abs(result_em.final_loglik), 1e-300)
    print(f"loglik em={result_em.final_loglik:.6f} "
          f"pem={result_pem.final_loglik:.6f} gap={gap:.3e} rel={rel:.3e}")
    print(f"iterations em={result_em.iterations} pem={result_pem.iterations}")
    print(f"inversions em={result_em.counters} pem={result_pem.counters}")
    for name, path in paths.items():
        print(f"  {name}: {path}")
    if not (result_em.converged and result_pem.converged):
        print("warning: iteration budget reached before the tolerance",
              file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_generate(args) -> int:
    seed = _resolve_seed(args, required=True)
    try:
        spec = dio.SyntheticSpec.random(
            n=args.n, p=args.p, G=args.G, q=args.q,
            observed_per_row=args.k, seed=seed, separation=args.separation)
    except ValueError as err:
        print(f"error: invalid generator settings: {err}", file=sys.stderr)
        return EXIT_INVALID
    table, truth = dio.generate_bib(spec)
    try:
        os.makedirs(args.out, exist_ok=True)
        table_path = os.path.join(args.out, "table.csv")
        truth_path = os.path.join(args.out, "truth.json")
        dio.write_table(table, table_path)
        dio.write_truth(truth, truth_path)
    except OSError as err:
        print(f"error: cannot write artifacts: {err}", file=sys.stderr)
        return EXIT_IO
    balance = "balanced" if truth["balanced"] else "unbalanced (random subsets)"
    print(f"generated n={args.n} p={args.p} k={args.k} G={args.G} q={args.q} "
          f"seed={seed} [{balance}]")
    print(f"  table: {table_path}")
    print(f"  truth: {truth_path}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {
        "fit": cmd_fit,
        "search": cmd_search,
        "compare": cmd_compare,
        "generate": cmd_generate,
    }[args.command]
    try:
        return handler(args)
    except _CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code


if __name__ == "__main__":
    sys.exit(main())
