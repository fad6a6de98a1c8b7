"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 data error.
The catalog directory defaults to ``$FACML_CATALOG``.  Every command echoes
its resolved configuration to stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import FacmlError

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3


class _UsageError(Exception):
    pass


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _pair(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected COLUMN=TABLE, got {text!r}")
    a, b = text.split("=", 1)
    return a.strip(), b.strip()


def _catalog(args):
    from .relstore import Catalog

    if not args.catalog:
        raise _UsageError("no catalog: pass --catalog or set FACML_CATALOG")
    return Catalog(args.catalog)


def _join(args, catalog):
    spec = catalog.join(args.join)
    if getattr(args, "block_pages", None):
        spec = spec.with_block(args.block_pages)
    return spec


def _emit(obj, out=None):
    text = json.dumps(obj, indent=2, default=float)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args):
    from .datagen import SynthSpec, gen_binary, gen_multiway

    if args.spec:
        try:
            with open(args.spec) as fh:
                synth = SynthSpec.from_dict(json.load(fh))
        except (OSError, ValueError) as exc:
            raise FacmlError(f"{args.spec}: {exc}") from None
    else:
        d_r = args.d_r[0] if len(args.d_r) == 1 and not args.n_r_list else args.d_r
        n_r = args.n_r_list if args.n_r_list else args.n_r
        synth = SynthSpec(n_S=args.n_s, n_R=n_r, d_S=args.d_s, d_R=d_r, K_true=args.k_true,
                          noise_sigma=args.noise, seed=args.seed, with_target=args.with_target)
    catalog = _catalog(args)
    gen = gen_binary if synth.q == 1 else gen_multiway
    s, tables, _ = gen(synth, catalog, page_size_rows=args.page_rows,
                       block_size_pages=args.block_pages, join_name=args.join)
    tables = tables if isinstance(tables, list) else [tables]
    _emit({"spec": synth.to_dict(), "join": args.join,
           "relations": {h.name: h.n_rows for h in [s, *tables]}})
    return EXIT_OK


def cmd_import(args):
    from .datagen import import_csv
    from .relstore import JoinSpec, Schema

    fks = dict(args.fk or [])
    schema = Schema.build(args.key, [f for f in args.features.split(",") if f], fks,
                          args.target)
    catalog = _catalog(args)
    h = import_csv(args.path, schema, catalog, args.name, delimiter=args.delimiter,
                   one_hot=args.one_hot or (), page_size_rows=args.page_rows,
                   header=not args.no_header)
    out = {"relation": h.name, "n_rows": h.n_rows, "n_features": h.schema.n_features}
    if args.make_join:
        if not fks:
            raise _UsageError("--make-join needs at least one --fk COLUMN=TABLE")
        spec = JoinSpec(h.name, tuple(fks.values()), fks, args.block_pages)
        catalog.check_join(spec)
        catalog.add_join(args.make_join, spec)
        out["join"] = args.make_join
    _emit(out)
    return EXIT_OK


def cmd_materialize(args):
    from .counters import OpCounter
    from .relstore import materialize_join

    catalog = _catalog(args)
    spec = _join(args, catalog)
    if args.name in catalog:
        catalog.drop(args.name)
    counter = OpCounter()
    with counter.timed("materialize"):
        h = materialize_join(spec, catalog, args.name, counter)
    _emit({"relation": h.name, "n_rows": h.n_rows, "pages_written": counter.get("pages_written"),
           "seconds": counter.seconds("materialize")})
    return EXIT_OK


def _gmm_config(args):
    from .gmm import GmmConfig

    return GmmConfig(K=args.k, tol=args.tol, max_iters=args.max_iters, seed=args.seed,
                     sigma_mode=args.sigma_mode)


def _nn_config(args):
    from .nn import NnConfig

    return NnConfig(epochs=args.epochs, hidden=tuple(args.hidden), lr=args.lr,
                    batch_mode=args.batch_mode, seed=args.seed, activation=args.activation,
                    batch_groups=args.batch_groups)


def _train(args, model):
    from .bench import run_strategy

    catalog = _catalog(args)
    spec = _join(args, catalog)
    config = _gmm_config(args) if model == "gmm" else _nn_config(args)
    params, trace, record = run_strategy(model, args.strategy, catalog, spec, config,
                                         rematerialize=False)
    trace.meta["run_config"] = _run_config(args)
    trace.meta["seconds"] = record.seconds
    trace.meta["materialize_seconds"] = record.materialize_seconds
    if args.trace_out:
        trace.write_json(args.trace_out)
    if args.params_out:
        _emit(params.to_dict(), args.params_out)
    _emit({"strategy": record.strategy, "seconds": record.seconds, "steps": record.steps,
           "final": record.final, "counts": record.counts})
    return EXIT_OK


def cmd_train_gmm(args):
    return _train(args, "gmm")


def cmd_train_nn(args):
    return _train(args, "nn")


def cmd_verify(args):
    from .verify import FaultInjector, verify_gmm, verify_nn, write_report

    catalog = _catalog(args)
    spec = _join(args, catalog)
    fault = FaultInjector(args.inject_fault) if args.inject_fault else None
    if args.model == "gmm":
        report = verify_gmm(catalog, spec, _gmm_config(args), args.tol_rel, fault)
    else:
        report = verify_nn(catalog, spec, _nn_config(args), args.tol_rel, args.grad_tol, fault)
    report["run_config"] = _run_config(args)
    write_report(report, args.report)
    print(json.dumps({"pass": report["pass"], "max_rel_diff": report["max_rel_diff"],
                      "report": args.report}))
    return EXIT_OK if report["pass"] else EXIT_VERIFY


def cmd_bench(args):
    from .bench import SweepSpec, run_sweep, summarize

    spec = SweepSpec.from_json(args.sweep)
    rows = run_sweep(spec, args.out, args.workdir)
    summary = summarize(rows)
    _emit({"rows": len(rows), "failed": sum(1 for r in rows if r["error"]), "out": args.out,
           "median_seconds": {f"{v}/{s}": m["median_seconds"] for (v, s), m in summary.items()},
           "cold_seconds": {f"{v}/{s}": m["cold_seconds"] for (v, s), m in summary.items()}})
    return EXIT_OK


def cmd_cost(args):
    from .bench import CostModelInputs, io_cost_model, saving_rate

    if args.from_catalog:
        catalog = _catalog(args)
        spec = catalog.join(args.join)
        if spec.q != 1:
            raise _UsageError("cost --from-catalog supports binary joins only")
        s = catalog.open(spec.s)
        r = catalog.open(spec.attribute_tables[0])
        inp = CostModelInputs.from_relations(s, r, args.block_size or spec.block_size_pages,
                                             args.iters, tau_s=args.tau_s, tau_m=args.tau_m)
    else:
        need = ("s_pages", "r_pages", "t_pages", "block_size")
        missing = [n for n in need if getattr(args, n) is None]
        if missing:
            raise _UsageError("cost needs --" + ", --".join(m.replace("_", "-") for m in missing)
                              + " (or --from-catalog)")
        inp = CostModelInputs(args.s_pages, args.r_pages, args.t_pages, args.block_size,
                              args.iters, args.n_s, args.n_r, args.d_s, args.d_r,
                              args.tau_s, args.tau_m)
    model = io_cost_model(inp, ceil_blocks=args.ceil_blocks)
    model["cheaper"] = "S" if model["s_cost"] < model["m_cost"] else "M"
    rate = saving_rate(inp) if inp.n_S >= inp.n_R else None
    _emit({"inputs": inp.to_dict(), "io": model, "saving_rate": rate})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p, join=True):
    p.add_argument("--catalog", default=os.environ.get("FACML_CATALOG"),
                   help="catalog directory (default: $FACML_CATALOG)")
    if join:
        p.add_argument("--join", default="default", help="join name in the catalog")


def _gmm_args(p):
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--tol", type=float, default=1e-4, help="absolute log-likelihood tolerance")
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--sigma-mode", choices=("grouped", "paper"), default="grouped")


def _nn_args(p):
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--hidden", type=_ints, default=[50], help="comma-separated layer widths")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-mode", choices=("batch", "minibatch", "sgd"), default="batch")
    p.add_argument("--batch-groups", type=int, default=16,
                   help="R_1 keys per mini-batch step")
    p.add_argument("--activation", choices=("sigmoid", "tanh", "relu"), default="relu")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="facml", description="Train GMMs and MLPs over normalized relations.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen", help="generate a synthetic star schema")
    _common(p)
    p.add_argument("--spec", help="SynthSpec JSON file (overrides the flags below)")
    p.add_argument("--n-s", type=int, default=10_000)
    p.add_argument("--n-r", type=int, default=100)
    p.add_argument("--n-r-list", type=_ints, help="per-table row counts for multi-way joins")
    p.add_argument("--d-s", type=int, default=5)
    p.add_argument("--d-r", type=_ints, default=[15], help="R width, or comma list per table")
    p.add_argument("--k-true", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--with-target", action="store_true")
    p.add_argument("--page-rows", type=int, default=8192)
    p.add_argument("--block-pages", type=int, default=16)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("import", help="load a CSV file as a relation")
    _common(p, join=False)
    p.add_argument("path")
    p.add_argument("--name", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--features", default="", help="comma-separated feature columns")
    p.add_argument("--fk", type=_pair, action="append", help="COLUMN=TABLE, repeatable")
    p.add_argument("--target")
    p.add_argument("--one-hot", action="append", help="categorical column to expand")
    p.add_argument("--delimiter", default=",")
    p.add_argument("--no-header", action="store_true")
    p.add_argument("--page-rows", type=int, default=8192)
    p.add_argument("--make-join", metavar="NAME", help="register the relation as a join's S")
    p.add_argument("--block-pages", type=int, default=16)
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("materialize", help="write the joined relation T")
    _common(p)
    p.add_argument("--name", default="T")
    p.add_argument("--block-pages", type=int)
    p.set_defaults(func=cmd_materialize)

    for name, func, extra in (("train-gmm", cmd_train_gmm, _gmm_args),
                              ("train-nn", cmd_train_nn, _nn_args)):
        p = sub.add_parser(name, help=f"train a {name[6:].upper()} with one strategy")
        _common(p)
        p.add_argument("--strategy", choices=("m", "s", "f"), default="f")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--block-pages", type=int)
        p.add_argument("--trace-out", help="per-iteration trace JSON")
        p.add_argument("--params-out", help="final parameters JSON")
        extra(p)
        p.set_defaults(func=func)

    p = sub.add_parser("verify", help="check that M, S and F train identical models")
    _common(p)
    p.add_argument("--model", choices=("gmm", "nn"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--block-pages", type=int)
    p.add_argument("--tol-rel", type=float, default=1e-8)
    p.add_argument("--grad-tol", type=float, default=1e-10)
    p.add_argument("--inject-fault", type=float, default=0.0, metavar="AMOUNT",
                   help="perturb one F-side cache value by AMOUNT")
    p.add_argument("--report", default="verify_report.json")
    _gmm_args(p)
    _nn_args(p)
    p.set_defaults(func=cmd_verify, max_iters=20)

    p = sub.add_parser("bench", help="run a parameter sweep")
    p.add_argument("--sweep", required=True, help="SweepSpec JSON file")
    p.add_argument("--out", required=True, help="results CSV")
    p.add_argument("--workdir", help="keep generated catalogs here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("cost", help="evaluate the I/O cost model and saving rate")
    _common(p)
    p.add_argument("--from-catalog", action="store_true", help="take sizes from the join")
    for flag in ("s-pages", "r-pages", "t-pages", "block-size"):
        p.add_argument(f"--{flag}", type=float)
    p.add_argument("--iters", type=int, default=1)
    for flag, default in (("n-s", 1000), ("n-r", 1), ("d-s", 5), ("d-r", 15)):
        p.add_argument(f"--{flag}", type=int, default=default)
    p.add_argument("--tau-s", type=float, default=1.0)
    p.add_argument("--tau-m", type=float, default=1.0)
    p.add_argument("--ceil-blocks", action="store_true")
    p.set_defaults(func=cmd_cost)
    return parser


def _run_config(args):
    return {k: v for k, v in vars(args).items() if k != "func"}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    print(json.dumps({"command": args.command, **_run_config(args)}, default=str),
          file=sys.stderr)
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"facml {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FacmlError, OSError) as exc:
        print(f"facml {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
