"""Command-line entry point: ``asi <subcommand> [options]``.

Subcommands
    calibrate      measure the perplexity table, write it as CSV
    select-ranks   pick per-layer ranks under a memory budget
    train          run one training regime, write metrics and a checkpoint
    cost-report    per-layer FLOP and memory CSV, or a formula sweep
    verify         run the built-in oracle suites

Every configuration key is also a flag (``--batch-size 16``) and overrides
the ``--config`` file. Failures print one line to stderr::

    ERROR <CODE> [key=value ...]: <message>

and exit with the code's status (see ``EXIT_CODES``).
"""
import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields

from . import model as M
from .config import TrainConfig, load_config
from .cost import (
    LayerCost,
    LayerCostInputs,
    compression_ratio,
    cost_report,
    flops_asi_backward,
    flops_asi_overhead,
    flops_hosvd,
    flops_vanilla,
    speedup_ratio,
)
from .data import IdxFormatError, load_dataset
from .decomposition import hosvd_variance
from .layers import ConvSpec
from .selection import InfeasibleBudget, PerplexityTable, SelectionResult, select_ranks
from .training import BudgetExceeded, TrainingDiverged, calibrate, run_training
from .verify import SUITES, run_suites

EXIT_CODES = {
    "VERIFY_FAILED": 1,
    "USAGE": 2,
    "CONFIG": 2,
    "INVALID_INPUT": 2,
    "INFEASIBLE_BUDGET": 3,
    "DATA_FORMAT": 4,
    "IO": 4,
    "DIVERGED": 5,
    "BUDGET_EXCEEDED": 6,
}

SWEEP_COLUMNS = ["sweep", "B", "C", "C_out", "D", "H", "W", "r1", "r2", "r3", "r4",
                 "O_vanilla", "C_vanilla", "O_hosvd", "O_asi", "C_asi", "R_S", "R_C"]


class CliError(Exception):
    def __init__(self, code, message, **fields_):
        super().__init__(message)
        self.code = code
        self.fields = fields_


def _one_line(text):
    return " ".join(str(text).split())


def _fail(code, message, **kv):
    extra = "".join(f" {k}={v}" for k, v in kv.items())
    print(f"ERROR {code}{extra}: {_one_line(message)}", file=sys.stderr)
    return EXIT_CODES[code]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.exit(_fail("USAGE", f"{self.prog}: {message}"))


def _config_parent():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration (each flag overrides the config file)")
    g.add_argument("--config", metavar="FILE", help="key = value configuration file")
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        g.add_argument(flag, dest=f"cfg_{f.name}", metavar=f.name.upper(), default=None,
                       help=f"default: {f.default!r}")
    return p


def _load(args):
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    try:
        return load_config(args.config, overrides)
    except KeyError as exc:
        raise CliError("CONFIG", exc.args[0]) from None
    except ValueError as exc:
        raise CliError("CONFIG", str(exc)) from None


def _write_csv(path, header, rows):
    fh = open(path, "w", newline="") if path and path != "-" else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    finally:
        if fh is not sys.stdout:
            fh.close()


# subcommands

def cmd_calibrate(args):
    cfg = _load(args)
    table = calibrate(cfg)
    table.to_csv(args.out)
    for i, name in enumerate(table.layers):
        cells = " ".join(f"{e:g}:{p:.3g}/{m}" for e, p, m in zip(table.eps, table.p[i], table.mem[i]))
        print(f"{name} eps:perplexity/mem {cells}")
    print(f"wrote {args.out}")
    return 0


def cmd_select_ranks(args):
    cfg = _load(args)
    if cfg.budget is None:
        raise CliError("INVALID_INPUT", "select-ranks needs --budget")
    table = PerplexityTable.from_csv(args.table) if args.table else calibrate(cfg)
    res = select_ranks(table, cfg.budget)
    res.write(args.out)
    for name in res.layers:
        print(f"{name} ranks={','.join(map(str, res.ranks[name]))}")
    print(f"perplexity={res.perplexity:.6g} memory={res.memory} budget={res.budget}")
    print(f"wrote {args.out}")
    return 0


def cmd_train(args):
    cfg = _load(args)
    res = run_training(cfg, out_dir=args.out)
    last = res.metrics[-1] if res.metrics else None
    summary = {
        "regime": cfg.regime,
        "steps": res.bundle.step,
        "final": asdict(last) if last else None,
        "peak_stored_elements": res.peak_stored_elements,
        "peak_activation_bytes": 4 * res.peak_stored_elements,
        "dense_elements": res.dense_elements,
        "ranks": {k: list(v) for k, v in res.ranks.items()},
    }
    print(json.dumps(summary))
    return 0


def _layer_inputs(cfg):
    """Input shape of each fine-tuned conv layer for one training batch."""
    data = load_dataset(cfg.dataset)
    model = M.parse_model(cfg.model, data.in_channels, data.num_classes)
    params = M.init_params(model, cfg.seed)
    trainable = M.fine_tuned(model, cfg.layers)
    x = data.train_x[:cfg.batch_size]
    hosvd_ranks = {}

    def store(name, a):
        hosvd_ranks[name] = hosvd_variance(a, cfg.eps)[1]
        return a

    _, tape = M.forward(model, params, x, trainable, store)
    layers = [(l.name, tape.input_shapes[l.name], l.spec) for l in M.conv_layers(model)
              if l.name in trainable]
    return layers, hosvd_ranks, model, params, data


def cmd_cost_report(args):
    if args.sweep:
        _write_csv(args.out, SWEEP_COLUMNS, sweep_rows(args.sweep))
        return 0
    cfg = _load(args)
    layers, hosvd_ranks, model, params, data = _layer_inputs(cfg)
    if cfg.selection:
        asi_ranks = SelectionResult.read(cfg.selection).ranks
    elif cfg.budget is not None:
        asi_ranks = select_ranks(calibrate(cfg, model, params, data), cfg.budget).ranks
    else:
        asi_ranks = hosvd_ranks
    rows = []
    header = [f.name for f in fields(LayerCost)]
    for regime, ranks in (("vanilla", None), ("hosvd", hosvd_ranks), ("asi", asi_ranks)):
        rep = cost_report(layers, regime, ranks)
        for rec in rep.layers + [rep.totals()]:
            rows.append([getattr(rec, h) for h in header])
    _write_csv(args.out, header, rows)
    return 0


def sweep_rows(kind):
    """Formula sweep over spatial size (rank 1) or rank (fixed 128x32x16x16 input)."""
    spec = ConvSpec(32, 32, 3, 1, 1)
    if kind == "spatial":
        cases = [((128, 32, h, h), (1, 1, 1, 1)) for h in (8, 16, 32, 64)]
    elif kind == "rank":
        cases = [((128, 32, 16, 16), (r,) * 4) for r in (1, 2, 4, 8, 16)]
    else:
        raise CliError("INVALID_INPUT", f"unknown sweep {kind!r}; use rank or spatial")
    rows = []
    for shape, r in cases:
        inp = LayerCostInputs(shape, spec, r)
        fwd, bwd = flops_vanilla(inp)
        rows.append([kind, *shape[:2], spec.out_channels, spec.kernel, *shape[2:], *r,
                     fwd, bwd, flops_hosvd(shape), flops_asi_overhead(shape, r),
                     flops_asi_backward(inp), speedup_ratio(inp), compression_ratio(shape, r)])
    return rows


def cmd_verify(args):
    results = run_suites(args.suite or None)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"summary: {len(results) - len(failed)}/{len(results)} suites passed"
          + (f"; failed: {', '.join(failed)}" if failed else ""))
    if failed:
        raise CliError("VERIFY_FAILED", f"{len(failed)} suite(s) failed", suites=",".join(failed))
    return 0


def build_parser():
    parser = _Parser(prog="asi", description="Activation-compressed training harness.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    cfg = _config_parent()

    p = sub.add_parser("calibrate", parents=[cfg], help="write the perplexity table")
    p.add_argument("--out", default="perplexity.csv", help="CSV path (default perplexity.csv)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("select-ranks", parents=[cfg], help="budgeted rank selection")
    p.add_argument("--table", help="perplexity CSV; calibrates from the config when omitted")
    p.add_argument("--out", default="selection.txt", help="selection file (default selection.txt)")
    p.set_defaults(func=cmd_select_ranks)

    p = sub.add_parser("train", parents=[cfg], help="train one regime")
    p.add_argument("--out", default="run", help="output directory (default run)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cost-report", parents=[cfg], help="FLOP and memory accounting CSV")
    p.add_argument("--sweep", choices=("rank", "spatial"), help="formula sweep instead of a model")
    p.add_argument("--out", default="-", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_cost_report)

    p = sub.add_parser("verify", help="run the oracle suites")
    p.add_argument("--suite", action="append", choices=sorted(SUITES),
                   help="run only this suite (repeatable)")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        return _fail(exc.code, exc, **exc.fields)
    except InfeasibleBudget as exc:
        return _fail("INFEASIBLE_BUDGET", exc, min_budget=exc.minimal)
    except BudgetExceeded as exc:
        return _fail("BUDGET_EXCEEDED", exc)
    except TrainingDiverged as exc:
        return _fail("DIVERGED", exc)
    except IdxFormatError as exc:
        return _fail("DATA_FORMAT", exc)
    except OSError as exc:
        return _fail("IO", exc)
    except (ValueError, KeyError) as exc:
        return _fail("INVALID_INPUT", exc)


if __name__ == "__main__":
    sys.exit(main())
