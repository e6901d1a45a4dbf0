"""``jamba-kit`` command line.

Exit codes: 0 success, 1 contract violation (any JambaError or failed
check), 2 bad invocation.
"""

from __future__ import annotations

import argparse
import csv
import sys
from typing import Optional


from . import __version__
from .config import load_config, model_preset
from .errors import JambaError

EXIT_OK, EXIT_CONTRACT, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _contexts(text: str) -> list:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad context list {text!r}") from None
    if not values or any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("contexts must be non-negative integers")
    return values


def emit(rows: list, fmt: str, out=None) -> None:
    out = out or sys.stdout
    if not rows:
        return
    cols = list(rows[0])
    if fmt == "csv":
        writer = csv.DictWriter(out, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return
    cells = [[str(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    out.write("  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip() + "\n")
    for row in cells:
        out.write("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() + "\n")


def _model_config(args, default: str):
    if args.config:
        try:
            return load_config(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
    return model_preset(args.preset or default)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_memory(args) -> int:
    from .memory import memory_presets, total_state_report

    names = list(memory_presets()) if args.preset in (None, "all") else [args.preset]
    contexts = args.context or [262144]
    rows = []
    for name in names:
        for ctx in contexts:
            rows.append(total_state_report(name, ctx, args.baseline, args.bytes).row())
    emit(rows, args.format)
    return EXIT_OK


def cmd_audit_params(args) -> int:
    from .model import count_params, param_breakdown

    config = _model_config(args, "jamba-1.5-large")
    total, active = count_params(config)
    rows = [{"family": f, "params": n, "fraction": f"{n / total:.4f}"} for f, n in param_breakdown(config).items()]
    rows.append({"family": "TOTAL", "params": total, "fraction": "1.0000"})
    rows.append({"family": "ACTIVE", "params": active, "fraction": f"{active / total:.4f}"})
    emit(rows, args.format)
    return EXIT_OK


BUILD_LIMIT = 50_000_000  # parameters; larger configs are reported by counting only


def cmd_quant(args) -> int:
    from .model import count_params
    from .quant import quant_report
    from .training import quantized_agreement
    from .weights import save_weights

    config = _model_config(args, "toy")
    total, _ = count_params(config)
    if total > BUILD_LIMIT:
        report = quant_report(config)
        agreement = None
    else:
        agreement = quantized_agreement(config, args.seed, args.steps, args.train_steps)
        report = agreement["report"]
        if args.out:
            save_weights(agreement["model"], args.out)
    rows = [{"family": f, "params": n, "quantized": q, "fraction": f"{frac:.4f}"} for f, n, q, frac in report.rows()]
    rows.append({"family": "TOTAL", "params": report.total, "quantized": report.quantized_total,
                 "fraction": f"{report.quantized_fraction:.4f}"})
    emit(rows, args.format)
    print(f"moe_fraction={report.moe_fraction:.4f} moe_mlp_fraction={report.moe_mlp_fraction:.4f}")
    if agreement is not None:
        print(f"top1_agreement={agreement['agreement']:.4f} steps={agreement['steps']} "
              f"train_steps={agreement['train_steps']} "
              f"max_logit_diff={agreement['max_logit_diff']:.3e}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    config = _model_config(args, "toy")
    results = run_gradcheck(config, args.seed, args.n_params)
    rows = [{"param": r.name, "index": "/".join(map(str, r.index)), "analytic": f"{r.analytic:.6e}",
             "numeric": f"{r.numeric:.6e}", "rel_err": f"{r.rel_err:.2e}", "result": "pass" if r.passed else "FAIL"}
            for r in results]
    emit(rows, args.format)
    failed = sum(not r.passed for r in results)
    print(f"checked={len(results)} failed={failed}")
    return EXIT_CONTRACT if failed else EXIT_OK


def cmd_train_toy(args) -> int:
    from .training import run_toy_experiment

    config = _model_config(args, "toy-tiny")
    _, log = run_toy_experiment(config, alpha=args.alpha, steps=args.steps, seed=args.seed, csv_path=args.out)
    if not args.out:
        rows = [{"step": s, "task_loss": f"{t:.6f}", "activation_loss": f"{a:.6e}", "global_max_activation": f"{m:.4f}"}
                for s, t, a, m in log.rows()]
        emit(rows, args.format)
    else:
        print(f"wrote {len(log.step)} rows to {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import run_bench

    config = _model_config(args, "toy")
    contexts = args.context or [256, 1024, 4096]
    if any(c < 1 for c in contexts):
        raise UsageError("bench contexts must be >= 1")
    results = run_bench(config, contexts, args.decode_tokens, args.repeats, args.seed,
                        ablation=not args.no_ablation, threads=args.threads)
    rows = [vars(r) for r in results]
    if args.out:
        with open(args.out, "w", newline="") as fh:
            emit(rows, "csv", fh)
    emit(rows, args.format)
    return EXIT_OK


COMMANDS = {
    "bench": cmd_bench,
    "memory": cmd_memory,
    "audit-params": cmd_audit_params,
    "quant": cmd_quant,
    "gradcheck": cmd_gradcheck,
    "train-toy": cmd_train_toy,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON model config file")
    common.add_argument("--preset", help="model preset (memory: memory preset or 'all')")
    common.add_argument("--context", type=_contexts, help="context length(s), comma separated")
    common.add_argument("--bytes", type=int, default=2, help="bytes per cached element")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output path")
    common.add_argument("--format", choices=("csv", "table"), default="table")
    common.add_argument("--threads", type=int, default=1)

    parser = argparse.ArgumentParser(prog="jamba-kit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench", parents=[common], help="prefill/decode timing sweep")
    p.add_argument("--decode-tokens", type=int, default=512)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--no-ablation", action="store_true", help="skip the attention-only comparison model")

    p = sub.add_parser("memory", parents=[common], help="KV cache / SSM state calculator")
    p.add_argument("--baseline", default="llama-3.1-70b")

    sub.add_parser("audit-params", parents=[common], help="total / active parameter counts")

    p = sub.add_parser("quant", parents=[common], help="INT8 expert quantization report")
    p.add_argument("--steps", type=int, default=200, help="decode steps for the top-1 agreement check")
    p.add_argument("--train-steps", type=int, default=0, help="toy-task fit before quantizing (0 = random init)")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--n-params", type=int, default=20)

    p = sub.add_parser("train-toy", parents=[common], help="toy training run with the activation penalty")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--alpha", type=float, default=1e-3)
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"jamba-kit: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except JambaError as exc:
        print(f"jamba-kit: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
