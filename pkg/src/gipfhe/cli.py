"""Command line front end: ``python -m gipfhe {convert,plan,run,oracle,verify}``.

Exit codes: 0 success, 1 verification failure, 2 usage error,
3 model/tensor schema or I/O error, 4 level/layout/numeric error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys

import numpy as np

from . import graphrt
from .packing import LayoutError, TensorFormatError, pack, read_tensor, unpack, write_tensor
from .slotvm import HEContext, LevelExhaustedError

log = logging.getLogger("gipfhe")

EXIT_VERIFY = 1
EXIT_SCHEMA = 3
EXIT_NUMERIC = 4


def _pow2(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if v < 1 or v & (v - 1):
        raise argparse.ArgumentTypeError(f"{v} is not a power of two")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"{v} must be positive")
    return v


def _add_ctx_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--base-size", type=_pow2, default=None,
                   help="base packing size Hb (default: largest power of two with Hb**2 <= slots, capped at H)")
    p.add_argument("--slots", type=_pow2, default=2**15, help="ciphertext slot count S (default 32768)")
    p.add_argument("--max-level", type=_positive, default=20, help="level budget L_max (default 20)")


def _ctx(args) -> HEContext:
    return HEContext(slot_count=args.slots, max_level=args.max_level)


def _base_size(args, model: graphrt.ModelGraph) -> int:
    if args.base_size is not None:
        return args.base_size
    hb = 1 << (int(math.isqrt(args.slots)).bit_length() - 1)
    return min(hb, model.input_shape[1])


def cmd_convert(args) -> int:
    model = graphrt.load_model(args.model_in)
    converted, summary = graphrt.convert_model(model, args.preset, args.resize)
    graphrt.save_model(converted, args.model_out)
    for line in summary:
        print(line)
    print(f"{len(summary)} replacement(s) written to {args.model_out}")
    return 0


def cmd_plan(args) -> int:
    model = graphrt.load_model(args.model)
    entries = graphrt.plan(model, _ctx(args), _base_size(args, model))
    print(graphrt.plan_table(entries))
    return 0


def cmd_run(args) -> int:
    model = graphrt.load_model(args.model)
    x = read_tensor(args.input)
    ctx = _ctx(args)
    out, rep = graphrt.execute(model, pack(x, _base_size(args, model), ctx))
    write_tensor(args.output, unpack(out))
    text = graphrt.report(rep, args.report_format)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_oracle(args) -> int:
    model = graphrt.load_model(args.model)
    write_tensor(args.output, graphrt.oracle_forward(model, read_tensor(args.input)))
    return 0


def cmd_verify(args) -> int:
    model = graphrt.load_model(args.model)
    if args.trials == 0:
        log.warning("no trials requested; nothing verified")
        print("max_abs_err 0 over 0 trials")
        return 0
    rng = np.random.default_rng(args.seed)
    hb = _base_size(args, model)
    worst = 0.0
    for _ in range(args.trials):
        x = rng.uniform(-1.0, 1.0, model.input_shape)
        out, _ = graphrt.execute(model, pack(x, hb, _ctx(args)))
        worst = max(worst, float(np.max(np.abs(unpack(out) - graphrt.oracle_forward(model, x)))))
    ok = worst <= args.tol
    print(f"max_abs_err {worst:.3e} over {args.trials} trials (tol {args.tol:g}): {'PASS' if ok else 'FAIL'}")
    return 0 if ok else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gipfhe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="replace activations/max pools with FHE-friendly nodes")
    p.add_argument("model_in")
    p.add_argument("preset", choices=["relu", "silu"])
    p.add_argument("model_out")
    p.add_argument("--resize", type=_pow2, default=None, help="record a target input resolution")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("plan", help="print the packing/level plan without executing")
    p.add_argument("model")
    _add_ctx_flags(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="execute a converted model on packed data")
    p.add_argument("model")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    _add_ctx_flags(p)
    p.add_argument("--report", default=None, help="write the cost report here instead of stdout")
    p.add_argument("--report-format", choices=["text", "json"], default="text")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("oracle", help="run the plaintext reference pipeline")
    p.add_argument("model")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("verify", help="differential test against the plaintext oracle")
    p.add_argument("model")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-6)
    _add_ctx_flags(p)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (graphrt.ModelSchemaError, TensorFormatError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_SCHEMA
    except (LevelExhaustedError, LayoutError, graphrt.PlanDivergenceError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
