"""Command line entry point: ``shapelink {papr,ber,bounds,table,channel}``."""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import BoundsError, gain_sweep
from .harness import (
    SYSTEMS,
    BoundsResult,
    ConfigError,
    ExperimentConfig,
    FrameError,
    emit_results,
    render_results,
    run_ber_sweep,
    run_papr_sweep,
)
from .precoder import format_table, label_header, pam
from .signal_model import ContinuousImpulseParams, load_channel, sample_continuous_channel
from .turbo_codec import TurboConfig, build_code

EXIT_USAGE = 2
EXIT_FRAME = 3


def parse_grid(text: str) -> tuple[float, ...]:
    """``"a:b:step"`` (inclusive) or a comma separated list."""
    text = text.strip()
    if ":" in text:
        parts = [float(v) for v in text.split(":")]
        if len(parts) != 3 or parts[2] == 0:
            raise argparse.ArgumentTypeError(f"bad grid {text!r}; expected start:stop:step")
        start, stop, step = parts
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return tuple(round(start + k * step, 10) for k in range(max(n, 0)))
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}") from exc


def _system_for(system: str | None, mode: str | None) -> str | None:
    """Apply ``--mode`` to the system, e.g. shaped8 + uniform -> uniform8_te."""
    if mode is None:
        return system
    Q = SYSTEMS[system or ExperimentConfig.system][0]
    for name, (q, _, m) in SYSTEMS.items():
        if q == Q and m == mode:
            return name
    raise ConfigError(f"no {mode} system with Q={Q}")


def _experiment(args) -> ExperimentConfig:
    base = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {
        "channel": args.channel,
        "system": _system_for(args.system or (base.system if args.mode else None), args.mode),
        "gamma_db": args.gamma_db,
        "tstnr_db": args.tstnr,
        "M": args.M,
        "iterations": args.iterations,
        "epsilon": args.epsilon,
        "seed": args.seed,
        "rate": args.rate,
        "frames": getattr(args, "frames", None),
        "sndr_grid_db": getattr(args, "sndr_grid", None),
        "min_bits": getattr(args, "min_bits", None),
        "papr_symbols": getattr(args, "symbols", None),
    }
    data = base.to_dict()
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(data)


def _write(result, args):
    if args.out:
        emit_results(result, args.out, args.format)
    else:
        sys.stdout.write(render_results(result, args.format or "csv"))


def cmd_papr(args) -> int:
    cfg = _experiment(args)
    res = run_papr_sweep(cfg)
    _write(res, args)
    print(f"{cfg.system}: PAPR {res.papr_db:.2f} dB over {res.symbols} samples, "
          f"{res.fallback_count} fallbacks", file=sys.stderr)
    return 0


def cmd_ber(args) -> int:
    cfg = _experiment(args)

    def report(p):
        print(f"SNDR {p.sndr_db:g} dB: BER {p.ber:.3e} ({p.bit_errors}/{p.bits}), "
              f"{p.frame_errors}/{p.frames} frame errors", file=sys.stderr)

    try:
        res = run_ber_sweep(cfg, progress=None if args.quiet else report)
    except FrameError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FRAME
    _write(res, args)
    return 0


def cmd_bounds(args) -> int:
    ch = load_channel(args.channel or "A")
    papr_uniform = args.papr_uniform
    if papr_uniform is None:
        ref = ExperimentConfig(channel=args.channel or "A", system="uniform4_te")
        papr_uniform = run_papr_sweep(ref).papr_db
    points = gain_sweep(ch, args.rate, args.tstnr, args.gamma_grid, papr_uniform)
    config = {
        "channel": args.channel or "A", "rate": args.rate, "tstnr_db": args.tstnr,
        "gamma_grid_db": list(args.gamma_grid), "papr_uniform_db": papr_uniform,
    }
    _write(BoundsResult(config, f"shapelink-{__version__}+bounds", [p.row() for p in points]), args)
    return 0


def cmd_table(args) -> int:
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        if args.interleaver:
            tc = TurboConfig(rate=args.code_rate, block_length=args.block_length,
                             interleaver_seed=args.interleaver_seed)
            code = build_code(tc)
            w.writerow(["index", "permuted"])
            for i, p in enumerate(code.interleaver):
                w.writerow([i, int(p)])
        else:
            c = pam(args.Q)
            w.writerow(["row"] + label_header(c))
            for row in format_table(c):
                w.writerow(row)
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_channel(args) -> int:
    if args.continuous:
        ch = sample_continuous_channel(args.symbol_rate, args.span, ContinuousImpulseParams(),
                                       peak=args.peak)
    else:
        ch = load_channel(args.channel or "A")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["index", "tap"])
    for i, h in enumerate(ch.taps):
        w.writerow([i, repr(float(h))])
    print(f"{ch.name}: L={ch.span}, energy={ch.energy:.6g}", file=sys.stderr)
    return 0


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="TOML key/value file; flags override its values")
    p.add_argument("--channel", help="A, B or a file with one tap per line")
    p.add_argument("--system", choices=sorted(SYSTEMS))
    p.add_argument("--mode", choices=["shaped", "uniform"])
    p.add_argument("--gamma-db", type=float, dest="gamma_db")
    p.add_argument("--tstnr", type=float)
    p.add_argument("--rate", type=float, help="bits/symbol (1.8 for every system)")
    p.add_argument("--M", type=int, help="M-BCJR survivors per step")
    p.add_argument("--iterations", type=int, help="equalizer/decoder exchanges")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output file (.csv or .json); stdout if omitted")
    p.add_argument("--format", choices=["csv", "json"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shapelink", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("papr", help="receive PAPR and CCDF of noiseless frames")
    _common(p)
    p.add_argument("--symbols", type=int, help="minimum number of samples")
    p.set_defaults(func=cmd_papr)

    p = sub.add_parser("ber", help="BER against SNDR with turbo equalization")
    _common(p)
    p.add_argument("--sndr-grid", type=parse_grid, dest="sndr_grid", help="start:stop:step or list (dB)")
    p.add_argument("--frames", type=int)
    p.add_argument("--min-bits", type=int, dest="min_bits")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_ber)

    p = sub.add_parser("bounds", help="theoretical shaping gains over a peak-level grid")
    p.add_argument("--channel")
    p.add_argument("--tstnr", type=float, default=40.0)
    p.add_argument("--rate", type=float, default=1.8)
    p.add_argument("--gamma-grid", type=parse_grid, dest="gamma_grid", default=parse_grid("-19:-3:1"))
    p.add_argument("--papr-uniform", type=float, dest="papr_uniform",
                   help="uniform 4-PAM receive PAPR (dB); measured if omitted")
    p.add_argument("--out")
    p.add_argument("--format", choices=["csv", "json"])
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("table", help="mapping table or interleaver permutation as CSV")
    p.add_argument("--Q", type=int, default=4)
    p.add_argument("--interleaver", action="store_true", help="export the turbo interleaver instead")
    p.add_argument("--code-rate", type=float, dest="code_rate", default=0.6)
    p.add_argument("--block-length", type=int, dest="block_length", default=4096)
    p.add_argument("--interleaver-seed", type=int, dest="interleaver_seed", default=2024)
    p.add_argument("--out")
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("channel", help="print channel taps as CSV")
    p.add_argument("--channel")
    p.add_argument("--continuous", action="store_true", help="sample the continuous impulse model")
    p.add_argument("--symbol-rate", type=float, dest="symbol_rate", default=112e9)
    p.add_argument("--span", type=int, default=30)
    p.add_argument("--peak", type=float)
    p.set_defaults(func=cmd_channel)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, BoundsError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
