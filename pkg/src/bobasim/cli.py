"""Command-line entry point.

Subcommands: simulate (config-driven experiment), aggregate (one-shot rule on
a gradient file), verify (structural check suites), bench (timing table).

Exit codes: 0 success; 2 configuration or input-format error; 3 numeric
failure during simulation; 1 failed verification.
"""

from __future__ import annotations

import argparse
import csv
import os
import struct
import sys
import time

import numpy as np

from . import aggregation, fedsim, verification
from .aggregation import AggregationInput, BobaParams
from .fedsim import ConfigError
from .linalg import DegenerateSimplexError, InvalidInputError, InvalidRankError

MAGIC = b"BOBAGRD1"

EXIT_OK = 0
EXIT_VERIFY_FAIL = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class GradientFileError(ValueError):
    """Malformed gradient file."""


def write_gradient_file(path, gradients, server_gradients=None, num_classes=0,
                        text=False):
    """Serialize column-stacked gradients, clients first then server classes.

    Binary layout: magic, four little-endian uint32 (d, n, c, server_cols),
    then float64 little-endian column-major payload. text=True writes a CSV
    with the same column order instead.
    """
    g = np.ascontiguousarray(np.asarray(gradients, dtype=np.float64).T).T
    d, n = g.shape
    if server_gradients is not None:
        s = np.asarray(server_gradients, dtype=np.float64)
        if s.shape[0] != d:
            raise GradientFileError("server column length mismatch")
        server_cols = s.shape[1]
    else:
        s = np.zeros((d, 0))
        server_cols = 0
    if text:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["d", d, "n", n, "c", num_classes, "server_cols", server_cols])
            for row in np.column_stack([g, s]) if server_cols else g:
                writer.writerow([f"{x:.17g}" for x in row])
        return
    payload = np.column_stack([g, s]) if server_cols else g
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<4I", d, n, num_classes, server_cols))
        fh.write(np.asfortranarray(payload).astype("<f8").tobytes(order="F"))


def read_gradient_file(path):
    """Returns (gradients d x n, server d x c or None, num_classes)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise GradientFileError(f"bad magic bytes in {path}")
        header = fh.read(16)
        if len(header) != 16:
            raise GradientFileError("truncated header")
        d, n, c, server_cols = struct.unpack("<4I", header)
        raw = fh.read()
    expected = 8 * d * (n + server_cols)
    if len(raw) != expected:
        raise GradientFileError(
            f"payload length {len(raw)} != expected {expected}")
    payload = np.frombuffer(raw, dtype="<f8").reshape(d, n + server_cols, order="F")
    g = payload[:, :n].copy()
    s = payload[:, n:].copy() if server_cols else None
    return g, s, c


def _fail(code, message):
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_simulate(args) -> int:
    try:
        cfg = fedsim.parse_config(args.config)
    except (ConfigError, OSError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    seed = args.seed
    if seed is None:
        env = os.environ.get("BOBA_SIM_SEED")
        seed = int(env) if env is not None else None
    try:
        records, summary = fedsim.run_experiment(cfg, seed_override=seed)
    except (InvalidInputError, InvalidRankError, DegenerateSimplexError,
            FloatingPointError, np.linalg.LinAlgError) as exc:
        return _fail(EXIT_NUMERIC, f"numeric failure: {exc}")
    os.makedirs(args.out, exist_ok=True)
    used_seed = cfg.master_seed if seed is None else seed
    fedsim.write_rounds_csv(os.path.join(args.out, "rounds.csv"), records, cfg, used_seed)
    fedsim.write_summary(os.path.join(args.out, "summary.txt"), summary)
    fractions = records[-1].extras.get("pca_fractions")
    if fractions is not None:
        fedsim.write_pca_csv(os.path.join(args.out, "pca.csv"), fractions)
    if cfg.track_es:
        fedsim.write_loss_ratio_csv(os.path.join(args.out, "loss_ratio.csv"), records)
    print(f"wrote {len(records)} rounds to {args.out}")
    return EXIT_OK


def cmd_aggregate(args) -> int:
    try:
        g, server, c = read_gradient_file(args.file)
    except (GradientFileError, OSError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    f = args.f
    name = args.agr
    trimmed_loss = float("nan")
    try:
        if name == "average":
            agg, accepted = aggregation.average(g), g.shape[1]
        elif name == "coomed":
            agg, accepted = aggregation.coordinate_median(g), g.shape[1]
        elif name == "trmean":
            agg, accepted = aggregation.trimmed_mean(g, f), g.shape[1] - 2 * f
        elif name == "krum":
            res = aggregation.krum(g, f, multi=1)
            agg, accepted = res.aggregate, int(res.accepted.sum())
        elif name == "mkrum":
            res = aggregation.krum(g, f, multi=g.shape[1] - f)
            agg, accepted = res.aggregate, int(res.accepted.sum())
        elif name == "geomed":
            agg, accepted = aggregation.geometric_median(g), g.shape[1]
        elif name == "fltrust":
            if server is None:
                return _fail(EXIT_CONFIG, "fltrust needs server columns in the file")
            agg, accepted = aggregation.fltrust(g, server), g.shape[1]
        elif name in ("boba", "boba-es"):
            if server is None:
                return _fail(EXIT_CONFIG, "boba needs server columns in the file")
            inp = AggregationInput(g, server, f, c)
            mode = "alternating" if name == "boba" else "exhaustive"
            res = aggregation.boba_aggregate(inp, BobaParams(f, args.pmin), mode)
            agg, accepted = res.aggregate, int(res.accepted.sum())
            trimmed_loss = res.diagnostics["trimmed_loss"]
        else:
            return _fail(EXIT_CONFIG, f"unknown aggregator {name!r}")
    except (InvalidInputError, InvalidRankError, DegenerateSimplexError) as exc:
        return _fail(EXIT_NUMERIC, f"numeric failure: {exc}")
    fields = [name, f"{trimmed_loss:.17g}", str(accepted)]
    fields.extend(f"{x:.17g}" for x in agg)
    print(",".join(fields))
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verification.run_suite(args.suite)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY_FAIL


BENCH_RULES = ("average", "coomed", "krum", "geomed", "boba")


def _bench_once(name, g, server, c, f):
    start = time.perf_counter()
    k = ""
    if name == "average":
        aggregation.average(g)
    elif name == "coomed":
        aggregation.coordinate_median(g)
    elif name == "krum":
        aggregation.krum(g, f, multi=1)
    elif name == "geomed":
        aggregation.geometric_median(g)
    elif name == "boba":
        res = aggregation.boba_aggregate(AggregationInput(g, server, f, c), BobaParams(f))
        k = str(res.diagnostics["trsvd_calls"])
    return time.perf_counter() - start, k


def cmd_bench(args) -> int:
    try:
        n_list = [int(x) for x in args.n.split(",") if x]
        d_list = [int(x) for x in args.d.split(",") if x]
        if not n_list or not d_list:
            raise ValueError("empty list")
    except ValueError as exc:
        return _fail(EXIT_CONFIG, f"bad list argument: {exc}")
    c, f_frac = 10, 0.15
    rng = np.random.default_rng(0)
    writer = csv.writer(sys.stdout)
    writer.writerow(["agr", "n", "d", "seconds", "k"])
    for n in n_list:
        for d in d_list:
            f = max(1, int(f_frac * n))
            vertices = rng.normal(size=(d, c))
            p = rng.dirichlet(np.ones(c), size=n).T
            g = vertices @ p + rng.normal(scale=0.05, size=(d, n))
            server = vertices + rng.normal(scale=0.02, size=(d, c))
            for name in BENCH_RULES:
                _bench_once(name, g, server, c, f)  # warm-up
                samples = [_bench_once(name, g, server, c, f) for _ in range(5)]
                secs = sorted(s for s, _ in samples)[len(samples) // 2]
                writer.writerow([name, n, d, f"{secs:.6f}", samples[0][1]])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boba-sim",
        description="Robust federated aggregation workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run an experiment from a config file")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--threads", type=int, default=1,
                       help="worker cap; execution is serial so any value "
                            "reproduces --threads 1 output")
    p_sim.set_defaults(func=cmd_simulate)

    p_agg = sub.add_parser("aggregate", help="aggregate a gradient file once")
    p_agg.add_argument("--file", required=True)
    p_agg.add_argument("--agr", required=True)
    p_agg.add_argument("--f", type=int, required=True)
    p_agg.add_argument("--pmin", type=float, default=-0.5)
    p_agg.set_defaults(func=cmd_aggregate)

    p_ver = sub.add_parser("verify", help="run structural check suites")
    p_ver.add_argument("--suite", required=True, choices=verification.SUITE_NAMES)
    p_ver.set_defaults(func=cmd_verify)

    p_bench = sub.add_parser("bench", help="time aggregation rules")
    p_bench.add_argument("--n", required=True, help="comma-separated client counts")
    p_bench.add_argument("--d", required=True, help="comma-separated dimensions")
    p_bench.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
