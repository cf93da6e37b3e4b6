"""Command-line entry point.

Exit status: 0 on success, 1 on numeric or data failures (the message comes
from the module that raised), 2 on usage errors such as unknown flags,
missing files or contradictory options.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import DEFAULT_SAMPLES, SAMPLES_KEY, synth_calibration, synth_samples
from .compressor import CompressionConfig, compress_layer, groups_from_weights, thread_count
from .container import read_container, write_container
from .costmodel import METHODS, cost, cost_curve, curve_csv
from .errors import DomainError, SkipCatError
from .linalg import DEFAULT_RRQR_F
from .manifest import layer_from_container, layer_to_container, read_manifest, write_manifest
from .runtime import (
    CORE,
    ToyLayer,
    collect_grams,
    compress_toy_layer,
    compressed_forward,
    cosine_similarity,
    dense_forward,
    make_toy_layer,
)
from .whitening import accumulate_gram

log = logging.getLogger("skipcat")

LOWRANK = ("naive", "cat", "skip", "skipcat")


class UsageError(Exception):
    pass


def _rate(text: str) -> float:
    value = float(text)
    if not 0.0 <= value < 1.0:
        raise argparse.ArgumentTypeError(f"rate must lie in [0, 1), got {text}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _existing(path: str | None, flag: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: no such file {path}")
    return p


def _grams_for(groups, calib: dict, heads: int | None, weights: dict):
    if heads is not None and all(n in weights for n in CORE):
        samples = calib.get(SAMPLES_KEY)
        if samples is None:
            raise DomainError(f"calibration container has no {SAMPLES_KEY!r} tensor")
        layer = ToyLayer({n: weights[n] for n in CORE}, heads)
        return collect_grams(layer, np.asarray(samples, dtype=np.float64))
    grams = {}
    for g in groups:
        X = calib.get(f"calibration/{g.name}")
        if X is None:
            X = calib.get(SAMPLES_KEY)
        if X is None or X.ndim != 2 or X.shape[0] != g.d_in:
            raise DomainError(
                f"no calibration samples with {g.d_in} rows for group {g.name!r}; "
                f"provide calibration/{g.name} or pass --heads to capture layer inputs"
            )
        grams[g.name] = accumulate_gram(np.asarray(X, dtype=np.float64))
    return grams


def cmd_compress(args) -> int:
    src = _existing(args.input, "--in")
    calib_path = _existing(args.whiten, "--whiten")
    if (args.rate is None) == (args.rank is None):
        raise UsageError("give exactly one of --rate and --rank")
    try:
        workers = thread_count()
    except DomainError as exc:
        raise UsageError(str(exc)) from exc
    weights = {n: np.asarray(w, dtype=np.float64) for n, w in read_container(src).items()}
    groups = groups_from_weights(weights)
    config = CompressionConfig(
        method=args.method,
        target_rate=args.rate,
        rank=args.rank,
        rrqr_f=args.rrqr_f,
        whitening=calib_path is not None,
        damping=args.damping,
        rank_multiple=args.rank_multiple,
    )
    grams = None
    if calib_path is not None:
        grams = _grams_for(groups, read_container(calib_path), args.heads, weights)
    layer = compress_layer(groups, config, grams, max_workers=workers)
    if args.heads is not None:
        layer.meta["n_heads"] = args.heads
    layer.meta["seed"] = args.seed
    tensors, manifest = layer_to_container(layer)
    write_container(args.out, tensors)
    write_manifest(args.manifest, manifest)
    rep = manifest["cost"]
    print(f"method={layer.method} rank={layer.rank}")
    print(f"achieved_rate={manifest['achieved_rate']:.6f}")
    print(f"params={rep['params']} dense_params={rep['dense_params']} bytes_fp16={rep['bytes_fp16']}")
    print(f"flops_per_token={rep['flops_per_token']} dense_flops_per_token={rep['dense_flops_per_token']}")
    for name in layer.fallbacks:
        for note in layer.groups[name].notes:
            print(f"fallback: {note}")
    return 0


def cmd_verify(args) -> int:
    orig = _existing(args.input, "--in")
    comp = _existing(args.compressed, "--compressed")
    man = _existing(args.manifest, "--manifest")
    weights = {n: np.asarray(w, dtype=np.float64) for n, w in read_container(orig).items()}
    layer = layer_from_container(read_container(comp), read_manifest(man))
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    failures = 0
    for g in layer.groups.values():
        residual = {m: r for b in g.blocks for m, r in zip(b.members, b.residual_fro)}
        X = rng.standard_normal((g.d_in, args.samples))
        outs = g.forward(X)
        for m, y_hat in outs.items():
            if m not in weights:
                raise DomainError(f"original container has no weight {m!r}")
            Y = weights[m] @ X
            for j in range(args.samples):
                ny = np.linalg.norm(Y[:, j])
                dev = np.linalg.norm(Y[:, j] - y_hat[:, j]) / ny
                budget = residual[m] * np.linalg.norm(X[:, j]) / ny
                worst = max(worst, dev)
                if dev > args.tol + budget:
                    failures += 1
    print(f"samples={args.samples} max_relative_deviation={worst:.3e} failures={failures}")
    if failures:
        print("verify: FAILED", file=sys.stderr)
        return 1
    print("verify: ok")
    return 0


def cmd_cost(args) -> int:
    if args.method != "dense" and args.rank is None:
        raise UsageError(f"--rank is required for method {args.method}")
    rep = cost(args.method, args.din, args.dout, args.concat, args.rank or 0)
    for key, value in rep.as_dict().items():
        print(f"{key}={value}")
    return 0


def cmd_curve(args) -> int:
    text = curve_csv(cost_curve(args.din, args.dout, args.concat, args.method, args.step))
    with open(args.out, "w", encoding="ascii", newline="") as fh:
        fh.write(text)
    print(f"wrote {text.count(chr(10)) - 1} rows to {args.out}")
    return 0


def cmd_demo_layer(args) -> int:
    layer = make_toy_layer(args.seed)
    config = CompressionConfig(
        args.method,
        target_rate=args.rate,
        rrqr_f=args.rrqr_f,
        whitening=args.whiten,
        rank_multiple=1,
    )
    calib = synth_samples(args.seed, layer.d_model, DEFAULT_SAMPLES) if args.whiten else None
    compressed = compress_toy_layer(layer, config, calib)
    x = synth_samples(args.seed + 1, layer.d_model, args.tokens)
    golden = dense_forward(layer, x)
    y64, _ = compressed_forward(compressed, x, "fp64")
    mode = "fp16" if args.fp16 else "fp32"
    y_lo, trace = compressed_forward(compressed, x, mode)
    finite = np.isfinite(y_lo).all()
    print(f"method={args.method} rank={compressed.rank} achieved_rate={compressed.achieved_rate:.4f}")
    print(f"fp64 cosine_vs_dense={cosine_similarity(golden, y64):.6f}")
    if finite:
        print(f"{mode} cosine_vs_dense={cosine_similarity(golden, y_lo):.6f}")
    print(trace.summary())
    for ev in trace.overflow_events:
        print(f"overflow site={ev.site} magnitude={ev.magnitude:.6g} count={ev.count}")
    for name in compressed.fallbacks:
        for note in compressed.groups[name].notes:
            print(f"fallback: {note}")
    return 0


def cmd_toy_weights(args) -> int:
    layer = make_toy_layer(args.seed)
    write_container(args.out, {n: layer.weights[n] for n in CORE})
    print(f"wrote toy layer weights (d_model={layer.d_model}, heads={layer.n_heads}) to {args.out}")
    return 0


def cmd_synth_calib(args) -> int:
    write_container(
        args.out,
        synth_calibration(args.seed, args.din, args.samples, args.outlier_fraction, args.outlier_gain),
    )
    print(f"wrote {args.samples} calibration samples (d_in={args.din}) to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skipcat", description="Low-rank weight compression toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compress", help="compress a layer's weight container")
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--manifest", required=True)
    c.add_argument("--method", choices=LOWRANK, required=True)
    c.add_argument("--rate", type=_rate)
    c.add_argument("--rank", type=_positive_int)
    c.add_argument("--whiten", metavar="CALIB")
    c.add_argument("--heads", type=_positive_int, help="head count, to capture per-group calibration inputs")
    c.add_argument("--damping", type=float)
    c.add_argument("--rrqr-f", type=float, default=DEFAULT_RRQR_F)
    c.add_argument("--rank-multiple", type=_positive_int, default=8)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_compress)

    v = sub.add_parser("verify", help="check compressed outputs against the dense weights")
    v.add_argument("--in", dest="input", required=True)
    v.add_argument("--compressed", required=True)
    v.add_argument("--manifest", required=True)
    v.add_argument("--samples", type=_positive_int, default=16)
    v.add_argument("--tol", type=float, default=1e-8)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)

    k = sub.add_parser("cost", help="print the cost report of one configuration")
    k.add_argument("--din", type=_positive_int, required=True)
    k.add_argument("--dout", type=_positive_int, required=True)
    k.add_argument("--concat", type=_positive_int, default=1)
    k.add_argument("--method", choices=METHODS, required=True)
    k.add_argument("--rank", type=_positive_int)
    k.set_defaults(func=cmd_cost)

    u = sub.add_parser("curve", help="write a cost-versus-rank CSV")
    u.add_argument("--din", type=_positive_int, required=True)
    u.add_argument("--dout", type=_positive_int, required=True)
    u.add_argument("--concat", type=_positive_int, default=1)
    u.add_argument("--method", choices=METHODS, required=True)
    u.add_argument("--step", type=_positive_int, default=1)
    u.add_argument("--out", required=True)
    u.set_defaults(func=cmd_curve)

    d = sub.add_parser("demo-layer", help="compress the toy layer and run a precision experiment")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--rate", type=_rate, default=0.2)
    d.add_argument("--method", choices=LOWRANK, default="skipcat")
    d.add_argument("--fp16", action="store_true")
    d.add_argument("--whiten", action="store_true")
    d.add_argument("--tokens", type=_positive_int, default=16)
    d.add_argument("--rrqr-f", type=float, default=DEFAULT_RRQR_F)
    d.set_defaults(func=cmd_demo_layer)

    t = sub.add_parser("toy-weights", help="write the seeded toy layer's weights")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_toy_weights)

    s = sub.add_parser("synth-calib", help="write a synthetic calibration container")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--din", type=_positive_int, required=True)
    s.add_argument("--samples", type=_positive_int, default=DEFAULT_SAMPLES)
    s.add_argument("--outlier-fraction", type=float, default=0.02)
    s.add_argument("--outlier-gain", type=float, default=100.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_calib)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"skipcat {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (SkipCatError, OSError) as exc:
        print(f"skipcat {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
