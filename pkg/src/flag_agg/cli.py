"""``flag-agg`` command line: train, analyze, keydemo.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime protocol error.
Errors are printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import analysis
from .config import ConfigError, RunConfig
from .keys import direct_key_sum, run_key_sum
from .lwe import validate_params
from .protocol import FederatedRun, ProtocolConfig, write_metrics_csv
from .trainer import (
    DatasetError,
    DatasetPartition,
    Model,
    PartitionObjective,
    SgdConfig,
    SyntheticSpec,
    load_csv,
    make_synthetic,
    synthetic_test_set,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(code: int, kind: str, message: str, field: str | None = None) -> int:
    payload = {"error": kind, "message": message}
    if field is not None:
        payload["field"] = field
    print(json.dumps(payload), file=sys.stderr)
    return code


# --- train ------------------------------------------------------------------

def build_datasets(cfg: RunConfig, base_dir: str = "."):
    """Client partitions and an optional held-out set for ``cfg``."""
    ds = dict(cfg.dataset)
    source = ds.pop("source")
    data_seed = cfg.seeds.get("data", 0)
    if source == "synthetic":
        ds.setdefault("n_clients", cfg.N)
        spec = SyntheticSpec.from_dict(ds)
        return make_synthetic(spec, data_seed), synthetic_test_set(spec, data_seed), spec
    schema = ds["schema"]
    paths = [p if os.path.isabs(p) else os.path.join(base_dir, p) for p in ds["paths"]]
    if len(paths) == 1:
        whole = load_csv(paths[0], schema)
        chunks = np.array_split(np.arange(len(whole)), cfg.N)
        if any(len(c) == 0 for c in chunks):
            raise DatasetError(f"{paths[0]} has fewer rows than clients")
        parts = [DatasetPartition(whole.features[c], whole.labels[c], owner=i, indices=c)
                 for i, c in enumerate(chunks)]
    else:
        parts = [load_csv(p, schema, owner=i) for i, p in enumerate(paths)]
    test = None
    if ds.get("test_path"):
        tp = ds["test_path"]
        test = load_csv(tp if os.path.isabs(tp) else os.path.join(base_dir, tp), schema, owner=-1)
    return parts, test, None


def build_model(cfg: RunConfig, parts) -> Model:
    n_inputs = parts[0].features.shape[1]
    kind = cfg.model["kind"]
    n_classes = cfg.model.get("n_classes")
    if n_classes is None:
        n_classes = int(max(np.max(p.labels) for p in parts)) + 1 if kind == "mlp" else 2
    return Model(kind, n_inputs, tuple(cfg.model.get("hidden", [])), n_classes)


def build_run(cfg: RunConfig, base_dir: str = "."):
    parts, test, _ = build_datasets(cfg, base_dir)
    model = build_model(cfg, parts)
    sgd = SgdConfig(cfg.eta, cfg.momentum, cfg.weight_decay, cfg.batch_size)
    objectives = [PartitionObjective(model, p, sgd) for p in parts]
    theta0 = model.init_params(np.random.default_rng(cfg.seeds.get("model", 0)))
    proto = ProtocolConfig(
        params=cfg.lwe_params(),
        eta=cfg.eta,
        mode=cfg.mode,
        C0=cfg.C0,
        clip_rule=cfg.clip_rule,
        clip_scale=cfg.clip_scale,
        delta_overflow=cfg.delta_overflow,
        baseline_sigma_rule=cfg.baseline_sigma,
        matrix_seed=cfg.seeds["matrix"],
        rng_seed=cfg.seeds["rng"],
        dither_seed=cfg.seeds["dither"],
    )
    return FederatedRun(proto, objectives, sgd, theta0), model, parts, test


def summarize(cfg: RunConfig, run: FederatedRun, model: Model, parts, test) -> dict:
    history = run.history
    theta = run.theta
    summary = {
        "mode": cfg.mode,
        "rounds": len(history),
        "d": run.d,
        "num_buckets": run.layout.num_buckets,
        "final_loss": run.global_loss(),
        "final_grad_norm_sq": run.global_grad_norm_sq(),
        "total_upload_bytes": sum(m.upload_bytes for m in history) * run.N,
        "total_broadcast_bytes": sum(m.broadcast_bytes for m in history) * run.N,
        "total_key_bytes": sum(m.key_bytes for m in history),
        "overflow_total": sum(m.overflow_count for m in history),
        "upload_payload_bits_per_round": history[-1].upload_payload_bits if history else 0,
        "tau_measured": None,
        "tau_formula": analysis.comm_factor(cfg.b, cfg.m),
        "param_warnings": validate_params(cfg.lwe_params()),
    }
    if cfg.mode in ("flag", "lwe_baseline") and history:
        summary["tau_measured"] = history[-1].upload_payload_bits / (run.layout.padded * cfg.b)
    if model.kind != "linear":
        X = np.vstack([p.features for p in parts])
        y = np.concatenate([p.labels for p in parts])
        summary["train_accuracy"] = model.accuracy(theta, X, y)
        if test is not None:
            summary["test_accuracy"] = model.accuracy(theta, test.features, test.labels)
    return summary


def _resolve_out(cfg: RunConfig, override: str | None, config_dir: str) -> str:
    out = override or cfg.output_dir
    return out if os.path.isabs(out) or override else os.path.join(config_dir, out)


def cmd_train(args) -> int:
    try:
        cfg = RunConfig.load(args.config)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc.message, exc.field)
    config_dir = os.path.dirname(os.path.abspath(args.config))
    out_dir = _resolve_out(cfg, args.out, config_dir)
    try:
        run, model, parts, test = build_run(cfg, config_dir)
    except (DatasetError, ValueError) as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), "dataset")
    try:
        run.run(cfg.T)
    except (RuntimeError, ValueError, FloatingPointError) as exc:
        return _fail(EXIT_RUNTIME, "protocol", str(exc))

    os.makedirs(out_dir, exist_ok=True)
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), run.history)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(_jsonable(summarize(cfg, run, model, parts, test)), fh, indent=2, sort_keys=True)
        fh.write("\n")
    resolved = cfg.to_dict()
    resolved["output_dir"] = "."
    with open(os.path.join(out_dir, "resolved-config.json"), "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if not args.quiet:
        last = run.history[-1]
        print(f"{cfg.mode}: {cfg.T} rounds, final loss {last.loss:.6g}, wrote {out_dir}")
    return EXIT_OK


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


# --- analyze ----------------------------------------------------------------

def cmd_analyze(args) -> int:
    try:
        if args.what == "comm":
            if args.m is None and args.q is None:
                raise UsageError("analyze comm needs --m and/or --q")
            _positive(("b", args.b), ("m", args.m), ("q", args.q))
            result = analysis.comm_report(args.b, args.m, args.q)
        elif args.what == "overflow":
            _positive(("N", args.N), ("sigma", args.sigma), ("C", args.C))
            if not 0 < args.delta < 1:
                raise ValueError("delta must lie in (0, 1)")
            result = analysis.overflow_report(args.N, args.sigma, args.delta, C=args.C, mc_trials=args.mc,
                                              dim=args.dim, seed=args.seed)
        else:
            inputs = analysis.ConvergenceInputs(args.F0_gap, args.T, args.eta, args.sigma, args.B, args.N,
                                                args.d, args.C, args.b, args.nu)
            result = analysis.bound_report(inputs)
    except UsageError as exc:
        return _fail(EXIT_CONFIG, "usage", str(exc))
    except ValueError as exc:
        return _fail(EXIT_CONFIG, "domain", str(exc))
    print(json.dumps(_jsonable(result), indent=2, sort_keys=True))
    return EXIT_OK


def _positive(*pairs):
    for name, value in pairs:
        if value is not None and not value > 0:
            raise ValueError(f"{name} must be positive, got {value}")


# --- keydemo ----------------------------------------------------------------

def cmd_keydemo(args) -> int:
    if args.N < 2:
        return _fail(EXIT_CONFIG, "usage", "keydemo needs --N >= 2", "N")
    if args.n < 1 or args.q < 2:
        return _fail(EXIT_CONFIG, "usage", "need --n >= 1 and --q >= 2")
    rngs = [np.random.default_rng(np.random.SeedSequence([args.seed, i])) for i in range(args.N)]
    keys = [r.integers(0, args.q, size=args.n, dtype=np.int64) for r in rngs]
    transcript = run_key_sum(keys, rngs, args.q)
    expected = direct_key_sum(keys, args.q)
    show = args.n <= 16

    def fmt(v):
        return " ".join(str(int(x)) for x in (v if show else v[:8])) + ("" if show else " ...")

    print(f"key-sum agreement: N={args.N} n={args.n} q={args.q} seed={args.seed}")
    for share in transcript.shares:
        print(f"share {share.from_client}->{share.to_client}: {fmt(share.share)}")
    for j, partial in enumerate(transcript.partial_sums):
        print(f"partial {j}: {fmt(partial)}")
    print(f"s_sum: {fmt(transcript.s_sum)}")
    print(f"direct sum: {fmt(expected)}")
    ok = np.array_equal(transcript.s_sum, expected)
    print("VERIFIED" if ok else "MISMATCH")
    return EXIT_OK if ok else EXIT_RUNTIME


# --- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flag-agg", description="Lattice-encrypted federated gradient aggregation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    train = sub.add_parser("train", help="run a training experiment from a JSON config")
    train.add_argument("config")
    train.add_argument("--out", help="output directory (overrides output_dir)")
    train.add_argument("--quiet", action="store_true")
    train.set_defaults(func=cmd_train)

    analyze = sub.add_parser("analyze", help="evaluate overflow, communication or convergence formulas")
    asub = analyze.add_subparsers(dest="what", required=True, parser_class=_Parser)
    comm = asub.add_parser("comm")
    comm.add_argument("--b", type=int, required=True)
    comm.add_argument("--m", type=int)
    comm.add_argument("--q", type=int)
    over = asub.add_parser("overflow")
    over.add_argument("--N", type=int, required=True)
    over.add_argument("--sigma", type=float, required=True)
    over.add_argument("--delta", type=float, default=1e-6)
    over.add_argument("--C", type=float, help="evaluate at this C instead of the minimum")
    over.add_argument("--mc", type=int, default=0, metavar="TRIALS", help="Monte Carlo cross-check")
    over.add_argument("--dim", type=int)
    over.add_argument("--seed", type=int, default=0)
    bound = asub.add_parser("bound")
    for name, kind in (("F0-gap", float), ("T", int), ("eta", float), ("sigma", float), ("B", int),
                       ("N", int), ("d", int), ("C", float), ("b", int), ("nu", float)):
        bound.add_argument(f"--{name}", type=kind, required=True)
    for p in (comm, over, bound):
        p.set_defaults(func=cmd_analyze)

    key = sub.add_parser("keydemo", help="demonstrate key-sum agreement")
    key.add_argument("--N", type=int, default=3)
    key.add_argument("--n", type=int, default=8)
    key.add_argument("--q", type=int, default=65536)
    key.add_argument("--seed", type=int, default=0)
    key.set_defaults(func=cmd_keydemo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_CONFIG, "usage", str(exc))
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
