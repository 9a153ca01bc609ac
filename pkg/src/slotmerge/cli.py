"""Command-line entry point: ``slotmerge <subcommand> ...``.

Exit codes (stable):

==  =====================================================
0   success
2   invalid input (scene spec, run config, data file)
3   threshold calibration failed (degenerate histograms)
4   schedule error (merging enabled without a threshold)
5   unreadable or mismatched checkpoint
6   gradient check failed
64  usage error (bad flags, K < 2, ...)
==  =====================================================
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import time

import numpy as np

from . import checks, merge, scenes
from . import threshold as th
from . import train as tr
from .config import ModelConfig
from .errors import (CalibrationError, ConfigError, DataError, FormatError, ScheduleError, SpecError,
                     UsageError)
from .slotattn import SlotState

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CALIBRATION = 3
EXIT_SCHEDULE = 4
EXIT_CHECKPOINT = 5
EXIT_CHECK = 6
EXIT_USAGE = 64

EXIT_CODES = {
    UsageError: EXIT_USAGE,
    SpecError: EXIT_INPUT,
    ConfigError: EXIT_INPUT,
    DataError: EXIT_INPUT,
    CalibrationError: EXIT_CALIBRATION,
    ScheduleError: EXIT_SCHEDULE,
    FormatError: EXIT_CHECKPOINT,
}

BENCH_HEADER = "# slotmerge bench-merge v1"


class _Exit(Exception):
    def __init__(self, code: int, message: str = ""):
        super().__init__(message)
        self.code = code


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 64 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise _Exit(EXIT_USAGE, f"{self.prog}: error: {message}")


def _emit(record: dict, out=None) -> None:
    print(json.dumps(record), file=out or sys.stdout)


def _load_data(path) -> scenes.Dataset:
    try:
        return scenes.load(path)
    except OSError as exc:
        raise DataError(f"cannot read data: {exc}") from None
    except FormatError as exc:
        raise DataError(str(exc)) from None


def _load_config(path) -> ModelConfig:
    try:
        return ModelConfig.load(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate_data(args) -> int:
    text = "{}"
    if args.spec is not None:
        try:
            with open(args.spec) as fh:
                text = fh.read()
        except OSError as exc:
            raise SpecError(f"cannot read spec: {exc}") from None
    spec = scenes.SceneSpec.from_json(text)
    if args.seed is not None:
        spec = scenes.SceneSpec(**{**spec.__dict__, "seed": args.seed})
    data = scenes.generate(spec, args.count)
    blob = scenes.dumps(data)
    with open(args.out, "wb") as fh:
        fh.write(blob)
    n_obj = [int(m.max()) for m in data.instances]
    _emit({"out": args.out, "count": len(data), "canvas": list(spec.canvas), "seed": spec.seed,
           "mean_objects": float(np.mean(n_obj)) if n_obj else 0.0,
           "sha256": hashlib.sha256(blob).hexdigest()})
    return EXIT_OK


def cmd_estimate_threshold(args) -> int:
    agg = args.agg.replace("-", "_")
    config = _load_config(args.config)
    if args.candidates is not None:
        try:
            values = [float(v) for v in args.candidates.split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"bad --candidates list {args.candidates!r}") from None
        estimate, n_samples = th.aggregate(values, agg), 0
    else:
        if args.data is None:
            raise UsageError("--data is required unless --candidates is given")
        data = _load_data(args.data)
        if args.checkpoint is not None:
            model, _, _ = tr.load_checkpoint(args.checkpoint, config)
        else:
            model = tr.SlotModel(config)
        model.config = config.replace(calib_batches=args.batches, calib_agg=agg)
        try:
            estimate, n_samples = tr.calibrate(model, data, seed=(config.seed, 1, config.merge_start_epoch))
        except CalibrationError as exc:
            print(f"estimate-threshold: {exc}", file=sys.stderr)
            return EXIT_CALIBRATION
    _emit(estimate.to_record(n_samples))
    if not args.no_write:
        config.replace(tau=estimate.tau).save(args.config)
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args.config)
    changes = {}
    if args.merge_mode is not None:
        changes["merge_mode"] = args.merge_mode
    if args.force_tau is not None:
        changes["force_tau"] = args.force_tau
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    if changes:
        config = config.replace(**changes)
        config.validate()
    data = _load_data(args.data)
    keep = tuple(int(v) for v in args.keep_epochs.split(",")) if args.keep_epochs else ()
    result = tr.train(config, data, args.out, seed=args.seed, resume=args.resume, keep_epochs=keep)
    _emit({"out": args.out, "epochs": len(result.epochs), "step": result.state.step, "tau": result.state.tau,
           "final_loss": result.final_loss})
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, state = tr.load_checkpoint(args.checkpoint)
    data = _load_data(args.data)
    tau = state.tau if args.tau is None else args.tau
    records, summary = tr.evaluate(model, data, tau, args.merge_at_inference, masks=args.masks)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        _emit({"type": "header", "format": tr.EVAL_FORMAT, "version": tr.LOG_VERSION}, out)
        for rec in records:
            _emit(rec, out)
        _emit(summary, out)
    finally:
        if out is not sys.stdout:
            out.close()
    if args.out:
        _emit(summary)
    return EXIT_OK


def random_instance(rng: np.random.Generator, N: int, K: int, d: int = 4) -> tuple[SlotState, np.ndarray]:
    """Slots and a row-stochastic attention matrix for benchmarking."""
    logits = rng.normal(0.0, 2.0, size=(N, K))
    A = np.exp(logits - logits.max(axis=1, keepdims=True))
    A /= A.sum(axis=1, keepdims=True)
    return SlotState(rng.normal(size=(K, d)), np.ones(K, dtype=bool)), A


def bench_merge(n: int, ks, merges: str = "full", policies=("naive", "incremental"), repeats: int = 1,
                seed: int = 0) -> list:
    """Operation counts and median wall time per (K, policy)."""
    if any(k < 2 for k in ks):
        raise UsageError("bench-merge needs K >= 2")
    if n < 1 or repeats < 1:
        raise UsageError("--n and --repeats must be positive")
    # tau = 0 merges down to one slot (softmax maps overlap everywhere); tau = 1 never merges
    cfg = merge.MergePolicyConfig(tau=0.0 if merges == "full" else 1.0)
    rows = []
    for K in ks:
        for policy in policies:
            evals = updates = 0
            times = []
            for r in range(repeats):
                S, A = random_instance(np.random.default_rng([seed, K, r]), n, K)
                t0 = time.perf_counter_ns()
                _, _, trace = merge.POLICIES[policy](S, A, cfg)
                times.append(time.perf_counter_ns() - t0)
                evals, updates = trace.pair_evals, trace.updates
            rows.append({"K": K, "policy": policy, "pair_evals": evals, "updates": updates,
                         "nanos": int(np.median(times))})
    return rows


def cmd_bench_merge(args) -> int:
    try:
        ks = [int(v) for v in args.k.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad --k list {args.k!r}") from None
    policies = ("naive", "incremental") if args.policy == "both" else (args.policy,)
    rows = bench_merge(args.n, ks, args.merges, policies, args.repeats, args.seed)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        out.write(f"{BENCH_HEADER} n={args.n} merges={args.merges} repeats={args.repeats}\n")
        writer = csv.DictWriter(out, fieldnames=["K", "policy", "pair_evals", "updates", "nanos"],
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config = checks.MICRO_CONFIG if args.config is None else _load_config(args.config)
    modes = ("detached",) if args.detach else ("attached", "detached")
    try:
        report = checks.micro_gradcheck(config, seed=args.seed, force_merge=args.force_merge, modes=modes)
    except CalibrationError as exc:
        print(f"gradcheck: {exc}", file=sys.stderr)
        return EXIT_CHECK
    record = report.to_record()
    if not all(math.isfinite(v) for v in report.worst.values()):
        record["passed"] = False
    _emit(record)
    return EXIT_OK if record["passed"] else EXIT_CHECK


# ---------------------------------------------------------------------------


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="slotmerge", description="Slot Attention with differentiable slot merging.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("generate-data", help="render a synthetic scene dataset")
    p.add_argument("--spec", help="scene spec JSON file (defaults if omitted)")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("estimate-threshold", help="calibrate the merge threshold")
    p.add_argument("--config", required=True, help="run config; tau is written back unless --no-write")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--batches", type=int, default=th.DEFAULT_BATCHES)
    p.add_argument("--agg", choices=("mean", "mean-minus-std"), default="mean")
    p.add_argument("--candidates", help="comma-separated per-batch thresholds to aggregate directly")
    p.add_argument("--no-write", action="store_true")
    p.set_defaults(func=cmd_estimate_threshold)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--merge-mode", choices=("off", "inference_only", "training"))
    p.add_argument("--force-tau", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume")
    p.add_argument("--keep-epochs", help="comma-separated epochs whose checkpoints are kept")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--merge-at-inference", action="store_true")
    p.add_argument("--masks", choices=("attention", "decoder"), default="decoder")
    p.add_argument("--tau", type=float, help="override the checkpoint threshold")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-merge", help="count merge-policy operations")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--k", default="8,16,32,64,128")
    p.add_argument("--merges", choices=("full", "none"), default="full")
    p.add_argument("--policy", choices=("naive", "incremental", "both"), default="both")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench_merge)

    p = sub.add_parser("gradcheck", help="finite-difference check of the micro-model")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force-merge", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--detach", action="store_true", help="only check the detached-merge variant")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _Exit as exc:
        if str(exc):
            print(str(exc), file=sys.stderr)
        return exc.code
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except tuple(EXIT_CODES) as exc:
        code = next(c for t, c in EXIT_CODES.items() if isinstance(exc, t))
        print(f"slotmerge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
