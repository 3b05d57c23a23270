"""Operator command suite.

Subcommands: synth, split, train, eval, grad-check, scan-check, bench.
Exit codes are a stable scripting contract: 0 success, 1 validation failure
(bad flags, malformed inputs, failed checks), 2 I/O error, 3 numerical
divergence. Config precedence: flags > JSON config file > built-in defaults.

The default training profile is the tiny one (32x32x16 volumes); pass a JSON
config to scale up. The bench pins BLAS to one thread and times only each
mechanism's mixing primitive - projections common to attention and the scan
are precomputed outside the clock.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import os
import statistics
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from . import metrics as M
from . import tensor as T
from . import train as TR
from . import volumes as V
from .errors import (CheckpointError, DivergenceError, GraphError,
                     NiftiFormatError, NumericsError, ShapeError,
                     ValidationError, VoxscanError)
from .model import Model, ModelConfig, tiny_config
from .ssm import SCAN_MODES, scan_arrays, scan_check

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_DIVERGENCE = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on usage errors; 2 means "I/O error" here,
    # so usage problems are rethrown as validation failures instead.
    def error(self, message):
        raise ValidationError(message)


def _dims(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ValidationError(f"expected D,H,W, got {text!r}")
    return tuple(int(p) for p in parts)


def _lengths(text: str) -> list[int]:
    values = [int(p) for p in text.split(",") if p]
    if not values or any(v < 1 for v in values):
        raise ValidationError(f"bad length ladder {text!r}")
    return values


def _resolved_manifest(path: str) -> V.DatasetManifest:
    manifest = V.load_manifest(path)
    base = os.path.dirname(os.path.abspath(path))
    entries = [
        dataclasses.replace(e, path=e.path if os.path.isabs(e.path)
                            else os.path.join(base, e.path))
        for e in manifest.entries
    ]
    return V.DatasetManifest(entries, seed=manifest.seed)


def _load_json_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValidationError("config file must hold a JSON object")
    unknown = set(doc) - {"model", "train"}
    if unknown:
        raise ValidationError(f"unknown config sections: {sorted(unknown)}")
    return doc


def _merge_configs(args) -> tuple[ModelConfig, TR.TrainConfig]:
    doc = _load_json_config(args.config)
    model_doc = tiny_config().to_dict()
    model_doc.update(doc.get("model", {}))
    train_doc = TR.TrainConfig().to_dict()
    train_doc.update(doc.get("train", {}))
    if args.seed is not None:
        model_doc["seed"] = args.seed
        train_doc["seed"] = args.seed
    if args.precision is not None:
        train_doc["precision"] = args.precision
    if args.epochs is not None:
        train_doc["epochs"] = args.epochs
    if args.batch_size is not None:
        train_doc["batch_size"] = args.batch_size
    if args.lr is not None:
        train_doc["learning_rate"] = args.lr
    model_doc["input_dims"] = [int(d) for d in model_doc["input_dims"]]
    return ModelConfig.from_dict(model_doc), TR.TrainConfig.from_dict(train_doc)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = V.SynthSpec(dims=args.dims, noise_sigma=args.noise,
                       base_radius=args.base_radius, intensity_bias=args.bias,
                       seed=args.seed if args.seed is not None else 0)
    spec.validate()
    os.makedirs(args.out, exist_ok=True)
    entries = []
    for label in V.ClassLabel:
        for i in range(args.count):
            seed_i = int(np.random.SeedSequence(
                [spec.seed, int(label), i]).generate_state(1, np.uint64)[0])
            vol = V.synth_generate(label, dataclasses.replace(spec, seed=seed_i))
            name = f"{label.name}_{i:04d}.nii"
            V.write_nifti_file(vol, os.path.join(args.out, name))
            entries.append(V.ManifestEntry(name, label, "all"))
    manifest_path = os.path.join(args.out, "manifest.tsv")
    V.save_manifest(V.DatasetManifest(entries), manifest_path)
    print(f"wrote {len(entries)} volumes and {manifest_path}")
    return EXIT_OK


def cmd_split(args) -> int:
    # Re-anchor entry paths so the output manifests resolve from --out.
    manifest = _resolved_manifest(args.manifest)
    out_abs = os.path.abspath(args.out)
    entries = [dataclasses.replace(e, path=os.path.relpath(e.path, out_abs))
               for e in manifest.entries]
    manifest = V.DatasetManifest(entries, seed=manifest.seed)
    train, test = V.stratified_split(manifest, args.fraction,
                                     args.seed if args.seed is not None else 0)
    os.makedirs(args.out, exist_ok=True)
    train_path = os.path.join(args.out, "train.tsv")
    test_path = os.path.join(args.out, "test.tsv")
    V.save_manifest(train, train_path)
    V.save_manifest(test, test_path)
    tc = train.class_counts()
    ec = test.class_counts()
    print(f"train {len(train.entries)} "
          f"({', '.join(f'{k.name} {v}' for k, v in tc.items())})")
    print(f"test  {len(test.entries)} "
          f"({', '.join(f'{k.name} {v}' for k, v in ec.items())})")
    return EXIT_OK


def cmd_train(args) -> int:
    model_cfg, train_cfg = _merge_configs(args)
    train_manifest = _resolved_manifest(args.train_manifest)
    eval_manifest = _resolved_manifest(args.eval_manifest)
    resume = None
    if args.resume:
        with open(args.resume, "rb") as fh:
            resume = TR.checkpoint_load(fh.read())
    os.makedirs(args.out, exist_ok=True)

    def log(s: TR.EpochStats) -> None:
        print(f"epoch {s.epoch}: train_loss {s.train_loss:.4f} "
              f"eval_loss {s.eval_loss:.4f} eval_acc {s.eval_accuracy:.4f}")

    ckpt, history = TR.train_loop(model_cfg, train_manifest, eval_manifest,
                                  train_cfg, resume=resume,
                                  scan_mode=args.scan_mode, log=log)
    ckpt_path = os.path.join(args.out, "checkpoint.bin")
    with open(ckpt_path, "wb") as fh:
        fh.write(TR.checkpoint_save(ckpt))
    with open(os.path.join(args.out, "history.csv"), "w", encoding="utf-8") as fh:
        fh.write(TR.history_csv(history))
    print(f"wrote {ckpt_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    with open(args.checkpoint, "rb") as fh:
        raw = fh.read()
    ckpt = TR.checkpoint_load(raw)
    model = Model(ckpt.model_config, np.float64)
    model.load_state(ckpt.state)
    manifest = _resolved_manifest(args.manifest)
    dataset = V.load_dataset(manifest, tuple(ckpt.model_config.input_dims))
    preds, truths = [], []
    with T.no_grad():
        for vol, label in dataset:
            logits = model.logits(vol, train=False, scan_mode=args.scan_mode)
            preds.append(V.ClassLabel(int(np.argmax(logits.data))))
            truths.append(label)
    dataset_id = args.dataset_id or os.path.splitext(os.path.basename(args.manifest))[0]
    stamp = args.timestamp or datetime.datetime.now(datetime.timezone.utc).isoformat()
    report = M.build_report(preds, truths, dataset_id,
                            checkpoint_id=TR.checkpoint_id(raw), timestamp=stamp)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.json"), "wb") as fh:
        fh.write(M.report_to_json(report))
    with open(os.path.join(args.out, "report.csv"), "wb") as fh:
        fh.write(M.report_to_csv(report))
    print(f"accuracy {report.metrics.accuracy:.4f} on {len(truths)} samples")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    trials = args.trials if args.trials else (20 if args.profile == "full" else 5)
    seed = args.seed if args.seed is not None else 0

    def run() -> int:
        results = T.grad_check_all(trials=trials, seed=seed)
        worst_width = max(len(r.op) for r in results)
        failed = False
        for r in results:
            status = "PASS" if r.passed else "FAIL"
            print(f"{r.op:<{worst_width}}  max_rel_err {r.max_rel_err:.3e}  {status}")
            failed |= not r.passed
        if args.profile == "full":
            mr = TR.model_grad_check(seed=seed)
            status = "PASS" if mr.passed else "FAIL"
            print(f"{'model (end-to-end)':<{worst_width}}  max_rel_err "
                  f"{mr.max_rel_err:.3e}  {status}")
            failed |= not mr.passed
        return EXIT_VALIDATION if failed else EXIT_OK

    if args.fault_op:
        with T.perturb_backward(args.fault_op, args.fault_factor):
            return run()
    return run()


def cmd_scan_check(args) -> int:
    result = scan_check(trials=args.trials, max_len=args.max_len,
                        max_state=args.max_state,
                        seed=args.seed if args.seed is not None else 0)
    print(f"mode equivalence: {result.trials} trials, max |seq - par| "
          f"{result.max_mode_err:.3e} (tol {result.mode_tol:.0e})")
    print(f"oracle equivalence: {result.oracle_trials} trials, max error "
          f"{result.max_oracle_err:.3e} (tol {result.oracle_tol:.0e})")
    if result.failures:
        for seed, L, ns in result.failures:
            print(f"FAIL seed={seed} L={L} N_s={ns}")
        return EXIT_VALIDATION
    print("all scan trials within tolerance")
    return EXIT_OK


# ---------------------------------------------------------------------------
# complexity benchmark
# ---------------------------------------------------------------------------

def _attention_mix(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    scores = q @ k.T / np.sqrt(q.shape[1])
    scores -= scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    return w @ v


def reference_attention(x: np.ndarray, wq: np.ndarray, wk: np.ndarray,
                        wv: np.ndarray) -> np.ndarray:
    """Single-head softmax(Q K^T / sqrt(E)) V with the full L x L matrix."""
    return _attention_mix(x @ wq, x @ wk, x @ wv)


def _scan_mix(x, delta, b, c, skip, a, mode: str) -> np.ndarray:
    a_bar = np.exp(delta[:, :, None] * a)
    u = (delta[:, :, None] * b[:, None, :]) * x[:, :, None]
    h = scan_arrays(a_bar, u, mode=mode)
    return (h * c[:, None, :]).sum(axis=-1) + skip * x


@dataclasses.dataclass(frozen=True)
class BenchRecord:
    mechanism: str
    length: int
    median_seconds: float
    model_dim: int


def run_bench(lengths: list[int], dim: int, state: int, reps: int,
              seed: int = 0) -> tuple[list[BenchRecord], dict[str, float]]:
    """Median mixing-primitive wall time per (mechanism, L), plus log-log slopes
    fitted over the upper half of the ladder. Single BLAS thread throughout."""
    if reps < 1:
        raise ValidationError("reps must be >= 1")
    if len(lengths) < 2:
        raise ValidationError("need at least two lengths to fit a slope")
    rng = np.random.default_rng(seed)
    records: list[BenchRecord] = []
    wq, wk, wv = (rng.standard_normal((dim, dim)) / np.sqrt(dim) for _ in range(3))
    w_delta = rng.standard_normal((dim, dim)) / np.sqrt(dim)
    w_b = rng.standard_normal((dim, state)) / np.sqrt(dim)
    w_c = rng.standard_normal((dim, state)) / np.sqrt(dim)
    skip = np.ones(dim)
    a = -(np.arange(state, dtype=np.float64) + 1.0)

    def timed(fn) -> float:
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return statistics.median(times)

    with threadpool_limits(limits=1):
        for L in sorted(lengths):
            x = rng.standard_normal((L, dim))
            q, k, v = x @ wq, x @ wk, x @ wv
            raw = x @ w_delta
            delta = np.log1p(np.exp(np.minimum(raw, 20.0)))
            b = x @ w_b
            c = x @ w_c
            records.append(BenchRecord("attention", L,
                                       timed(lambda: _attention_mix(q, k, v)), dim))
            for mode in SCAN_MODES:
                records.append(BenchRecord(
                    f"scan_{mode}", L,
                    timed(lambda m=mode: _scan_mix(x, delta, b, c, skip, a, m)), dim))

    slopes: dict[str, float] = {}
    for mech in ("attention", "scan_sequential", "scan_parallel"):
        pts = sorted((r.length, r.median_seconds) for r in records
                     if r.mechanism == mech)
        upper = pts[len(pts) // 2:]
        if len(upper) < 2:  # a two-length ladder fits over both points
            upper = pts
        xs = np.log([p[0] for p in upper])
        ys = np.log([max(p[1], 1e-9) for p in upper])
        slopes[mech] = float(np.polyfit(xs, ys, 1)[0])
    return records, slopes


def bench_csv(records: list[BenchRecord]) -> str:
    lines = ["mechanism,L,median_seconds"]
    for r in records:
        lines.append(f"{r.mechanism},{r.length},{r.median_seconds!r}")
    return "\n".join(lines) + "\n"


def cmd_bench(args) -> int:
    records, slopes = run_bench(args.lengths, args.dim, args.state, args.reps,
                                seed=args.seed if args.seed is not None else 0)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "bench.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(bench_csv(records))
    for mech, slope in slopes.items():
        print(f"{mech}: fitted log-log slope {slope:.3f}")
    print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voxscan",
                     description="Selective state-space volumetric classifier")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, default=None)
        if out_required:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="generate synthetic labeled volumes")
    common(p)
    p.add_argument("--count", type=int, default=10, help="volumes per class")
    p.add_argument("--dims", type=_dims, default=(32, 32, 16), help="D,H,W")
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--bias", type=float, default=0.0,
                   help="intensity shift (domain-shift knob)")
    p.add_argument("--base-radius", type=float, default=5.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="stratified train/test split of a manifest")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fraction", type=float, default=0.8)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model from manifests")
    common(p)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--eval-manifest", required=True)
    p.add_argument("--config", default=None, help="JSON with model/train sections")
    p.add_argument("--precision", choices=sorted(T.PRECISIONS), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--scan-mode", choices=SCAN_MODES, default="parallel")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--dataset-id", default=None)
    p.add_argument("--scan-mode", choices=SCAN_MODES, default="parallel")
    p.add_argument("--timestamp", default=None,
                   help="pin the report timestamp (for reproducible bytes)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="analytic vs finite-difference gradients")
    common(p, out_required=False)
    p.add_argument("--profile", choices=("quick", "full"), default="quick")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--fault-op", default=None,
                   help="deliberately corrupt this op's backward rule (self-test)")
    p.add_argument("--fault-factor", type=float, default=1.5)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("scan-check", help="randomized scan equivalence suite")
    common(p, out_required=False)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--max-len", type=int, default=512)
    p.add_argument("--max-state", type=int, default=16)
    p.set_defaults(func=cmd_scan_check)

    p = sub.add_parser("bench", help="attention-vs-scan complexity benchmark")
    common(p)
    p.add_argument("--lengths", type=_lengths, default=[256, 512, 1024, 2048, 4096])
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--state", type=int, default=16)
    p.add_argument("--reps", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (DivergenceError, NumericsError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ValidationError, ShapeError, NiftiFormatError, CheckpointError,
            GraphError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except VoxscanError as err:  # anything package-raised but unclassified
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
