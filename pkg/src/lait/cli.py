"""``lait`` command-line entry point.

Exit codes: 0 success, 1 a verification check failed, 2 usage or input error.
Every output file is written atomically and accompanied by a
``<output>.manifest.json`` run manifest.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import __version__
from .bench import cartesian_workload, length_records, parse_set_spec, random_segments, run_workload
from .cache import RepCache
from .config import POS_SCHEMES, ModelConfig
from .cost import LengthRecord, cached_dataset_cost, dataset_cost, sweep
from .errors import ConfigError, FormatError, LaitError
from .io import JsonlError, atomic_write_bytes, atomic_write_text, read_jsonl
from .model import init_weights, load_weights
from .pipeline import TEMPLATES, classify, example_from_record, lait_encode, segment_lengths
from .train import SyntheticTaskSpec, TrainingDiverged, gen_synthetic, train
from .verify import run_suite

log = logging.getLogger("lait")

# flag dest -> ModelConfig field
_MODEL_FLAGS = {
    "layers": "n_layers", "p": "n_parallel", "d_model": "d_model", "heads": "n_heads",
    "d_ff": "d_ff", "vocab": "vocab_size", "pos": "pos_scheme", "rel_buckets": "rel_buckets",
}
_DEFAULTS = {
    "layers": 4, "p": 0, "d_model": 32, "heads": 2, "d_ff": 64, "vocab": 512, "pos": "relative-bucket",
    "rel_buckets": 32, "seed": 0, "precision": "f32", "cache_dir": None, "cache_budget_bytes": None,
    "workers": 1,
}
# per-command overrides of _DEFAULTS (applied before the config file and flags)
_COMMAND_DEFAULTS = {
    "bench": {"layers": 12, "p": 9, "d_model": 64, "heads": 4, "d_ff": 128, "vocab": 1000,
              "left": "17x16", "right": "100x31", "cache": False, "reps": 5},
    "train": {"layers": 4, "d_model": 32, "heads": 2, "d_ff": 64, "vocab": 50, "rel_buckets": 64,
              "task": "copy_vs_shuffle", "seq_len": 8, "task_vocab": 50, "n_train": 4096, "n_eval": 1024,
              "steps": 3000, "lr": 3e-3, "batch_size": 32, "eval_every": 250},
    "cost": {"layers": 12, "d_model": 768, "heads": 12, "d_ff": 3072, "vocab": 32128},
    "stats": {"layers": 12},
}


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser, model: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON file with flag values; explicit flags win")
    p.add_argument("--seed", type=int)
    p.add_argument("--output", type=Path)
    p.add_argument("-v", "--verbose", action="store_true")
    if model:
        g = p.add_argument_group("model")
        g.add_argument("--layers", type=int)
        g.add_argument("--p", type=int, help="number of parallel (per-segment) layers")
        g.add_argument("--d-model", type=int)
        g.add_argument("--heads", type=int)
        g.add_argument("--d-ff", type=int)
        g.add_argument("--vocab", type=int)
        g.add_argument("--pos", choices=POS_SCHEMES)
        g.add_argument("--rel-buckets", type=int)
        g.add_argument("--precision", choices=("f32", "f64"))
        g.add_argument("--cache-dir", type=Path)
        g.add_argument("--cache-budget-bytes", type=int)
        g.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lait", description="Layer-adjustable interaction encoder tools")
    parser.add_argument("--version", action="version", version=f"lait {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the structural invariant suite")
    _common(p, model=False)
    p.add_argument("--quick", action="store_true", default=None, help="small case counts (smoke run)")

    p = sub.add_parser("cost", help="analytic attention cost of a lengths file")
    _common(p)
    p.add_argument("--lengths", type=Path, required=True, help="lengths JSONL")
    p.add_argument("--sweep-p", action="store_true", default=None, help="one row per P in 0..L")

    p = sub.add_parser("bench", help="timed encode workloads with and without caching")
    bsub = p.add_subparsers(dest="workload", required=True)
    c = bsub.add_parser("cartesian", help="every pairing of two random segment sets")
    _common(c)
    c.add_argument("--left", help="COUNTxLENGTH (default 17x16)")
    c.add_argument("--right", help="COUNTxLENGTH (default 100x31)")
    c.add_argument("--cache", action="store_true", default=None, help="also run with a segment cache")
    c.add_argument("--reps", type=int, help="timed passes per mode (default 5)")
    r = bsub.add_parser("replay", help="replay a JSONL corpus through a byte-budgeted cache")
    _common(r)
    r.add_argument("--input", type=Path, required=True)
    r.add_argument("--reps", type=int, help="timed passes per mode (default 5)")

    p = sub.add_parser("train", help="train on a synthetic two-segment task")
    _common(p)
    p.add_argument("--task", choices=("copy_vs_shuffle", "shared_token"))
    p.add_argument("--seq-len", type=int)
    p.add_argument("--task-vocab", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-eval", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--eval-every", type=int)

    p = sub.add_parser("encode", help="encode a JSONL corpus, optionally through a cache")
    _common(p)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--weights", type=Path, help="LAITW weights file (default: seeded init)")

    p = sub.add_parser("stats", help="segment-length statistics of a JSONL corpus")
    _common(p)
    p.add_argument("--input", type=Path, required=True)
    return parser


def _resolve(args: argparse.Namespace) -> dict:
    """Defaults < command defaults < config file < explicit flags."""
    values = dict(_DEFAULTS)
    values.update(_COMMAND_DEFAULTS.get(args.command, {}))
    if args.config is not None:
        try:
            file_values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config file {args.config}: {e}") from None
        if not isinstance(file_values, dict):
            raise UsageError("config file must hold a JSON object")
        for k, v in file_values.items():
            values[k.replace("-", "_")] = v
    for k, v in vars(args).items():
        if v is not None and k not in ("config", "command", "workload", "func"):
            values[k] = v
    return values


def _model_config(values: dict) -> ModelConfig:
    heads = int(values["heads"])
    d_model = int(values["d_model"])
    if d_model % heads:
        raise ConfigError(f"--d-model {d_model} is not divisible by --heads {heads}")
    kw = {field: values[flag] for flag, field in _MODEL_FLAGS.items()}
    return ModelConfig(d_head=d_model // heads, **kw)


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    return v


def _manifest(command: str, values: dict, config: ModelConfig | None) -> dict:
    return {
        "command": command,
        "flags": {k: _jsonable(v) for k, v in sorted(values.items()) if k != "verbose"},
        "config": config.to_dict() if config else None,
        "config_digest": config.digest() if config else None,
        "seed": values.get("seed"),
        "tool_version": __version__,
    }


def _write_output(path: Path | None, text: str, manifest: dict) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    atomic_write_text(path, text)
    atomic_write_text(path.with_name(path.name + ".manifest.json"), json.dumps(manifest, indent=2) + "\n")


def _load_corpus(path: Path, config: ModelConfig):
    out = []
    for lineno, rec in read_jsonl(path):
        try:
            out.append(example_from_record(rec, config))
        except (KeyError, ValueError, TypeError) as e:
            msg = e.args[0] if isinstance(e, KeyError) and e.args else str(e)
            raise JsonlError(path, lineno, str(msg)) from None
    if not out:
        raise UsageError(f"{path} holds no examples")
    return out


def cmd_verify(args, values) -> int:
    checks = run_suite(seed=values["seed"], quick=values.get("quick", False))
    lines = [c.line() for c in checks]
    ok = all(c.passed for c in checks)
    lines.append(f"{'ALL PASS' if ok else 'FAILURES'}: {sum(c.passed for c in checks)}/{len(checks)}")
    text = "\n".join(lines) + "\n"
    _write_output(values.get("output"), text, _manifest("verify", values, None))
    if values.get("output") is not None:
        sys.stdout.write(text)
    return 0 if ok else 1


def _read_lengths(path: Path) -> list[LengthRecord]:
    records = []
    for lineno, obj in read_jsonl(path):
        try:
            records.append(LengthRecord.from_json(obj))
        except (KeyError, ValueError, TypeError) as e:
            raise JsonlError(path, lineno, f"bad lengths record: {e}") from None
    if not records:
        raise UsageError(f"{path} holds no records")
    return records


def cmd_cost(args, values) -> int:
    records = _read_lengths(values["lengths"])
    L = int(values["layers"])
    # the model flags only set the head geometry used for the FLOP column
    flop_cfg = _model_config({**values, "p": 0})
    if values.get("sweep_p"):
        rows = sweep(records, L, flop_cfg)
    else:
        P = int(values["p"])
        if not 0 <= P <= L:
            raise ConfigError(f"need 0 <= P <= L, got P={P}, L={L}")
        rows = [r for r in sweep(records, L, flop_cfg) if r["P"] == P]
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["P", "ops_total", "flops", "ratio_full", "ratio_cached"], lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    _write_output(values.get("output"), buf.getvalue(), _manifest("cost", values, flop_cfg))
    return 0


def _weights_for(values: dict, config: ModelConfig, labels=("0", "1")):
    if values.get("weights"):
        w = load_weights(values["weights"])
        if w.config.with_parallel(0) != config.with_parallel(0):
            log.info("using the architecture stored in %s", values["weights"])
        w = w.with_config(w.config.with_parallel(config.n_parallel))
    else:
        w = init_weights(config, seed=values["seed"], labels=labels)
    return w.astype(values["precision"])


def _make_cache_factory(values: dict):
    budget = values.get("cache_budget_bytes")
    cache_dir = values.get("cache_dir")
    return lambda: RepCache(budget_bytes=budget, cache_dir=cache_dir)


def cmd_bench(args, values) -> int:
    config = _model_config(values)
    weights = _weights_for(values, config)
    rng = np.random.default_rng(values["seed"])
    if args.workload == "cartesian":
        (nl, ll), (nr, lr) = parse_set_spec(values["left"]), parse_set_spec(values["right"])
        left = random_segments(rng, nl, ll, config.vocab_size)
        right = random_segments(rng, nr, lr, config.vocab_size)
        examples = cartesian_workload(left, right)
        use_cache = bool(values.get("cache"))
    else:
        examples = _load_corpus(values["input"], config)
        use_cache = True
    report = run_workload(examples, weights, reps=int(values["reps"]), use_cache=use_cache,
                          workers=int(values["workers"]), make_cache=_make_cache_factory(values))
    report["workload"] = args.workload
    text = json.dumps(report, indent=2) + "\n"
    _write_output(values.get("output"), text, _manifest(f"bench {args.workload}", values, config))
    if values.get("output") is not None:
        summary = {
            "cached_over_uncached_ops": report.get("measured_ops_ratio"),
            "analytic_ratio": report["analytic"]["cached_over_uncached"],
            "speedup": report.get("speedup"),
        }
        print(json.dumps(summary))
    checks = [report["uncached"]["ops_match"]]
    if use_cache:
        checks.append(report["cached"]["outputs_identical"])
        if args.workload == "cartesian" and values.get("cache_budget_bytes") is None and int(values["workers"]) == 1:
            checks.append(report["cached"]["ops_match"])
    return 0 if all(checks) else 1


def cmd_train(args, values) -> int:
    spec = SyntheticTaskSpec(values["task"], int(values["seq_len"]), int(values["task_vocab"]),
                             int(values["n_train"]), int(values["n_eval"]), int(values["seed"]))
    config = _model_config(values)
    rows = []

    def record(step, loss, acc):
        rows.append((step, loss, acc))

    try:
        result = train(spec, config, steps=int(values["steps"]), lr=float(values["lr"]), seed=int(values["seed"]),
                       batch_size=int(values["batch_size"]), eval_every=int(values["eval_every"]),
                       precision=values["precision"], data=gen_synthetic(spec), callback=record)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "eval_accuracy"])
    for step, loss, acc in rows:
        w.writerow([step, f"{loss:.6f}", "" if acc is None else f"{acc:.6f}"])
    manifest = _manifest("train", values, config)
    manifest["final_eval_accuracy"] = result.eval_accuracy
    out = values.get("output")
    _write_output(out, buf.getvalue(), manifest)
    if out is not None:
        result.weights.save(out.with_suffix(".laitw"))
        print(f"final eval accuracy {result.eval_accuracy:.4f}")
    return 0


def cmd_encode(args, values) -> int:
    config = _model_config(values)
    examples = _load_corpus(values["input"], config)
    labels = ("0", "1")
    task_ids = {ex.task_id for ex in examples}
    if len(task_ids) == 1 and TEMPLATES.get(next(iter(task_ids))) is not None:
        labels = TEMPLATES[next(iter(task_ids))].labels or labels
    weights = _weights_for(values, config, labels=labels)
    cache = None
    if config.n_parallel > 0 and (values.get("cache_dir") or values.get("cache_budget_bytes")):
        cache = _make_cache_factory(values)()
    arrays, preds = {}, []
    for i, ex in enumerate(examples):
        reps = lait_encode(ex, weights, cache=cache)
        arrays[f"example_{i:06d}"] = reps
        if weights.head is not None:
            label, logits = classify(reps, weights.head)
            preds.append({"index": i, "task": ex.task_id, "lengths": segment_lengths(ex), "prediction": label,
                          "logits": [float(x) for x in logits]})
    manifest = _manifest("encode", values, config)
    manifest["weights_fingerprint"] = f"{weights.fingerprint:016x}"
    if cache is not None:
        manifest["cache"] = cache.stats()
    out = values.get("output")
    text = "".join(json.dumps(p) + "\n" for p in preds)
    _write_output(out, text, manifest)
    if out is not None:
        buf = _io.BytesIO()
        np.savez(buf, **arrays)
        atomic_write_bytes(out.with_suffix(".npz"), buf.getvalue())
    return 0


def cmd_stats(args, values) -> int:
    config = _model_config(values)
    examples = _load_corpus(values["input"], config)
    by_task: dict[str, list[list[int]]] = defaultdict(list)
    for ex in examples:
        by_task[ex.task_id].append(segment_lengths(ex))
    summary = {}
    for task, rows in sorted(by_task.items()):
        n_seg = {len(r) for r in rows}
        entry = {"examples": len(rows), "segments": sorted(n_seg)}
        if len(n_seg) == 1:
            entry["mean_lengths"] = [round(float(x), 2) for x in np.mean(np.array(rows), axis=0)]
        summary[task] = entry
    records = length_records(examples)
    L = int(values["layers"])
    P = int(values["p"])
    summary["cost"] = {"layers": L, "p": P, "ratio_full": dataset_cost(records, L, P),
                       "ratio_cached": cached_dataset_cost(records, L, P)}
    print(json.dumps(summary, indent=2))
    out = values.get("output")
    if out is not None:
        text = "".join(json.dumps({"lengths": list(r.lengths), "mult": 1, "digests": list(r.segment_digests)}) + "\n"
                       for r in records)
        _write_output(out, text, _manifest("stats", values, config))
    return 0


COMMANDS = {
    "verify": cmd_verify, "cost": cmd_cost, "bench": cmd_bench,
    "train": cmd_train, "encode": cmd_encode, "stats": cmd_stats,
}


def run_cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        values = _resolve(args)
        return COMMANDS[args.command](args, values)
    except JsonlError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (UsageError, ConfigError, FormatError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except LaitError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
