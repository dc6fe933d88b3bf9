"""``rtlab`` command line: verification checks and copy-task experiments.

Exit codes: 0 pass, 1 check failure, 2 usage error. Every command writes a
``manifest.json`` into ``--out-dir`` (default ``runs/<timestamp>``).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from pathlib import Path

SCHEMA_VERSION = 1


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rtlab", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", type=Path, default=None,
                        help="output directory (default runs/<timestamp>)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("equivalence", parents=[common], help="tiled vs naive forward on random cases")
    p.add_argument("--n", type=int, default=64, help="maximum sequence length")
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--cases", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-10)

    p = sub.add_parser("schedule", parents=[common], help="tile schedule tools")
    p.add_argument("action", choices=["dump", "validate"])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--max-query-tile", type=int, default=None)

    p = sub.add_parser("io-report", parents=[common], help="counted traffic of naive vs tiled")
    p.add_argument("--n-list", type=_int_list, default=[2 ** k for k in range(7, 15)])
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--bytes-per-element", type=int, default=2)
    p.add_argument("--check", action="store_true", help="also run the asymptotics check")

    p = sub.add_parser("gradcheck", parents=[common], help="manual backward vs finite differences")
    p.add_argument("--arch", choices=["rt", "tf"], default="rt")
    p.add_argument("--n", type=int, default=6)
    p.add_argument("--d", type=int, default=6)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--instances", "--seeds", dest="instances", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-6)

    p = sub.add_parser("theory-check", parents=[common], help="executable constructions")
    p.add_argument("--which", choices=["simulate", "theorem1", "rnn", "all"], default="all")

    p = sub.add_parser("train-copy", parents=[common], help="train on the copy task")
    p.add_argument("--arch", choices=["rt", "tf"], default="rt")
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--vocab", type=int, default=16)
    p.add_argument("--prefix-len", type=int, default=16)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--tiled", action="store_true", help="use the tiled forward")
    p.add_argument("--scale-logits", action="store_true")
    p.add_argument("--out", default="metrics.csv", help="metrics CSV name inside --out-dir")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the copy task")
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--prefix-len", type=int, default=16)
    p.add_argument("--batches", type=int, default=8)
    return ap


# -- commands (each returns (passed, summary dict)) -------------------------------

def cmd_equivalence(args, out: Path):
    import numpy as np
    from .attention import BiasSpec
    from .layers import init_layer_params, rt_forward_naive
    from .tiling import rt_forward_tiled

    rng = np.random.default_rng(args.seed)
    worst, rows = 0.0, []
    for case in range(args.cases):
        n = int(rng.integers(1, args.n + 1))
        qk = bool(rng.integers(2))
        bias = BiasSpec("alibi") if rng.integers(2) else BiasSpec()
        p = init_layer_params(rng, args.d, args.heads, qk_norm=qk, bias=bias)
        x = rng.normal(size=(n, args.d))
        err = float(np.abs(rt_forward_tiled(p, x).z - rt_forward_naive(p, x).z).max())
        worst = max(worst, err)
        rows.append({"case": case, "n": n, "qk_norm": qk, "bias": bias.kind, "max_abs_error": err})
    passed = worst < args.tol
    _write_csv(out / "equivalence.csv", rows)
    print(f"equivalence: {args.cases} cases, max |z_tiled - z_naive| = {worst:.3e} "
          f"(tol {args.tol:g}) {'PASS' if passed else 'FAIL'}")
    return passed, {"max_abs_error": worst, "cases": args.cases, "tol": args.tol}


def cmd_schedule(args, out: Path):
    from .tiling import build_schedule, validate_schedule

    s = build_schedule(args.n, args.max_query_tile)
    rep = validate_schedule(s)
    summary = {"n": args.n, "events": len(s.events), "valid": rep.ok, "violation": rep.violation}
    if args.action == "dump":
        text = s.to_csv()
        (out / "schedule.csv").write_text(text)
        sys.stdout.write(text)
    else:
        print(f"schedule n={args.n}: {len(s.events)} events, "
              + ("valid" if rep.ok else f"INVALID: {rep.violation} at event {rep.event_index}, pair {rep.pair}"))
    return rep.ok, summary


def cmd_io_report(args, out: Path):
    from .io_model import asymptotics_check, count_naive, count_tiled

    rows = []
    for n in args.n_list:
        nv = count_naive(n, args.d, bytes_per_element=args.bytes_per_element)
        tl = count_tiled(n, args.d, bytes_per_element=args.bytes_per_element)
        rows.append({
            "n": n, "d": args.d, "bytes_per_element": args.bytes_per_element,
            "naive_kv_elements": nv.kv_elements_loaded, "tiled_kv_elements": tl.kv_elements_loaded,
            "naive_bytes": nv.bytes_moved, "tiled_bytes": tl.bytes_moved,
            "naive_flops": nv.flops, "tiled_flops": tl.flops,
            "naive_ai": nv.arithmetic_intensity, "tiled_ai": tl.arithmetic_intensity,
            "naive_ai_no_q": nv.arithmetic_intensity_no_q, "tiled_ai_no_q": tl.arithmetic_intensity_no_q,
            "kv_ratio": nv.kv_elements_loaded / tl.kv_elements_loaded,
        })
    passed, summary = True, {"rows": len(rows)}
    if args.check:
        rep = asymptotics_check(args.n_list, args.d)
        passed = rep.passed
        summary.update(tiled_band=rep.tiled_band, tiled_band_ratio=rep.tiled_band_ratio,
                       tiled_ai_increasing=rep.tiled_ai_increasing, naive_ai_spread=rep.naive_ai_spread,
                       passed=rep.passed)
    if args.format == "csv":
        text = _csv_text(rows)
        (out / "io_report.csv").write_text(text)
        sys.stdout.write(text)
    else:
        doc = {"schema_version": SCHEMA_VERSION, **summary, "rows": rows}
        text = json.dumps(doc, indent=2)
        (out / "io_report.json").write_text(text)
        print(text)
    return passed, summary


def cmd_gradcheck(args, out: Path):
    import numpy as np
    from .autograd import gradcheck
    from .layers import init_layer_params

    rng = np.random.default_rng(args.seed)
    reports = []
    for _ in range(args.instances):
        p = init_layer_params(rng, args.d, args.heads)
        x = rng.normal(size=(args.n, args.d))
        seed = rng.normal(size=(args.n, args.d))
        reports.append(gradcheck(p, x, seed, tol=args.tol, arch=args.arch))
    worst = max(reports, key=lambda r: r.max_rel_error)
    passed = all(r.passed for r in reports)
    doc = {"schema_version": SCHEMA_VERSION, "arch": args.arch, "instances": args.instances, "tol": args.tol,
           "passed": sum(r.passed for r in reports), "max_rel_error": worst.max_rel_error,
           "worst_param": worst.worst_name, "pass": passed}
    (out / "gradcheck.json").write_text(json.dumps(doc, indent=2))
    print(json.dumps(doc))
    return passed, doc


def cmd_theory_check(args, out: Path):
    from . import theory

    checks = {"simulate": theory.check_simulation, "theorem1": theory.check_theorem1, "rnn": theory.check_rnn}
    names = list(checks) if args.which == "all" else [args.which]
    results = [checks[name](seed=args.seed) for name in names]
    doc = {"schema_version": SCHEMA_VERSION, "seed": args.seed, "results": results,
           "pass": all(r["pass"] for r in results)}
    text = json.dumps(doc, indent=2)
    (out / "theory.json").write_text(text)
    print(text)
    return doc["pass"], {"pass": doc["pass"], "checks": {r["check"]: r["pass"] for r in results}}


def cmd_train_copy(args, out: Path):
    from .harness import AdamCfg, CopyTaskCfg, ModelCfg, TrainingDiverged, train
    from .weights import save_weights

    cfg = ModelCfg(arch=args.arch, layers=args.layers, dim=args.d, heads=args.heads, vocab=args.vocab,
                   tiled=args.tiled, scale_logits=args.scale_logits)
    task = CopyTaskCfg(vocab=args.vocab, prefix_len=args.prefix_len, seed=args.seed)

    def log(row):
        print(f"step {row['step']:5d}  loss {row['loss']:.4f}  tok_acc {row['tok_acc']:.4f}  "
              f"seq_acc {row['seq_acc']:.4f}", flush=True)

    try:
        res = train(cfg, task, args.steps, AdamCfg(lr=args.lr), batch=args.batch,
                    eval_every=args.eval_every, seed=args.seed, log=log)
    except TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return False, {"diverged": str(exc)}
    _write_csv(out / args.out, [{k: r[k] for k in ("step", "loss", "tok_acc", "seq_acc")} for r in res.trace])
    save_weights(out / "model.rtw", cfg, res.state.params, extra={"metadata": res.metadata})
    return True, {"final": res.final, "metadata": res.metadata}


def cmd_eval(args, out: Path):
    from .harness import CopyTaskCfg, evaluate
    from .weights import load_weights

    cfg, params = load_weights(args.weights)
    task = CopyTaskCfg(vocab=cfg.vocab, prefix_len=args.prefix_len, seed=args.seed)
    metrics = evaluate(cfg, params, task, n_batches=args.batches)
    doc = {"schema_version": SCHEMA_VERSION, "weights": str(args.weights), **metrics}
    (out / "eval.json").write_text(json.dumps(doc, indent=2))
    print(json.dumps(doc))
    return True, metrics


COMMANDS = {"equivalence": cmd_equivalence, "schedule": cmd_schedule, "io-report": cmd_io_report,
            "gradcheck": cmd_gradcheck, "theory-check": cmd_theory_check, "train-copy": cmd_train_copy,
            "eval": cmd_eval}


# -- plumbing ---------------------------------------------------------------------

def _csv_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


def _write_csv(path: Path, rows: list[dict]) -> None:
    path.write_text(_csv_text(rows))


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if hasattr(v, "item"):
        return v.item()
    return v


def write_manifest(out: Path, args, passed: bool, summary: dict, started: float) -> Path:
    from . import __version__

    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {"schema_version": SCHEMA_VERSION, "command": args.command, "config": _jsonable(cfg),
           "seed": args.seed, "code_version": __version__,
           "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
           "elapsed_s": round(time.time() - started, 3), "pass": passed, "result": _jsonable(summary)}
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2))
    return path


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads is not None:
        if args.threads < 1:
            ap.print_usage(sys.stderr)
            print("rtlab: error: --threads must be positive", file=sys.stderr)
            return 2
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    started = time.time()
    out = args.out_dir or Path("runs") / time.strftime("%Y%m%d-%H%M%S", time.localtime(started))
    out.mkdir(parents=True, exist_ok=True)
    args.out_dir = out
    try:
        passed, summary = COMMANDS[args.command](args, out)
    except (ValueError, FileNotFoundError) as exc:
        print(f"rtlab {args.command}: error: {exc}", file=sys.stderr)
        write_manifest(out, args, False, {"error": str(exc)}, started)
        return 2
    write_manifest(out, args, passed, summary, started)
    return 0 if passed else 1


if __name__ == "__main__":
    sys.exit(main())
