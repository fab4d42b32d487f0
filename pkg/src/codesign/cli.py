"""Command-line entry point: collect, fit, search, eval, pareto.

Exit codes: 0 success, 1 configuration or input error, 2 I/O error,
3 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import controller as ctl
from .accuracy_proxy import ConfigError as OracleConfigError
from .config import ConfigError, MODES, dump_config, load_config, resolve
from .cost_model import report_to_text
from .design_space import EncodingError, InvalidSequenceError, SequenceLengthError, parse_sequence, validate
from .search import (
    PRESETS,
    EmptyResultError,
    Evaluator,
    SearchConfigError,
    SearchHistory,
    curves_to_text,
    finalize_top_n,
    finalized_to_text,
    pareto_front,
    pareto_to_text,
    passes_thresholds,
    random_search,
    reward,
    run_search,
    two_stage_baseline,
)
from .surrogate import Collection, SurrogatePair, collect_dataset, fit_surrogates, harness_to_text, mse_harness

log = logging.getLogger("codesign")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_RUNTIME = 0, 1, 2, 3

DATASET = "dataset.csv"
SURROGATE = "surrogate.npz"
HISTORY = "history.jsonl"


def _overrides(args) -> dict:
    out: dict = {}
    if getattr(args, "seed", None) is not None:
        out.setdefault("run", {})["seed"] = args.seed
        out.setdefault("surrogate", {})["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        out.setdefault("run", {})["mode"] = args.mode
    if getattr(args, "preset", None) is not None:
        out.setdefault("reward", {})["preset"] = args.preset
    if getattr(args, "n", None) is not None:
        out.setdefault("surrogate", {})["n_samples"] = args.n
    if getattr(args, "iterations", None) is not None:
        out.setdefault("run", {})["iterations"] = args.iterations
    return out


def _prepare(args):
    cfg = load_config(args.config, _overrides(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.yaml").write_text(dump_config(cfg))
    return cfg, resolve(cfg), out


def _sidecar(out: Path, command: str, started: float, extra: dict | None = None) -> None:
    meta = {
        "command": command,
        "started_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "elapsed_s": time.time() - started,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    meta.update(extra or {})
    (out / f"{command}.meta.json").write_text(json.dumps(meta, indent=2, default=str) + "\n")


def cmd_collect(args) -> int:
    started = time.time()
    cfg, res, out = _prepare(args)
    su = res.surrogate
    coll = collect_dataset(int(su["n_samples"]), int(su["seed"]), res.schema, res.macro, res.hw,
                           int(su["max_attempts"]))
    (out / DATASET).write_text(coll.to_csv())
    lines = ["index\tattempt\treason"] + [f"{j}\t{a}\t{msg}" for j, a, msg in coll.redraws]
    (out / "collection_log.tsv").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(coll)} rows to {out / DATASET} ({len(coll.redraws)} redraws)")
    _sidecar(out, "collect", started)
    return EXIT_OK


def _load_surrogate(out: Path, res) -> SurrogatePair:
    path = out / SURROGATE
    if not path.exists():
        raise SearchConfigError(
            f"no surrogate at {path}; run 'codesign collect' and 'codesign fit' with the same --out, "
            "or set run.use_surrogate: false")
    return SurrogatePair.load(path, res.macro)


def cmd_fit(args) -> int:
    started = time.time()
    cfg, res, out = _prepare(args)
    path = out / DATASET
    if not path.exists():
        raise SearchConfigError(f"no dataset at {path}; run 'codesign collect' first")
    coll = Collection.from_csv(path.read_text())
    su = res.surrogate
    n_train = int(su["n_train"])
    if n_train >= len(coll):
        raise ConfigError(f"surrogate.n_train ({n_train}) must be smaller than the dataset ({len(coll)} rows)")
    pair = fit_surrogates(coll, n_train, tuple(su["tau_grid"]), tuple(su["sigma2_grid"]), bool(su["log_target"]),
                          res.macro, int(su["max_select_rows"]))
    pair.save(out / SURROGATE)
    report = []
    for ds, model in zip(coll.datasets(), (pair.latency, pair.energy)):
        train, test = ds.split(n_train)
        rows = mse_harness(train, test)
        report.append(f"# {ds.metric} (tau={model.length_scale}, sigma2={model.noise})\n" + harness_to_text(rows))
    (out / "harness.tsv").write_text("".join(report))
    sys.stdout.write("".join(report))
    _sidecar(out, "fit", started)
    return EXIT_OK


def cmd_search(args) -> int:
    started = time.time()
    cfg, res, out = _prepare(args)
    sc = res.search
    surrogate = _load_surrogate(out, res) if sc.use_surrogate else None
    evaluator = Evaluator(res.schema, sc.oracle, res.macro, res.hw, surrogate)
    with open(out / HISTORY, "w") as sink:
        if res.mode == "rl":
            hist = run_search(sc, evaluator, sink)
        elif res.mode == "random":
            hist = random_search(sc, evaluator, sink)
        else:
            hist = two_stage_baseline(sc, evaluator, sink)

    if hist.policy is not None:
        ctl.save_checkpoint(hist.policy, out / "policy.npz")
    extra = {"timings": hist.metadata.get("timings"), "n_exact": evaluator.n_exact,
             "n_predicted": evaluator.n_predicted}
    if res.mode == "two-stage":
        winner = hist.winner
        if winner is None:
            _sidecar(out, "search", started, extra)
            raise EmptyResultError("no accelerator configuration meets the thresholds for the stage-1 network")
        final = [winner]
        exact = winner.latency_pred, winner.energy_pred, winner.reward
    else:
        try:
            final = finalize_top_n(hist, evaluator, sc.reward, sc.top_n, sc.hard_screen)
        except EmptyResultError:
            _sidecar(out, "search", started, extra)
            raise
        (out / "finalized.tsv").write_text(finalized_to_text(final))
        winner = final[0]
        exact = winner.finalized.latency, winner.finalized.energy, winner.finalized.reward

    for metric in ("energy", "latency"):
        try:
            front = pareto_front(hist, metric)
        except EmptyResultError:
            continue
        (out / f"pareto_{metric}.tsv").write_text(pareto_to_text(front, metric))
    (out / "curve.tsv").write_text(curves_to_text({res.mode: hist}))
    summary = [
        "key\tvalue",
        f"mode\t{res.mode}",
        f"decisions\t{' '.join(map(str, winner.sequence))}",
        f"accelerator\t{winner.point.accel.label()}",
        f"accuracy\t{winner.accuracy!r}",
        f"latency_ms\t{exact[0]!r}",
        f"energy_mj\t{exact[1]!r}",
        f"reward\t{exact[2]!r}",
        f"candidates\t{len(hist)}",
    ]
    (out / "summary.tsv").write_text("\n".join(summary) + "\n")
    print("\n".join(summary[1:]))
    _sidecar(out, "search", started, extra)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    res = resolve(cfg)
    line = args.sequence if args.sequence is not None else sys.stdin.readline()
    seq = parse_sequence(line)
    point = validate(seq, res.schema)
    ev = Evaluator(res.schema, res.search.oracle, res.macro, res.hw).exact(seq, point)
    spec = res.search.reward
    print(f"decisions\t{' '.join(map(str, seq))}")
    print(f"accuracy\t{ev.accuracy!r}")
    if ev.report is not None:
        sys.stdout.write(report_to_text(ev.report, point.accel))
    else:
        print(f"accelerator\t{point.accel.label()}")
        print("latency_ms\tinf\nenergy_mj\tinf\t(no tiling fits the buffers)")
    print(f"reward\t{reward(ev.accuracy, ev.latency, ev.energy, spec)!r}")
    if not passes_thresholds(ev.latency, ev.energy, spec):
        print(f"screened\tviolates thresholds (need latency < {spec.t_lat} ms, energy < {spec.t_eer} mJ)")
    else:
        print("screened\tno")
    return EXIT_OK


def cmd_pareto(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    res = resolve(cfg)
    path = Path(args.history) if args.history else Path(args.out) / HISTORY
    hist = SearchHistory.from_jsonl(path.read_text(), res.schema)
    text = pareto_to_text(pareto_front(hist, args.metric), args.metric)
    if args.out and not args.history:
        (Path(args.out) / f"pareto_{args.metric}.tsv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="codesign", description="Joint network/accelerator search.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="YAML run configuration (defaults apply to omitted keys)")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, help="override run.seed and surrogate.seed")
        sp.add_argument("--preset", choices=sorted(PRESETS), help="reward constants preset")
        sp.add_argument("--mode", choices=MODES, help="search driver")

    sp = sub.add_parser("collect", help="sample design points and measure them with the cost model")
    common(sp)
    sp.add_argument("-n", type=int, help="number of samples (overrides surrogate.n_samples)")
    sp.set_defaults(func=cmd_collect)

    sp = sub.add_parser("fit", help="fit the latency and energy surrogates on a collected dataset")
    common(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("search", help="run the search and finalize the top candidates")
    common(sp)
    sp.add_argument("--iterations", type=int, help="override run.iterations")
    sp.set_defaults(func=cmd_search)

    sp = sub.add_parser("eval", help="exact metrics and reward of one decision sequence")
    common(sp, out_required=False)
    sp.add_argument("sequence", nargs="?", help="whitespace- or comma-separated decisions (default: stdin)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("pareto", help="non-dominated candidates of a search history")
    common(sp, out_required=False)
    sp.add_argument("--history", help="history file (default: <out>/history.jsonl)")
    sp.add_argument("--metric", choices=("energy", "latency"), default="energy")
    sp.set_defaults(func=cmd_pareto)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "pareto" and not (args.out or args.history):
        parser.error("pareto needs --out or --history")
    try:
        return args.func(args)
    except (ConfigError, SearchConfigError, OracleConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvalidSequenceError, SequenceLengthError, EncodingError) as exc:
        print(f"invalid design point: {exc}", file=sys.stderr)
        for v in getattr(exc, "violations", []):
            print(f"  {v}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # numeric failures, empty results, aborted runs
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if getattr(exc, "diagnostics", None):
            print(json.dumps(exc.diagnostics, default=str), file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
