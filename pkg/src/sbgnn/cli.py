"""Command-line entry point: ``sbgnn {synth,build,train,eval,report,gradcheck}``.

Progress goes to stderr, results go to files (``report`` and ``gradcheck``
print their result on stdout). Failures print one ``error: ...`` line on
stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path


from .dataset import (
    FEATURE_MODES,
    SyntheticSpec,
    build_dataset,
    generate_synthetic,
    load_dataset,
    load_timeseries,
    save_dataset,
    save_timeseries,
    split_dataset,
)
from .errors import SBGNNError, ValidationError
from .metrics import paired_t_test, write_confusion_csv, write_metrics_json
from .model import attention_weights, check_width, load_params, write_attention_csv
from .spectral import BasisCache, dump_basis
from .train import (
    METRIC_NAMES,
    TrainConfig,
    evaluate,
    gradient_check,
    load_run_accuracies,
    repeated_runs,
    write_run_outputs,
)

log = logging.getLogger("sbgnn")

GRADCHECK_TOL = 1e-4


class CliError(SBGNNError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(2)


def _default_seed() -> int:
    raw = os.environ.get("SBGNN_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"SBGNN_SEED must be an integer, got {raw!r}") from None


def _prepare_out(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise CliError(f"{out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise CliError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        n_classes=args.classes,
        graphs_per_class=args.graphs_per_class,
        n_rois=args.nodes,
        n_timepoints=args.timesteps,
        rho_in=args.rho_in,
        rho_out=args.rho_out,
        seed=args.seed if args.seed is not None else _default_seed(),
    )
    out = _prepare_out(args.out, args.force)
    cohort = generate_synthetic(spec)
    for sid, ts in cohort.series.items():
        save_timeseries(ts, out / f"subject_{sid}_ts.csv")
    with open(out / "labels.csv", "w", newline="") as fh:
        fh.write("id,label\n")
        for sid in sorted(cohort.labels):
            fh.write(f"{sid},{cohort.labels[sid]}\n")
    log.info("wrote %d subjects to %s", len(cohort.series), out)
    return 0


def _read_labels(ts_dir: Path) -> dict[str, int]:
    path = ts_dir / "labels.csv"
    if not path.is_file():
        raise CliError(f"labels.csv not found in {ts_dir}")
    labels = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                labels[row["id"]] = int(row["label"])
            except (KeyError, TypeError, ValueError):
                raise CliError(f"labels.csv: bad row {row}") from None
    if not labels:
        raise CliError("labels.csv lists no subjects")
    return labels


def cmd_build(args) -> int:
    ts_dir = Path(args.ts_dir)
    labels = _read_labels(ts_dir)
    series = {}
    for sid in labels:
        path = ts_dir / f"subject_{sid}_ts.csv"
        if not path.is_file():
            raise CliError(f"{path.name} not found")
        series[sid] = load_timeseries(path)
    n_classes = max(labels.values()) + 1
    names = [f"class_{c}" for c in range(max(n_classes, 2))]
    dataset = build_dataset(
        series, labels, names, args.threshold, args.features, provenance=str(ts_dir)
    )
    out = _prepare_out(args.out, args.force)
    save_dataset(dataset, out)
    isolated = []
    for g in dataset.graphs:
        log.info("graph %s: %d nodes, %d edges", g.graph_id, g.n_nodes, g.n_edges)
        if g.n_edges == 0:
            isolated.append(g.graph_id)
    if isolated:
        log.warning(
            "%d graph(s) have no edges at threshold %g: %s",
            len(isolated), args.threshold, ",".join(isolated),
        )
    if args.dump_spectrum:
        cache = BasisCache()
        spec_dir = out / "spectra"
        spec_dir.mkdir(exist_ok=True)
        for g in dataset.graphs:
            dump_basis(cache.basis_for(g), spec_dir / f"{g.graph_id}_spectrum.csv")
    return 0


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if args.runs is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "runs": args.runs})
    out = _prepare_out(args.out, args.force)
    stats, results = repeated_runs(
        dataset, cfg, jobs=args.jobs, keep_going=True, progress=log.info
    )
    write_run_outputs(out, cfg, stats, results)
    if stats.n == 0:
        raise CliError(f"all {cfg.runs} runs failed")
    log.info(
        "accuracy %.4f ± %.4f over %d run(s)", stats.mean["accuracy"], stats.std["accuracy"], stats.n
    )
    return 0


def cmd_eval(args) -> int:
    params = load_params(args.model)
    dataset = load_dataset(args.data)
    if dataset.graphs:
        check_width(dataset.graphs[0], params)
    if params.dims[2] != dataset.n_classes:
        raise ValidationError(f"model has {params.dims[2]} classes, dataset has {dataset.n_classes}")
    seed = args.split_seed if args.split_seed is not None else _default_seed()
    _, _, test_idx = split_dataset(dataset, (0.6, 0.2, 0.2), seed)
    test = [dataset.graphs[i] for i in test_idx]
    out = _prepare_out(args.out, args.force)
    cache = BasisCache()
    rep, cm = evaluate(test, params, cache, dataset.n_classes)
    write_metrics_json(rep, out / "metrics.json", {"split_seed": seed, "n_test": len(test)})
    write_confusion_csv(cm, dataset.class_names, out / "confusion.csv")
    write_attention_csv(
        ((g.graph_id, attention_weights(g, params, cache)) for g in test), out / "attention.csv"
    )
    log.info("test accuracy %.4f on %d graphs", rep.accuracy, len(test))
    return 0


def cmd_report(args) -> int:
    path = Path(args.runs) / "summary.json"
    if not path.is_file():
        raise CliError(f"summary.json not found in {args.runs}")
    stats = json.loads(path.read_text())["stats"]
    print(f"runs: {stats['n']}")
    print(f"{'metric':<10} {'mean':>8} {'std':>8}")
    for name in METRIC_NAMES:
        print(f"{name:<10} {stats['mean'][name]:8.4f} {stats['std'][name]:8.4f}")
    if args.ttest:
        a = load_run_accuracies(args.runs)
        b = load_run_accuracies(args.ttest)
        if len(a) != len(b):
            raise CliError(f"cannot pair run sets of unequal size ({len(a)} vs {len(b)})")
        res = paired_t_test(a, b, "two-sided" if not args.one_sided else "greater")
        print(f"paired t-test ({res.alternative}): t = {res.t_statistic:.6g}, "
              f"df = {res.degrees_of_freedom}, p = {res.p_value:.6g}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.sweep:
        cases = [(args.seed_value + k, 4 + k % 5) for k in range(10)]
    else:
        if not 3 <= args.nodes <= 16:
            raise CliError(f"--nodes must lie in [3, 16], got {args.nodes}")
        cases = [(args.seed_value, args.nodes)]
    worst = 0.0
    for seed, n in cases:
        err, _ = gradient_check(seed, n)
        log.info("seed %d nodes %d: max rel err %.3e", seed, n, err)
        worst = max(worst, err)
    ok = worst < GRADCHECK_TOL
    verdict = "<" if ok else ">="
    print(f"max rel err {worst:.6e} {verdict} 1e-4, {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sbgnn", description="Spectral graph network for connectome classification.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic time-series cohort")
    s.add_argument("--classes", type=int, default=2)
    s.add_argument("--graphs-per-class", type=int, default=10)
    s.add_argument("--nodes", type=int, default=30)
    s.add_argument("--timesteps", type=int, default=128)
    s.add_argument("--rho-in", type=float, default=0.7)
    s.add_argument("--rho-out", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=None, help="default: $SBGNN_SEED or 0")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    b = sub.add_parser("build", help="correlation graphs from a time-series directory")
    b.add_argument("--ts-dir", required=True)
    b.add_argument("--threshold", type=float, default=0.3)
    b.add_argument("--features", choices=FEATURE_MODES, default="corr-row")
    b.add_argument("--out", required=True)
    b.add_argument("--dump-spectrum", action="store_true", help="also write each graph's basis as CSV")
    b.add_argument("--force", action="store_true")
    b.set_defaults(func=cmd_build)

    t = sub.add_parser("train", help="repeated training runs")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None, help="JSON with TrainConfig fields")
    t.add_argument("--runs", type=int, default=None, help="overrides the config (default 30)")
    t.add_argument("--out", required=True)
    t.add_argument("--jobs", type=int, default=1)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a saved model on a test split")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split-seed", type=int, default=None, help="default: $SBGNN_SEED or 0")
    e.add_argument("--out", required=True)
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="summarize runs, optionally paired t-test against another set")
    r.add_argument("--runs", required=True)
    r.add_argument("--ttest", default=None, metavar="OTHER_RUNS")
    r.add_argument("--one-sided", action="store_true", help="test mean(runs) > mean(other)")
    r.set_defaults(func=cmd_report)

    g = sub.add_parser("gradcheck", help="backward pass vs central finite differences")
    g.add_argument("--seed", type=int, default=None, help="default: $SBGNN_SEED or 0")
    g.add_argument("--nodes", type=int, default=6)
    g.add_argument("--sweep", action="store_true", help="10 seeds from --seed, nodes cycling 4..8")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "gradcheck":
            args.seed_value = args.seed if args.seed is not None else _default_seed()
        return args.func(args)
    except (SBGNNError, FileNotFoundError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, FileNotFoundError) and exc.args else str(exc)
        sys.stderr.write(f"error: {' '.join(str(msg).split())}\n")
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
