"""``dagmil`` command line: synth | train | eval | heatmap | gradcheck | bench.

Exit codes: 0 success, 1 validation error, 2 IO error, 3 numerical failure.
Every option may also come from a flat ``key=value`` file given with
``--config``; keys are option names without the leading dashes (``-`` or
``_`` both accepted) and command-line flags win over the file.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np

from . import nncore as nn
from .bagio import (Bag, SynthConfig, ensure_directory, gen_synthetic, load_dataset,
                    read_bag, save_dataset)
from .dagnet import DagConfig, DagModel, attention_heatmap, bag_loss, load_model, save_model
from .exceptions import ConfigError, FormatError, InputError, NumericalError, UndefinedMetricError
from .spatial import build_index, nearest_bruteforce_many
from .trainer import TrainConfig, evaluate, run_repeated

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("dagmil")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text):
    try:
        values = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _float_list(text):
    try:
        values = [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _add_model_flags(p):
    p.add_argument("--k", type=_int_list, default=[8],
                   help="neighbours per node; a comma list runs a sweep")
    p.add_argument("--stride", type=_float_list, default=[256.0],
                   help="offset stride in pixels; a comma list runs a sweep")
    p.add_argument("--readout", choices=("mean", "max", "attention"), default="mean")
    p.add_argument("--hidden", type=int, default=None, help="offset-net width (default D/4, min 8)")
    p.add_argument("--no-offset", action="store_true", help="static K-nearest neighbours")
    p.add_argument("--no-weight", action="store_true", help="uniform edge weights")
    p.add_argument("--no-coords", action="store_true", help="raster anchors instead of coordinates")


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=70)
    p.add_argument("--patience", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    p.add_argument("--seed", type=int, default=None, help="single seed (overrides --seeds)")
    p.add_argument("--jobs", type=int, default=1, help="train seeds in parallel processes")


def build_parser():
    parser = _Parser(prog="dagmil", description="Deformable attention graph MIL toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic cluster-counting dataset")
    p.add_argument("--out", help="output directory (required)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bags", type=int, default=300)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--patches", type=int, default=64)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--grid-pitch", type=float, default=256.0)
    p.add_argument("--cluster-radius", type=float, default=384.0)
    p.add_argument("--noise-sigma", type=float, default=1.0)

    p = sub.add_parser("train", help="repeated stratified train/test runs")
    p.add_argument("--data", help="manifest JSON (required)")
    p.add_argument("--out", help="output directory (required)")
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("eval", help="metrics of a saved model on a manifest")
    p.add_argument("--model", help="saved .dagmodel (required)")
    p.add_argument("--data", help="manifest JSON (required)")
    p.add_argument("--out", default=None, help="metrics JSON path (default: stdout only)")

    p = sub.add_parser("heatmap", help="per-patch attention CSV (x,y,score)")
    p.add_argument("--model", help="saved .dagmodel (required)")
    p.add_argument("--data", default=None, help="manifest JSON: one CSV per bag")
    p.add_argument("--bag", default=None, help="single .dagbag file")
    p.add_argument("--out", help="output directory (required)")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--bags", type=int, default=10)
    p.add_argument("--patches", type=int, default=16)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--stride", type=float, default=256.0)
    p.add_argument("--readout", choices=("mean", "max", "attention"), default="mean")
    p.add_argument("--no-offset", action="store_true")
    p.add_argument("--no-weight", action="store_true")
    p.add_argument("--no-coords", action="store_true")
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="TSV report path")

    p = sub.add_parser("bench", help="kd-tree versus brute-force nearest neighbour timing")
    p.add_argument("--points", type=_int_list, default=[10000])
    p.add_argument("--queries", type=int, default=10000)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--min-speedup", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="TSV table path")

    for action in sub.choices.values():
        action.add_argument("--config", default=None, help="flat key=value file")
    return parser


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _apply_config_file(subparser, path):
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, raw in read_config_file(path).items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            raise ConfigError(f"unknown config key {key!r} in {path}")
        if isinstance(action, argparse._StoreTrueAction):
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"config key {key!r}: expected a boolean, got {raw!r}")
            defaults[key] = lowered in ("true", "1", "yes")
            continue
        try:
            value = action.type(raw) if action.type else raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from exc
        if action.choices and value not in action.choices:
            raise ConfigError(f"config key {key!r}: {value!r} not in {list(action.choices)}")
        defaults[key] = value
    subparser.set_defaults(**defaults)


# checked after the config file is merged, so the file may supply them
REQUIRED = {"synth": ("out",), "train": ("data", "out"), "eval": ("model", "data"),
            "heatmap": ("model", "out")}


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        _apply_config_file(sub, args.config)
        args = parser.parse_args(argv)
    missing = [f"--{name}" for name in REQUIRED.get(args.command, ()) if getattr(args, name) is None]
    if missing:
        raise UsageError(f"the following arguments are required: {', '.join(missing)}")
    return args


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    cfg = SynthConfig(n_bags=args.bags, classes=args.classes, patches=args.patches,
                      dim=args.dim, grid_pitch=args.grid_pitch,
                      cluster_radius=args.cluster_radius, noise_sigma=args.noise_sigma,
                      seed=args.seed)
    cfg.validate()
    bags = gen_synthetic(cfg)
    out = ensure_directory(args.out)
    manifest = save_dataset(bags, out)
    counts = Counter(b.label for b in bags)
    print(f"wrote {len(bags)} bags to {out} (manifest {manifest.name})")
    for label in sorted(counts):
        print(f"class {label}\t{counts[label]}")
    return EXIT_OK


def _dag_config(args, dim, n_classes, k, stride):
    return DagConfig(dim=dim, n_classes=n_classes, k=k, stride=stride, readout=args.readout,
                     hidden=args.hidden, offset_on=not args.no_offset,
                     weight_on=not args.no_weight, coords_on=not args.no_coords).validate()


def _variant_name(args):
    parts = [name for flag, name in ((args.no_offset, "-offset"), (args.no_weight, "-weight"),
                                      (args.no_coords, "-coords")) if flag]
    return "DAG" + ("" if not parts else " (" + " ".join(parts) + ")")


def cmd_train(args):
    seeds = [args.seed] if args.seed is not None else args.seeds
    tcfg = TrainConfig(lr=args.lr, weight_decay=args.weight_decay, epochs=args.epochs,
                       patience=args.patience, seeds=tuple(seeds)).validate()
    if args.jobs < 1:
        raise ConfigError(f"jobs must be at least 1, got {args.jobs}")
    grid = list(itertools.product(args.k, args.stride))
    for k, stride in grid:
        DagConfig(k=k, stride=stride).validate()
    bags = load_dataset(args.data)
    if not bags:
        raise InputError(f"manifest {args.data} lists no bags")
    n_classes = max(b.label for b in bags) + 1
    dim = bags[0].dim
    out = ensure_directory(args.out)
    sweep_k, sweep_s = len(args.k) > 1, len(args.stride) > 1
    for k, stride in grid:
        dcfg = _dag_config(args, dim, n_classes, k, stride)
        report, states, histories = run_repeated(bags, dcfg, tcfg, jobs=args.jobs,
                                                 keep_models=True)
        tag = "".join([f"_k{k}" if sweep_k else "", f"_stride{stride:g}" if sweep_s else ""])
        (out / f"report{tag}.json").write_text(report.to_json())
        for seed, state, history in zip(seeds, states, histories):
            model = DagModel(dcfg, seed=seed)
            model.params.load_state_dict(state)
            save_model(model, out / f"model{tag}_seed{seed}.dagmodel")
            (out / f"history{tag}_seed{seed}.json").write_text(
                json.dumps(history.to_dict(), indent=1, sort_keys=True) + "\n")
        label = _variant_name(args) + (f" k={k}" if sweep_k else "") + (
            f" stride={stride:g}" if sweep_s else "")
        print(report.table_row(label))
    return EXIT_OK


def cmd_eval(args):
    model = load_model(args.model)
    bags = load_dataset(args.data)
    metrics = evaluate(bags, model)
    metrics["n"] = len(bags)
    text = json.dumps(metrics, indent=2, sort_keys=True) + "\n"
    if args.out:
        ensure_directory(Path(args.out).parent)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def write_heatmap_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y", "score"])
        for x, y, s in rows:
            writer.writerow([repr(float(np.float32(x))), repr(float(np.float32(y))),
                             f"{s:.6f}"])


def cmd_heatmap(args):
    if (args.data is None) == (args.bag is None):
        raise ConfigError("give exactly one of --data or --bag")
    model = load_model(args.model)
    bags = load_dataset(args.data) if args.data else [read_bag(args.bag)]
    out = ensure_directory(args.out)
    for bag in bags:
        write_heatmap_csv(attention_heatmap(bag, model), out / f"{bag.id}.csv")
    print(f"wrote {len(bags)} heatmap(s) to {out}")
    return EXIT_OK


def random_check_bags(count, patches, dim, classes, seed):
    rng = np.random.default_rng(seed)
    return [Bag(rng.standard_normal((patches, dim)),
                rng.uniform(0, 1024, size=(patches, 2)),
                int(rng.integers(classes)), f"check_{i}") for i in range(count)]


def gradcheck_model(config, bags, seed=0, epsilon=1e-5, tolerance=1e-4):
    """Finite-difference check of ``bag_loss`` over every bag.

    Returns ``{parameter: max relative error over bags}``.  The neighbour
    selection of each bag is frozen at the unperturbed parameters.
    """
    worst = {}
    with nn.precision(np.float64):
        model = DagModel(config, seed=seed)
        for bag in bags:
            _, first = bag_loss(bag, model)
            fixed = first.neighbors.indices
            report = nn.grad_check(lambda: bag_loss(bag, model, neighbors=fixed)[0],
                                   model.params, epsilon=epsilon, tolerance=tolerance)
            for name, err in report.errors.items():
                worst[name] = max(worst.get(name, 0.0), err)
    return worst


def cmd_gradcheck(args):
    config = DagConfig(dim=args.dim, n_classes=args.classes, k=args.k, stride=args.stride,
                       readout=args.readout, offset_on=not args.no_offset,
                       weight_on=not args.no_weight, coords_on=not args.no_coords).validate()
    bags = random_check_bags(args.bags, args.patches, args.dim, args.classes, args.seed)
    worst = gradcheck_model(config, bags, args.seed, args.epsilon, args.tolerance)
    lines = ["parameter\tmax_rel_error\tstatus"]
    for name, err in worst.items():
        lines.append(f"{name}\t{err:.3e}\t{'ok' if err <= args.tolerance else 'FAIL'}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    if max(worst.values()) > args.tolerance:
        print(f"gradient check failed: tolerance {args.tolerance:g}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _best_time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        result = fn()
        best = min(best, time.perf_counter() - t)
    return best, result


def bench_rows(sizes, n_queries, repeats=3, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        pts = rng.uniform(0, 1e4, size=(n, 2))
        queries = rng.uniform(0, 1e4, size=(n_queries, 2))
        index = build_index(pts)
        # warm the compiled kernels outside the timed region
        index.query(queries[:1])
        nearest_bruteforce_many(pts, queries[:1])
        t_tree, a = _best_time(lambda: index.query(queries), repeats)
        t_scan, b = _best_time(lambda: nearest_bruteforce_many(pts, queries), repeats)
        if not np.array_equal(a, b):
            raise NumericalError(f"kd-tree and brute force disagree at n={n}")
        rows.append({"points": n, "queries": n_queries, "kdtree_s": t_tree,
                     "bruteforce_s": t_scan, "speedup": t_scan / t_tree})
    return rows


def cmd_bench(args):
    rows = bench_rows(args.points, args.queries, args.repeats, args.seed)
    lines = ["points\tqueries\tkdtree_s\tbruteforce_s\tspeedup"]
    for r in rows:
        lines.append(f"{r['points']}\t{r['queries']}\t{r['kdtree_s']:.6f}\t"
                     f"{r['bruteforce_s']:.6f}\t{r['speedup']:.1f}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    slow = [r for r in rows if r["points"] >= 10000 and r["speedup"] < args.min_speedup]
    if slow:
        print(f"kd-tree speedup below {args.min_speedup:g}x", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "heatmap": cmd_heatmap, "gradcheck": cmd_gradcheck, "bench": cmd_bench}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"dagmil: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ConfigError as exc:
        print(f"dagmil: invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"dagmil: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InputError, UndefinedMetricError) as exc:
        print(f"dagmil: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, FormatError) as exc:
        print(f"dagmil: io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"dagmil: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
