"""Command-line front end: ``xbarnas {data,lut,search,train,report,simulate}``.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import io
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import CONFIG_DIR
from .configio import atomic_write_text
from .cost import ComponentCosts, build_lut, load_costs, network_cost, network_totals, searchable_edges
from .data import SyntheticTaskSpec, load_cifar_batch, load_raw, save_raw, split, train_test
from .errors import ConfigError, MissingArtifactError, SearchDivergedError, XbarError
from .nn import format_network, init_weights, load_network
from .search import SearchConfig, SuperNet, format_summary, format_trace, load_search, run_search
from .train import evaluate, load_weights, save_weights, train_network
from .xbar import HardwareConfig, load_hardware

log = logging.getLogger("xbarnas")

REPORT_HEADER = ("model", "xb_size", "i_accuracy", "ni_accuracy", "energy_mJ", "latency_smm2", "edap")


# inputs ---------------------------------------------------------------------------


def _require(path, what):
    if path is None:
        raise ConfigError(f"--{what} is required for this command")
    path = Path(path)
    if not path.exists() and path.parent == Path(".") and (CONFIG_DIR / path.name).is_file():
        return CONFIG_DIR / path.name  # bare name of a shipped config
    if not path.exists():
        raise MissingArtifactError(f"{what} file not found: {path}")
    return path


def _hardware(args):
    return load_hardware(_require(args.hw, "hw")) if args.hw else HardwareConfig()


def _costs(args):
    return load_costs(_require(args.cost, "cost")) if args.cost else ComponentCosts()


def _search_cfg(args):
    cfg = load_search(_require(args.search, "search")) if args.search else SearchConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def load_split(data, part):
    """``part`` ("train" or "test") of a dataset directory or a single file.

    A directory holds ``train.xbds``/``test.xbds``, or CIFAR-10 binary batches
    (``data_batch_*.bin``, ``test_batch.bin``).
    """
    path = _require(data, "data")
    if path.is_file():
        return load_cifar_batch(path, part) if path.suffix == ".bin" else load_raw(path, part)
    raw = path / f"{part}.xbds"
    if raw.exists():
        return load_raw(raw, part)
    batches = sorted(path.glob("data_batch_*.bin")) if part == "train" else [path / "test_batch.bin"]
    batches = [b for b in batches if b.exists()]
    if not batches:
        raise MissingArtifactError(f"no {part} data in {path}")
    parts = [load_cifar_batch(b, part) for b in batches]
    first = parts[0]
    return dataclasses.replace(
        first,
        images=np.concatenate([p.images for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
    )


def _claim(path, force):
    """Refuse to overwrite an existing output unless forced."""
    path = Path(path)
    if path.exists() and not force:
        raise ConfigError(f"{path} already exists; pass --force to overwrite")
    return path


def _manifest(args, extra=()):
    lines = [f"command = {args.command}"]
    for key in ("net", "hw", "cost", "search", "data"):
        value = getattr(args, key, None)
        if value is not None:
            lines.append(f"{key} = {value}")
    lines.extend(extra)
    return lines


# commands -------------------------------------------------------------------------


def cmd_data(args):
    out = Path(args.out or ".")
    for name in ("train.xbds", "test.xbds"):
        _claim(out / name, args.force)
    spec = SyntheticTaskSpec(
        classes=args.classes, size=args.size, count=args.count, noise=args.noise, seed=args.seed or 0
    )
    train, test = train_test(spec, args.test_count)
    save_raw(train, out / "train.xbds")
    save_raw(test, out / "test.xbds")
    print(f"wrote {len(train)} train and {len(test)} test images of {spec.classes} classes to {out}")


def cmd_lut(args):
    net = load_network(_require(args.net, "net"))
    hw, costs, cfg = _hardware(args), _costs(args), _search_cfg(args)
    out = _claim(args.out or "lut.csv", args.force)
    edges = searchable_edges(net)
    if not edges:
        raise ConfigError("network has no searchable layers")
    lut = build_lut(edges, cfg.kernels, cfg.xbar_sizes, hw.fmt, costs)
    atomic_write_text(out, lut.to_csv())
    for e in edges:
        print(f"{e.name:<16} I:{e.I} O:{e.O} S:{e.S} FM:{e.H_i}x{e.W_i}  {lut.count(e.name)} entries")
    print(f"wrote {len(lut.entries)} entries to {out}")


def cmd_search(args):
    net = load_network(_require(args.net, "net"))
    hw, costs, cfg = _hardware(args), _costs(args), _search_cfg(args)
    out = Path(args.out or "search")
    for name in ("result.net", "trace.csv", "summary.txt", "lut.csv", "alphas.csv", "manifest.txt"):
        _claim(out / name, args.force)
    data = load_split(args.data, "train")
    train, val = split(data, cfg.val_fraction, cfg.seed)
    lut = build_lut(searchable_edges(net), cfg.kernels, cfg.xbar_sizes, hw.fmt, costs)
    supernet = SuperNet(net, cfg.kernels, cfg.xbar_sizes, hw, np.random.default_rng([cfg.seed, 1]))
    mode_name = "ni-search" if args.mode == "nonideal" else "i-search"
    header = _manifest(args, [f"mode = {args.mode} ({mode_name})", f"seed = {cfg.seed}"])
    atomic_write_text(out / "manifest.txt", "\n".join(header) + "\n")
    atomic_write_text(out / "lut.csv", lut.to_csv())
    try:
        result = run_search(supernet, train, val, lut, cfg, args.mode, log=log.info)
    except SearchDivergedError as exc:
        atomic_write_text(out / "trace.csv", format_trace(exc.trace))
        raise
    atomic_write_text(out / "trace.csv", format_trace(result.trace))
    atomic_write_text(out / "result.net", format_network(result.network))
    atomic_write_text(out / "alphas.csv", _format_alphas(supernet))
    summary = format_summary(result, supernet, header)
    atomic_write_text(out / "summary.txt", summary)
    print(summary, end="")


def _format_alphas(supernet):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("edge", "candidate", "alpha", "probability"))
    for m in supernet.edges:
        for c, a, p in zip(m.candidates, m.alpha, m.probs):
            w.writerow((m.name, c.label, repr(float(a)), repr(float(p))))
    return buf.getvalue()


def cmd_train(args):
    net = load_network(_require(args.net, "net"))
    if searchable_edges(net):
        raise ConfigError("train needs a compact network; run search first")
    cfg = _search_cfg(args)
    out = Path(args.out or "model")
    for name in ("network.net", "weights.npz", "train_log.csv"):
        _claim(out / name, args.force)
    data = load_split(args.data, "train")
    weights = init_weights(net, np.random.default_rng([cfg.seed, 2]))
    history = train_network(
        net, weights, data, cfg.train_epochs, cfg.lr_w, cfg.lambda1, cfg.batch_size,
        np.random.default_rng([cfg.seed, 3]), cfg.momentum, log=log.info,
    )
    atomic_write_text(out / "network.net", format_network(net))
    save_weights(weights, out / "weights.npz")
    atomic_write_text(
        out / "train_log.csv", "epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(history))
    )
    print(f"trained {cfg.train_epochs} epochs, final loss {history[-1] if history else float('nan'):.4f}; wrote {out}")


def report_row(name, net, weights, test, hw, costs):
    sizes = sorted({sp.n for sp in net.layer_specs()})
    totals = network_totals(network_cost(net, hw.fmt, costs))
    i_acc = evaluate(net, weights, test, "ideal", hw).top1
    ni = evaluate(net, weights, test, "nonideal", hw, skip_failures=True)
    if ni.failures:
        log.warning("%s: %d test images skipped after solver failures", name, ni.failures)
    return (
        name,
        str(sizes[0]) if len(sizes) == 1 else "mixed",
        repr(i_acc),
        repr(ni.top1),
        repr(totals.energy_mJ),
        repr(totals.latency_smm2),
        repr(totals.edap),
    )


def cmd_report(args):
    if not args.models:
        raise ConfigError("report needs at least one model directory")
    hw, costs = _hardware(args), _costs(args)
    out = _claim(args.out or "report.csv", args.force)
    test = load_split(args.data, "test")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for model in args.models:
        model = Path(model)
        net = load_network(_require(model / "network.net", "model network"))
        weights = load_weights(model / "weights.npz")
        w.writerow(report_row(model.name, net, weights, test, hw, costs))
    atomic_write_text(out, buf.getvalue())
    print(buf.getvalue(), end="")


def cmd_simulate(args):
    """One random 90%-utilised crossbar MVM: error against the ideal integer
    product plus the circuit solver's diagnostics for one drive vector."""
    from .xbar import AdcSpec, nonideal_mvm, program_weights, solve_crossbar

    hw = _hardware(args)
    n = args.size or hw.n
    cfg, fmt = hw.crossbar(n), hw.fmt
    rng = np.random.default_rng(args.seed or 0)
    rows = cols = max(1, int(round(0.9 * n)))
    w = rng.integers(0, 1 << fmt.weight_bits, (rows, cols))
    x = rng.integers(0, 1 << fmt.activation_bits, (args.vectors, rows))
    stack = program_weights(w, fmt, cfg)
    got = nonideal_mvm(x, stack, AdcSpec.for_crossbar(cfg), method="exact")
    want = x @ (w - fmt.weight_offset)
    err = np.abs(got - want).sum(axis=1) / np.maximum(np.abs(want).sum(axis=1), 1)
    drive = np.zeros(n)
    drive[:rows] = cfg.v_supply * rng.integers(0, 2, rows)
    rep = solve_crossbar(drive, stack.conductances[0], cfg, method="direct")
    lines = [
        f"crossbar {n}x{n}, {rows}x{cols} used, {fmt.weight_bits}-bit weights, {fmt.activation_bits}-bit inputs",
        f"r_wire {cfg.r_wire} r_source {cfg.r_source} r_sink {cfg.r_sink} beta {cfg.beta}",
        f"mean relative MVM error over {args.vectors} vectors: {float(err.mean()):.6g}",
        f"max relative MVM error: {float(err.max()):.6g}",
        f"solver iterations: {rep.iterations}",
        f"KCL residual: {rep.residual:.3e} A",
        f"largest row-line drop: {float(np.max(drive[:, None] - rep.row_voltages)):.6g} V",
    ]
    text = "\n".join(lines) + "\n"
    if args.out:
        atomic_write_text(_claim(args.out, args.force), text)
    print(text, end="")


COMMANDS = {
    "data": cmd_data,
    "lut": cmd_lut,
    "search": cmd_search,
    "train": cmd_train,
    "report": cmd_report,
    "simulate": cmd_simulate,
}


# entry point ------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--net", help="network / backbone description")
    common.add_argument("--hw", help="hardware config (key = value)")
    common.add_argument("--cost", help="component cost config (key = value)")
    common.add_argument("--search", help="search config (key = value)")
    common.add_argument("--data", help="dataset directory or file")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--seed", type=int, help="overrides the seed of the search config")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--mode", choices=("ideal", "nonideal"), default="nonideal",
                        help="crossbar model used in architecture steps")
    common.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")

    parser = argparse.ArgumentParser(prog="xbarnas", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("data", parents=[common], help="write a synthetic train/test task")
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--test-count", type=int, default=500)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.5)
    sub.add_parser("lut", parents=[common], help="build the per-edge cost lookup table")
    sub.add_parser("search", parents=[common], help="run the architecture search")
    sub.add_parser("train", parents=[common], help="train an extracted network")
    p = sub.add_parser("report", parents=[common], help="accuracy and cost CSV for trained models")
    p.add_argument("models", nargs="*", help="model directories written by train")
    p = sub.add_parser("simulate", parents=[common], help="one non-ideal crossbar MVM with diagnostics")
    p.add_argument("--size", type=int, help="crossbar size (default: hw n)")
    p.add_argument("--vectors", type=int, default=16)
    return parser


def _thread_limit():
    value = os.environ.get("XBAR_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        threads = int(value)
    except ValueError:
        raise ConfigError(f"XBAR_THREADS must be an integer, got {value!r}") from None
    if threads < 1:
        raise ConfigError("XBAR_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def exit_code(exc):
    return 4 if isinstance(exc, FileNotFoundError) else getattr(exc, "exit_code", 1)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            COMMANDS[args.command](args)
    except (XbarError, FileNotFoundError) as exc:
        print(f"xbarnas {args.command}: error: {exc}", file=sys.stderr)
        return exit_code(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
