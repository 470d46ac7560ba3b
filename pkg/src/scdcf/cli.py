"""Command-line entry point: ``scdcf <command> [--config F] [--seed N] [--out DIR] [--set k=v ...]``.

Every command writes its outputs (a ``config.txt`` echo, CSV tables, and
checkpoints where relevant) into one run directory and prints a short summary.
Exit status is 1 for an invalid configuration and 2 for I/O or file-format
failures.
"""
import argparse
import csv
import os
import sys
import time
from collections import defaultdict

import numpy as np

from . import config as cfgmod
from .actions import load_idx, save_dataset, synth_scaled_dataset
from .basis import ScaleGrid, make_scale_basis, make_spatial_basis
from .errors import ConfigurationError, FormatError, ScdcfError
from .harness import (depth_sweep, emit_csv, stability_spec, stability_sweep, truncation_sweep,
                      verification_spec, verify_equivariance)
from .network import NetworkSpec, build_network
from .trainer import (TrainConfig, desk_splits, evaluate, load_checkpoint, match_cnn_widths,
                      save_checkpoint, train)

COMMANDS = {
    "basis": "sample the spatial and scale bases and write them as CSV",
    "verify": "equivariance error of a random ScDCF net and a plain CNN at every layer",
    "sweep-depth": "equivariance error against depth for each scale padding",
    "sweep-truncation": "truncation error against the scale range T",
    "stability": "deformation error against its theoretical bound",
    "synth-data": "rescale IDX digits by random factors into a dataset file",
    "train": "train on the desk splits and write a checkpoint and training log",
    "eval": "accuracy of a checkpoint on one desk split",
}


def _parser():
    p = argparse.ArgumentParser(prog="scdcf", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    for name, help in COMMANDS.items():
        s = sub.add_parser(name, help=help, description=help, epilog=cfgmod.help_text(name),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        s.add_argument("--config", metavar="PATH", help="key = value config file")
        s.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
        s.add_argument("--out", metavar="DIR", help="output directory (default: <run.label>-<timestamp>)")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key; repeatable")
    return p


def load_config(command, path=None, overrides=()):
    raw = {}
    if path:
        with open(path) as fh:
            raw.update(cfgmod.parse_text(fh.read(), source=path))
    raw.update(cfgmod.parse_overrides(overrides))
    return cfgmod.resolve(command, raw)


def _run_dir(out, label):
    if out is None:
        out = f"{label}-{time.strftime('%Y%m%d-%H%M%S')}"
    os.makedirs(out, exist_ok=True)
    return out


def _write_config(run, cfg, seed):
    with open(os.path.join(run, "config.txt"), "w") as fh:
        fh.write(f"# seed = {seed}\n")
        fh.write(cfgmod.dump(cfg))


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _g(v):
    return f"{float(v):.9g}"


def _net_spec(cfg, kind=None):
    widths = cfg["net.widths"]
    pool = cfg["net.pool"]
    if len(pool) == 1:
        pool = pool * len(widths)
    size = cfg.get("data.size", 28)
    return NetworkSpec(kind=kind or cfg["net.kind"], widths=widths, L=cfg["net.L"],
                       L_alpha=cfg["net.L_alpha"], K=cfg["net.K"], K_alpha=cfg["net.K_alpha"],
                       T=cfg["grid.T"], N_s=cfg["grid.N_s"], j=cfg["net.j"], padding=cfg["net.padding"],
                       pool=pool, batchnorm=cfg["net.batchnorm"], bn_mode=cfg["net.bn_mode"],
                       hidden=cfg["net.hidden"], input_hw=(size, size), sampling=cfg["net.sampling"],
                       init=cfg["net.init"], init_A=cfg["net.init_A"])


def _seeds(seed, n):
    return tuple(range(seed, seed + n))


def _source(cfg):
    src = load_idx(cfg["data.images"], cfg["data.labels"])
    n = cfg["data.count"]
    if n > len(src):
        raise cfgmod.ConfigKeyError("data.count", f"{n} exceeds the {len(src)} source images")
    return src.subset(np.arange(n)) if n > 0 else src


def _splits(cfg, seed):
    return desk_splits(_source(cfg), seed, cfg["data.splits"], cfg["data.low"], cfg["data.high"],
                       cfg["data.size"])


# ---------------------------------------------------------------- commands

def cmd_basis(cfg, seed, run):
    grid = ScaleGrid(cfg["grid.T"], cfg["grid.N_s"])
    header = ("k", "alpha_index", "row", "col", "value")
    lines = []
    if cfg["basis.which"] in ("spatial", "both"):
        sb = make_spatial_basis(cfg["net.K"], cfg["net.L"], grid, cfg["net.j"], cfg["net.sampling"])
        idx = np.indices(sb.samples.shape).reshape(4, -1).T
        rows = [(k, a, r, c, _g(sb.samples[k, a, r, c])) for k, a, r, c in idx]
        _write_rows(os.path.join(run, "spatial_basis.csv"), header, rows)
        lines.append(f"spatial basis: K={sb.K} N_s={grid.N_s} L={sb.L} j={sb.j:.6g} ({len(rows)} values)")
    if cfg["basis.which"] in ("scale", "both"):
        ab = make_scale_basis(cfg["net.K_alpha"], cfg["net.L_alpha"])
        rows = [(m, t, 0, 0, _g(ab.samples[m, t])) for m in range(ab.K_alpha) for t in range(ab.L_alpha)]
        _write_rows(os.path.join(run, "scale_basis.csv"), header, rows)
        lines.append(f"scale basis: K_alpha={ab.K_alpha} L_alpha={ab.L_alpha} ({len(rows)} values)")
    return lines


def _errors_by(records, key):
    out = defaultdict(list)
    for r in records:
        out[key(r)].append(r.measured_error)
    return out


def cmd_verify(cfg, seed, run):
    common = dict(widths=cfg["verify.widths"], L=cfg["verify.L"], cnn_L=cfg["verify.cnn_L"],
                  L_alpha=cfg["verify.L_alpha"], K=cfg["verify.K"], K_alpha=cfg["verify.K_alpha"],
                  T=cfg["verify.T"], N_s=cfg["verify.N_s"], padding=cfg["verify.padding"],
                  size=cfg["verify.size"])
    specs = [verification_spec(kind, **common) for kind in ("scdcf", "cnn")]
    records = verify_equivariance(specs, cfg["verify.steps"], _seeds(seed, cfg["verify.seeds"]),
                                  cfg["verify.v"])
    emit_csv(records, os.path.join(run, "verify.csv"))
    errs = _errors_by(records, lambda r: (r.experiment, r.depth))
    lines = []
    for layer in range(1, len(cfg["verify.widths"]) + 1):
        s, c = max(errs[("verify_scdcf", layer)]), max(errs[("verify_cnn", layer)])
        lines.append(f"layer {layer}: max error scdcf {s:.4g}  cnn {c:.4g}")
    return lines


def _sweep_template(cfg):
    w = cfg["sweep.width"]
    return verification_spec(widths=(w, w), L=cfg["sweep.L"], L_alpha=cfg["sweep.L_alpha"],
                             K=cfg["sweep.K"], K_alpha=cfg["sweep.K_alpha"], T=cfg["sweep.T"],
                             N_s=cfg["sweep.N_s"], size=cfg["sweep.size"])


def cmd_sweep_depth(cfg, seed, run):
    template = _sweep_template(cfg)
    beta = cfg["sweep.steps"] * template.scale_grid.delta
    size = cfg["sweep.size"]
    records = depth_sweep(template, cfg["sweep.depths"], cfg["sweep.paddings"],
                          _seeds(seed, cfg["sweep.seeds"]), beta, input_shape=(size, size))
    emit_csv(records, os.path.join(run, "sweep_depth.csv"))
    errs = _errors_by(records, lambda r: (r.padding, r.depth))
    lines = []
    for pad in cfg["sweep.paddings"]:
        means = "  ".join(f"{np.mean(errs[(pad, d)]):.4g}" for d in cfg["sweep.depths"])
        lines.append(f"{pad}: mean error by depth {means}")
    return lines


def cmd_sweep_truncation(cfg, seed, run):
    template = _sweep_template(cfg)
    size = cfg["sweep.size"]
    beta = cfg["sweep.steps"] * template.scale_grid.delta
    records, slopes = truncation_sweep(template, cfg["truncation.T_values"], beta,
                                       _seeds(seed, cfg["sweep.seeds"]), cfg["sweep.paddings"],
                                       cfg["truncation.depth"], (size, size),
                                       cfg["truncation.finest_support"])
    emit_csv(records, os.path.join(run, "sweep_truncation.csv"))
    _write_rows(os.path.join(run, "slopes.csv"), ("padding", "slope"),
                [(p, _g(slopes[p])) for p in cfg["sweep.paddings"]])
    return [f"{p}: log2(error) slope in T {slopes[p]:.4g}" for p in cfg["sweep.paddings"]]


def cmd_stability(cfg, seed, run):
    template = stability_spec(widths=cfg["stability.widths"], L=cfg["stability.L"], T=cfg["stability.T"],
                              N_s=cfg["stability.N_s"], K=cfg["stability.K"],
                              K_alpha=cfg["stability.K_alpha"], size=cfg["stability.size"])
    records = stability_sweep(template, cfg["stability.grad_inf"], cfg["stability.triples"], seed,
                              cfg["stability.max_steps"])
    emit_csv(records, os.path.join(run, "stability.csv"))
    slack = cfg["stability.slack"]
    ratio = max(r.measured_error / r.theoretical_bound for r in records)
    bad = sum(r.measured_error > r.theoretical_bound * (1 + slack) for r in records)
    errs = _errors_by(records, lambda r: r.grad_inf)
    means = "  ".join(f"{gi:g}: {np.mean(errs[gi]):.4g}" for gi in sorted(errs))
    return [f"max measured/bound {ratio:.4g}; {bad} of {len(records)} above bound x {1 + slack:g}",
            f"mean error by grad_inf {means}"]


def cmd_synth_data(cfg, seed, run):
    ds = synth_scaled_dataset(_source(cfg), seed, cfg["data.size"], cfg["data.low"], cfg["data.high"])
    path = os.path.join(run, "dataset.bin")
    save_dataset(ds, path)
    return [f"{len(ds)} images at {cfg['data.size']}x{cfg['data.size']} written to {path}"]


def cmd_train(cfg, seed, run):
    spec = _net_spec(cfg)
    if spec.kind == "cnn" and cfg["train.match_cnn"]:
        spec = match_cnn_widths(_net_spec(cfg, kind="scdcf"))
    tr, ev, te = _splits(cfg, seed)
    net = build_network(spec, seed)
    tc = TrainConfig(epochs=cfg["train.epochs"], batch_size=cfg["train.batch_size"],
                     optimizer=cfg["train.optimizer"], lr=cfg["train.lr"],
                     decay_epochs=cfg["train.decay_epochs"], decay_factor=cfg["train.decay_factor"], seed=seed)
    ckpt = os.path.join(run, "checkpoint.bin")
    train(net, tr, ev, tc, checkpoint_path=ckpt, log_path=os.path.join(run, "train_log.csv"))
    if tc.epochs == 0:
        save_checkpoint(ckpt, net)
    acc = evaluate(net, te)
    _write_rows(os.path.join(run, "accuracy.csv"), ("split", "accuracy"), [("test", _g(acc))])
    return [f"{spec.kind} widths {spec.widths} ({net.num_params()} parameters)", f"test accuracy {acc:.4f}"]


def cmd_eval(cfg, seed, run):
    net, _, _, _ = load_checkpoint(cfg["eval.checkpoint"])
    split = cfg["eval.split"]
    ds = dict(zip(("train", "eval", "test"), _splits(cfg, seed)))[split]
    acc = evaluate(net, ds)
    _write_rows(os.path.join(run, "accuracy.csv"), ("split", "accuracy"), [(split, _g(acc))])
    return [f"{split} accuracy {acc:.4f} on {len(ds)} images"]


HANDLERS = {"basis": cmd_basis, "verify": cmd_verify, "sweep-depth": cmd_sweep_depth,
            "sweep-truncation": cmd_sweep_truncation, "stability": cmd_stability,
            "synth-data": cmd_synth_data, "train": cmd_train, "eval": cmd_eval}


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.command, args.config, args.set)
        run = _run_dir(args.out, cfg["run.label"])
        _write_config(run, cfg, args.seed)
        lines = HANDLERS[args.command](cfg, args.seed, run)
    except ConfigurationError as exc:
        print(f"scdcf {args.command}: configuration error: {exc}", file=sys.stderr)
        return 1
    except (OSError, FormatError) as exc:
        print(f"scdcf {args.command}: I/O error: {exc}", file=sys.stderr)
        return 2
    except ScdcfError as exc:
        print(f"scdcf {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(f"{args.command}: outputs in {run}")
    for line in lines:
        print("  " + line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
