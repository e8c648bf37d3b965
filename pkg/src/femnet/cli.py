"""Command-line entry point.

Subcommands map one-to-one onto the experiment drivers; every flag mirrors a
config-file key (`key = value` lines, '#' comments) and flags win over the
file.  All outputs are UTF-8 CSV/JSON with a config-echo header.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields

from . import experiments, mesh, sparsity, training
from .training import CONFIG_KEYS, TrainConfig


def parse_config_file(path) -> dict:
    """Flat `key = value` text; unknown keys are an error listing valid ones."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise SystemExit(f"{path}:{lineno}: expected `key = value`")
            key, value = (part.strip() for part in body.split("=", 1))
            if key not in CONFIG_KEYS:
                raise SystemExit(f"{path}:{lineno}: unknown key {key!r}; valid keys: "
                                 + ", ".join(CONFIG_KEYS))
            out[key] = value
    return out


def build_train_config(args) -> TrainConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    for f in fields(TrainConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    coerced = {}
    for f in fields(TrainConfig):
        if f.name not in values:
            continue
        raw = values[f.name]
        if isinstance(raw, str):
            if f.name in ("family", "mesh", "activation"):
                coerced[f.name] = raw
            elif f.name in ("deterministic", "resample_each_epoch"):
                coerced[f.name] = raw.lower() in ("1", "true", "yes", "on")
            elif f.name in ("lr0", "lr_min", "nu"):
                coerced[f.name] = float(raw)
            else:
                coerced[f.name] = int(raw)
        else:
            coerced[f.name] = raw
    return TrainConfig(**coerced)


def _add_train_flags(p):
    p.add_argument("--config", help="config file of key = value lines")
    p.add_argument("--family", choices=training.FAMILIES)
    p.add_argument("--n", type=int)
    p.add_argument("--mesh", dest="mesh", help="mesh file for poisson-unstructured")
    p.add_argument("--c-level", dest="c_level", type=int,
                   help="connectivity level; 0 = dense, -1 = random-matched")
    p.add_argument("--match-c-level", dest="match_c_level", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--activation", choices=sorted(set(["relu", "swish", "identity"])))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--lr-min", dest="lr_min", type=float)
    p.add_argument("--samples-train", dest="samples_train", type=int)
    p.add_argument("--samples-test", dest="samples_test", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--nu", type=float)
    p.add_argument("--eval-interval", dest="eval_interval", type=int)
    p.add_argument("--deterministic", dest="deterministic", type=str)
    p.add_argument("--out", default="runs/latest", help="output directory")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="femnet")
    parser.add_argument("--threads", type=int, default=None,
                        help="limit BLAS threads for this process")
    sub = parser.add_subparsers(dest="command", required=True)

    p_mesh = sub.add_parser("mesh", help="generate or check meshes")
    mesh_sub = p_mesh.add_subparsers(dest="mesh_command", required=True)
    p_gen = mesh_sub.add_parser("gen")
    p_gen.add_argument("--kind", choices=["interval", "square"], required=True)
    p_gen.add_argument("--n", type=int, required=True)
    p_gen.add_argument("--lo", type=float, default=-1.0)
    p_gen.add_argument("--hi", type=float, default=1.0)
    p_gen.add_argument("--out", required=True)
    p_check = mesh_sub.add_parser("check")
    p_check.add_argument("path")

    sub.add_parser("table1", help="recompute the FC-vs-sparse weight table")

    p_train = sub.add_parser("train", help="train a network on a PDE family")
    _add_train_flags(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on fresh test data")
    p_eval.add_argument("rundir")
    p_eval.add_argument("--test-seed", type=int, default=777)
    p_eval.add_argument("--h1-refined-samples", type=int, default=0)
    p_eval.add_argument("--out", default=None)

    p_stab = sub.add_parser("stability", help="sensitivity of Gaussian nets")
    p_stab.add_argument("--grid-ns", default="16,32,64",
                        help="comma-separated square resolutions")
    p_stab.add_argument("--c-level", type=int, default=5)
    p_stab.add_argument("--trials", type=int, default=3000)
    p_stab.add_argument("--seed", type=int, default=0)
    p_stab.add_argument("--out", default="stability.csv")

    p_uat = sub.add_parser("uat", help="exact ReLU realization report")
    p_uat.add_argument("--n", type=int, default=6)
    p_uat.add_argument("--samples", type=int, default=100)
    p_uat.add_argument("--seed", type=int, default=0)
    p_uat.add_argument("--out", default="uat.json")

    p_cmp = sub.add_parser("compare-random", help="FEM vs random patterns at equal nnz")
    _add_train_flags(p_cmp)
    p_cmp.add_argument("--random-seeds", dest="random_seeds", type=int, default=10)
    p_cmp.set_defaults(out="compare_random.csv")

    p_sweep = sub.add_parser("sweep", help="grid of (n, c_level) training runs")
    _add_train_flags(p_sweep)
    p_sweep.add_argument("--resolutions", default="8,16")
    p_sweep.add_argument("--c-levels", dest="c_levels", default="1,3")
    p_sweep.set_defaults(out="runs/sweep")

    args = parser.parse_args(argv)
    if args.threads is not None:
        try:
            import threadpoolctl
            threadpoolctl.threadpool_limits(args.threads)
        except ImportError:
            print("threadpoolctl unavailable; --threads ignored", file=sys.stderr)

    if args.command == "mesh":
        return _cmd_mesh(args)
    if args.command == "table1":
        return _cmd_table1()
    if args.command == "train":
        return _cmd_train(args)
    if args.command == "eval":
        return _cmd_eval(args)
    if args.command == "stability":
        return _cmd_stability(args)
    if args.command == "uat":
        return _cmd_uat(args)
    if args.command == "compare-random":
        return _cmd_compare_random(args)
    if args.command == "sweep":
        return _cmd_sweep(args)
    return 2


def _cmd_mesh(args) -> int:
    if args.mesh_command == "gen":
        builder = mesh.build_interval if args.kind == "interval" else mesh.build_square
        m = builder(args.n, (args.lo, args.hi))
        mesh.save_mesh(m, args.out)
        print(f"wrote {args.out}: dim={m.dim} nodes={m.n_nodes} elements={m.n_elements}")
        return 0
    m = mesh.load_mesh(args.path)
    dof = mesh.build_dof_map(m)
    graph = sparsity.build_basis_graph(m, dof)
    connected = sparsity.is_connected(graph)
    print(f"{args.path}: dim={m.dim} nodes={m.n_nodes} elements={m.n_elements} "
          f"boundary={len(m.boundary_nodes)} N_h={dof.N_h} h_max={m.h_max:.6g} "
          f"shape_regularity={m.shape_regularity:.3f} connected={connected}")
    return 0 if connected else 1


def _cmd_table1() -> int:
    failures = 0
    print("N_h,c_level,weights,sparsity,expected_weights,expected_sparsity,match")
    for N_h, c, nnz, meas, exp_nnz, exp_s in experiments.compute_table1():
        ok = nnz == exp_nnz and abs(meas - exp_s) < 5e-5
        failures += 0 if ok else 1
        print(f"{N_h},{c},{nnz},{meas:.4f},{exp_nnz},{exp_s:.4f},{'ok' if ok else 'MISMATCH'}")
    return 0 if failures == 0 else 1


def _cmd_train(args) -> int:
    config = build_train_config(args)
    try:
        meta = experiments.run_train(config, args.out)
    except experiments.DenseRefusal as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(meta["final"], indent=2))
    print(f"artifacts in {args.out}")
    return 0


def _cmd_eval(args) -> int:
    out = experiments.run_eval(args.rundir, args.test_seed, outpath=args.out,
                               h1_refined_samples=args.h1_refined_samples)
    print(json.dumps(out["metrics"], indent=2))
    return 0


def _cmd_stability(args) -> int:
    ns = [int(tok) for tok in args.grid_ns.split(",") if tok]
    experiments.run_stability(ns, args.c_level, args.trials, args.seed,
                              outpath=args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_uat(args) -> int:
    report = experiments.run_uat(args.n, args.samples, args.seed, outpath=args.out)
    print(json.dumps(report, indent=2))
    return 0


def _cmd_compare_random(args) -> int:
    config = build_train_config(args)
    result = experiments.run_compare_random(config, n_seeds=args.random_seeds,
                                            outpath=args.out)
    print(f"fem={result['fem_pattern_test_rel_l2']:.6e} "
          f"random_mean={result['random_mean']:.6e} "
          f"ratio={result['ratio_random_over_fem']:.2f}")
    return 0


def _cmd_sweep(args) -> int:
    base = build_train_config(args)
    resolutions = [int(tok) for tok in args.resolutions.split(",") if tok]
    c_levels = [int(tok) for tok in args.c_levels.split(",") if tok]
    rows = experiments.run_sweep(base, resolutions, c_levels, args.out)
    for n, c, err, params in rows:
        print(f"n={n} c={c} test_rel_l2={err:.6e} params={params}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
