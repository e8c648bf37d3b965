"""Experiment drivers shared by the CLI: weight-count tables, training runs,
evaluation, stability sweeps, connectivity ablations, and report files.

Every artifact starts with a header block echoing the full configuration and
a content hash of the package sources, so a result file pins the code and
settings that produced it.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import fem, mesh, network, sparsity, stability, training, uat
from .training import TrainConfig

# weight counts for the structured unit-square grids, used as the go/no-go
# reference by cmd_table1 (row: N_h -> {c_level: count}; None = full layer)
TABLE1_REFERENCE = {
    25: {1: 137, 4: 555, 8: 625},
    100: {1: 622, 4: 3930, 8: 8392, 15: 9970},
    900: {1: 6062, 4: 47930, 8: 149352, 15: 384860},
    2500: {1: 17102, 4: 140730, 8: 463912, 15: 1340060},
    10000: {1: 69202, 4: 586230, 8: 2009812, 15: 6251560},
}

TABLE1_SPARSITY = {
    25: {1: 0.7808, 4: 0.1120, 8: 0.0000},
    100: {1: 0.9378, 4: 0.6070, 8: 0.1608, 15: 0.0030},
    900: {1: 0.9925, 4: 0.9408, 8: 0.8156, 15: 0.5249},
    2500: {1: 0.9973, 4: 0.9775, 8: 0.9258, 15: 0.7856},
    10000: {1: 0.9993, 4: 0.9941, 8: 0.9799, 15: 0.9375},
}


def code_version() -> str:
    """Content hash over the package sources."""
    digest = hashlib.sha1()
    root = Path(__file__).parent
    for path in sorted(root.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()[:12]


def header_lines(config: dict) -> list:
    lines = [f"# code_version = {code_version()}"]
    for key in sorted(config):
        lines.append(f"# {key} = {config[key]}")
    return lines


def compute_table1():
    """Recompute every reference cell from the meshes; yields
    (N_h, c_level, nnz, sparsity, expected_nnz, expected_sparsity)."""
    for N_h, row in TABLE1_REFERENCE.items():
        n = int(round(N_h ** 0.5)) + 1
        msh = mesh.build_square(n, (0.0, 1.0))
        dof = mesh.build_dof_map(msh)
        graph = sparsity.build_basis_graph(msh, dof)
        for c_level, expected in row.items():
            pattern = sparsity.build_pattern(graph, c_level)
            measure = sparsity.sparsity_measure(pattern)
            yield (N_h, c_level, pattern.nnz, measure,
                   expected, TABLE1_SPARSITY[N_h][c_level])


def table_param_count(n: int, c_level: int, dim: int = 2, layers: int = 6):
    """Parameter total in the comparison-table convention.

    Weights are the interior-graph pattern entries; biases span every mesh
    node (boundary included), matching layer widths set to the full node
    count.  Dense layers use that full width for the weights as well.
    """
    total_nodes = (n + 1) ** dim
    if c_level == 0:
        return layers * (total_nodes * total_nodes + total_nodes)
    builder = mesh.build_square if dim == 2 else mesh.build_interval
    msh = builder(n)
    dof = mesh.build_dof_map(msh)
    graph = sparsity.build_basis_graph(msh, dof)
    pattern = sparsity.build_pattern(graph, c_level)
    return layers * (pattern.nnz + total_nodes)


# ---------------------------------------------------------------------------
# training artifacts
# ---------------------------------------------------------------------------

HISTORY_COLUMNS = "epoch,loss,train_rel_l2,test_rel_l2,lr,seconds"


def dense_bytes_estimate(N_h: int, layers: int) -> int:
    return 8 * layers * (N_h * N_h + N_h)


class DenseRefusal(RuntimeError):
    """Dense layer width exceeds the configured memory cap."""


def check_dense_cap(config: TrainConfig, N_h: int) -> None:
    if config.c_level == 0:
        estimate = dense_bytes_estimate(N_h, config.layers)
        if estimate > config.dense_param_cap:
            raise DenseRefusal(
                f"dense mode at N_h={N_h} needs about {estimate:,} bytes of "
                f"parameters, above the cap of {config.dense_param_cap:,}; "
                "use a sparse c_level or raise dense_param_cap")


def run_train(config: TrainConfig, outdir) -> dict:
    """Train per config and write checkpoint, history CSV, and meta JSON."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    problem = training.make_problem(config.family, n=config.n,
                                    mesh_path=config.mesh, nu=config.nu)
    check_dense_cap(config, problem.dof.N_h)

    t0 = time.perf_counter()
    state = training.train(config, problem=problem)
    elapsed = time.perf_counter() - t0

    ckpt = outdir / "checkpoint.snet"
    network.save_network(state.net, ckpt)
    hist = outdir / "history.csv"
    with open(hist, "w", encoding="utf-8") as fh:
        fh.write("\n".join(header_lines(config.as_dict())) + "\n")
        fh.write(HISTORY_COLUMNS + "\n")
        for row in state.history:
            fh.write("{},{:.10e},{:.10e},{:.10e},{:.6e},{:.3f}\n".format(*row))
    meta = {
        "config": config.as_dict(),
        "input_scale": state.input_scale,
        "N_h": problem.dof.N_h,
        "param_count": network.param_count(state.net).__dict__,
        "code_version": code_version(),
        "wallclock_seconds": None if config.deterministic else elapsed,
        "final": {"epoch": state.history[-1][0], "loss": state.history[-1][1],
                  "train_rel_l2": state.history[-1][2],
                  "test_rel_l2": state.history[-1][3]},
    }
    with open(outdir / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
    return meta


def load_run(rundir):
    """Checkpoint + meta pair from a run_train output directory."""
    rundir = Path(rundir)
    with open(rundir / "meta.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    net = network.load_network(rundir / "checkpoint.snet")
    return net, meta


def refined_h1_error(problem, alpha_hat: np.ndarray, omegas: np.ndarray,
                     factor: int = 4) -> float:
    """H1-seminorm error against a same-family reference at factor-times the
    resolution, with the coarse prediction interpolated to the fine nodes.

    Supports the structured linear 2D families and Burgers; the per-sample
    Helmholtz matrices make the refined reference disproportionate there.
    """
    if problem.mesh.grid_n is None:
        raise ValueError("refined reference needs a structured mesh")
    coarse = problem.mesh
    n_fine = coarse.grid_n * factor
    lo = coarse.nodes.min(axis=0)
    hi = coarse.nodes.max(axis=0)
    if problem.family == "burgers1d":
        fine = mesh.build_interval(n_fine, (lo[0], hi[0]))
    else:
        fine = mesh.build_square(n_fine, (lo[0], hi[0]))
    dof_f = mesh.build_dof_map(fine)
    assembler = fem.LoadAssembler(fine, dof_f)
    sampler = training.ForcingSampler(problem.forcing_family,
                                      np.random.default_rng(0))
    values = sampler.values(omegas, assembler.points)
    F_fine = assembler.assemble_values(values)

    if problem.family == "burgers1d":
        sys_f = fem.assemble_burgers(fine, dof_f, problem.system.nu)
        ref = np.stack([fem.newton_burgers(sys_f, F_fine[b]).alpha
                        for b in range(F_fine.shape[0])])
        stiff = sys_f.stiff_only
    elif problem.family == "adr2d":
        coeffs = fem.CoefficientSet.constant(2, a=0.1, b=(-1.0, 0.0), c=20.0)
        sys_f = fem.assemble_elliptic(fine, dof_f, coeffs)
        ref = fem.factorized(sys_f.K)(F_fine.T).T
        stiff = sys_f.stiff_only
    elif problem.family == "poisson2d":
        sys_f = fem.assemble_elliptic(fine, dof_f, fem.CoefficientSet.constant(2))
        ref = fem.factorized(sys_f.K)(F_fine.T).T
        stiff = sys_f.stiff_only
    else:
        raise ValueError(f"refined reference not supported for {problem.family}")

    fine_pts = fine.nodes[dof_f.interior_nodes]
    interp = np.stack([fem.evaluate_p1(coarse, problem.dof, alpha_hat[b], fine_pts)
                       for b in range(alpha_hat.shape[0])])
    errs = training.batched_rel_l2(interp, ref, stiff)
    return float(errs.mean())


def run_eval(rundir, test_seed: int, outpath=None, h1_refined_samples: int = 0) -> dict:
    """Evaluate a checkpoint against freshly sampled test forcings."""
    net, meta = load_run(rundir)
    config = TrainConfig(**meta["config"])
    problem = training.make_problem(config.family, n=config.n,
                                    mesh_path=config.mesh, nu=config.nu)
    sampler = training.ForcingSampler(problem.forcing_family,
                                      np.random.default_rng(test_seed))
    batch = training.make_batch(sampler, problem.assembler, config.samples_test)
    oracle = problem.op.solve(batch)
    metrics = training.evaluate(net, batch, oracle, problem.system,
                                meta["input_scale"])
    # zero-predictor reference: rel error of predicting the zero function is 1
    zero = np.zeros_like(oracle)
    metrics["zero_predictor_rel_l2"] = float(
        training.batched_rel_l2(zero, oracle, problem.system.M).mean())
    if h1_refined_samples > 0 and problem.family != "helmholtz2d":
        alpha_hat, _ = network.forward(net, batch.F / meta["input_scale"])
        k = min(h1_refined_samples, len(batch))
        metrics["rel_h1_semi_refined"] = refined_h1_error(
            problem, alpha_hat[:k], batch.omegas[:k])
    out = {"config": meta["config"], "test_seed": test_seed,
           "code_version": code_version(), "metrics": metrics}
    if outpath is not None:
        with open(outpath, "w", encoding="utf-8") as fh:
            json.dump(out, fh, indent=2)
    return out


# ---------------------------------------------------------------------------
# stability sweep
# ---------------------------------------------------------------------------

def stability_inputs(n: int, count: int, seed: int):
    """Load-vector inputs for the sensitivity protocol, normalized like
    training inputs."""
    msh = mesh.build_square(n)
    dof = mesh.build_dof_map(msh)
    assembler = fem.LoadAssembler(msh, dof)
    sampler = training.ForcingSampler("trig2d", np.random.default_rng(seed))
    batch = training.make_batch(sampler, assembler, count)
    scale = np.abs(batch.F).max()
    return batch.F / (scale if scale > 0 else 1.0), msh, dof


def run_stability(grid_ns, c_level: int, trials: int, seed: int, outpath=None,
                  weight_std: float = 1.0, layers: int = 6,
                  activation: str = "swish") -> list:
    """Gaussian-weight sensitivity across resolutions, dense and sparse."""
    rows = []
    reports = []
    for n in grid_ns:
        F, msh, dof = stability_inputs(n, trials, seed)
        for mode_c in (0, c_level):
            if mode_c == 0:
                pattern = sparsity.full_pattern(dof.N_h)
                label = "dense"
            else:
                graph = sparsity.build_basis_graph(msh, dof)
                pattern = sparsity.build_pattern(graph, mode_c)
                label = f"sparse-c{mode_c}"
            net = network.init(pattern, layers, activation,
                               np.random.default_rng(seed + 1), weight_std=weight_std)
            rep = stability.sensitivity(net, F, 0.01, trials,
                                        np.random.default_rng(seed + 2))
            reports.append((label, rep))
            for l, s in enumerate(rep.spectral_norms, start=1):
                rows.append(f"{rep.N_h},untrained-gaussian,{label},{l},{s:.6f}")
            rows.append(f"{rep.N_h},untrained-gaussian,{label},summary,"
                        f"c_s_bound={rep.bound:.6e},c_s_hat_mean={rep.c_s_hat_mean:.6e},"
                        f"c_s_hat_std={rep.c_s_hat_std:.6e}")
    if outpath is not None:
        with open(outpath, "w", encoding="utf-8") as fh:
            fh.write("\n".join(header_lines({"grid_ns": list(grid_ns), "c_level": c_level,
                                             "trials": trials, "seed": seed})) + "\n")
            fh.write("N_h,mode,pattern,layer,spectral_norm\n")
            fh.write("\n".join(rows) + "\n")
    return reports


# ---------------------------------------------------------------------------
# universal-approximation report
# ---------------------------------------------------------------------------

def run_uat(n: int, samples: int, seed: int, outpath=None) -> dict:
    """Realize the Poisson solution operator exactly with ReLU layers and
    report factor counts, structural checks, and deviations."""
    msh = mesh.build_square(n, (0.0, 1.0))
    dof = mesh.build_dof_map(msh)
    graph = sparsity.build_basis_graph(msh, dof)
    system = fem.assemble_elliptic(msh, dof, fem.CoefficientSet.constant(2))
    K = system.K.toarray()
    Minv = np.linalg.inv(K)

    fz = uat.gsparse_factorization(Minv, graph)
    sampler = training.ForcingSampler("trig2d", np.random.default_rng(seed))
    batch = training.make_batch(sampler, fem.LoadAssembler(msh, dof), samples)
    radius = float(np.abs(batch.F).max()) * 1.01
    net = uat.realize_relu(Minv, graph, radius)

    out, _ = network.forward(net, batch.F)
    ref = fem.factorized(system.K)(batch.F.T).T
    deviation = float(np.abs(out - ref).max() / np.abs(ref).max())
    pattern = sparsity.build_pattern(graph, 1)
    gsparse_ok = all(uat.is_gsparse(layer.to_dense(), graph) for layer in net.layers)
    report = {
        "N_h": dof.N_h,
        "factor_count": fz.depth,
        "depth": net.depth,
        "product_checksum": fz.product_checksum,
        "max_rel_deviation": deviation,
        "gsparse_check": bool(gsparse_ok),
        "box_radius": radius,
        "samples": samples,
        "pattern_nnz": pattern.nnz,
        "code_version": code_version(),
    }
    if outpath is not None:
        with open(outpath, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2)
    return report


# ---------------------------------------------------------------------------
# connectivity ablation
# ---------------------------------------------------------------------------

def run_compare_random(config: TrainConfig, n_seeds: int = 10, outpath=None) -> dict:
    """FEM-derived pattern versus nnz-matched random patterns.

    All runs share the data seed (identical forcings); only the pattern and
    its seed vary.  Reports the per-seed errors and the error ratio.
    """
    problem = training.make_problem(config.family, n=config.n, nu=config.nu)
    matched = sparsity.build_pattern(problem.graph, config.match_c_level)

    fem_config = replace(config, c_level=config.match_c_level)
    fem_state = training.train(fem_config, problem=problem)
    fem_err = fem_state.history[-1][3]

    random_errs = []
    for s in range(n_seeds):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1000 + s]))
        pattern = sparsity.random_pattern(problem.dof.N_h, matched.nnz, rng)
        rand_config = replace(config, c_level=-1)
        state = training.train(rand_config, problem=problem, pattern=pattern)
        random_errs.append(state.history[-1][3])

    result = {
        "config": config.as_dict(),
        "nnz": matched.nnz,
        "fem_pattern_test_rel_l2": fem_err,
        "random_test_rel_l2": random_errs,
        "random_mean": float(np.mean(random_errs)),
        "ratio_random_over_fem": float(np.mean(random_errs) / fem_err),
        "code_version": code_version(),
    }
    if outpath is not None:
        with open(outpath, "w", encoding="utf-8") as fh:
            lines = header_lines(config.as_dict())
            fh.write("\n".join(lines) + "\n")
            fh.write("pattern,seed,test_rel_l2\n")
            fh.write(f"fem-c{config.match_c_level},-,{fem_err:.8e}\n")
            for s, e in enumerate(random_errs):
                fh.write(f"random,{s},{e:.8e}\n")
            fh.write(f"# ratio_random_over_fem = {result['ratio_random_over_fem']:.3f}\n")
    return result


def run_sweep(base: TrainConfig, resolutions, c_levels, outdir) -> list:
    """Train a grid of (n, c_level) settings and collect final metrics."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for n in resolutions:
        for c in c_levels:
            config = replace(base, n=n, c_level=c)
            rundir = outdir / f"{config.family}_n{n}_c{c}"
            meta = run_train(config, rundir)
            rows.append((n, c, meta["final"]["test_rel_l2"],
                         meta["param_count"]["weights"] + meta["param_count"]["biases"]))
    with open(outdir / "sweep.csv", "w", encoding="utf-8") as fh:
        fh.write("\n".join(header_lines(base.as_dict())) + "\n")
        fh.write("n,c_level,test_rel_l2,params\n")
        for row in rows:
            fh.write(f"{row[0]},{row[1]},{row[2]:.8e},{row[3]}\n")
    return rows
