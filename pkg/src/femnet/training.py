"""Unsupervised training on the weak-form residual.

The network maps a (scaled) load vector to predicted finite element
coefficients; the loss is the mean Euclidean norm of the Galerkin residual
over a Monte Carlo sample of forcings, so no solution data is ever needed.
Its global minimum is the coefficient map of the direct solver.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import fem, network, sparsity
from .fem import FemSystem, LoadAssembler
from .mesh import DofMap, Mesh, build_dof_map, build_interval, build_square, load_mesh


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the last finite state."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


# ---------------------------------------------------------------------------
# forcing samplers
# ---------------------------------------------------------------------------

_DEFAULT_RANGES = {
    "trig2d": {"m": (0.0, 1.0), "n": (0.0, np.pi)},
    "trig1d": {"m": (0.0, 1.0), "n": (0.0, np.pi)},
    "helmholtz2d": {"a": (2, 10), "k": (1.0, 5.0)},
    "proto1d": {"w": (0.0, 1.0)},
}


@dataclass
class ForcingSampler:
    """Draws forcing parameters and evaluates the forcing at quadrature points."""

    family: str
    rng: np.random.Generator
    ranges: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in _DEFAULT_RANGES:
            raise ValueError(f"unknown forcing family {self.family!r}")
        merged = dict(_DEFAULT_RANGES[self.family])
        merged.update(self.ranges)
        self.ranges = merged

    def sample_omegas(self, count: int) -> np.ndarray:
        r = self.ranges
        if self.family == "trig2d":
            m = self.rng.uniform(*r["m"], size=(count, 2))
            n = self.rng.uniform(*r["n"], size=(count, 4))
            return np.concatenate([m, n], axis=1)
        if self.family == "trig1d":
            m = self.rng.uniform(*r["m"], size=(count, 2))
            n = self.rng.uniform(*r["n"], size=(count, 2))
            return np.concatenate([m, n], axis=1)
        if self.family == "helmholtz2d":
            a = self.rng.integers(r["a"][0], r["a"][1] + 1, size=(count, 2)).astype(np.float64)
            k = self.rng.uniform(*r["k"], size=(count, 1))
            return np.concatenate([a, k], axis=1)
        w = self.rng.uniform(*r["w"], size=(count, 4))
        return w

    def values(self, omegas: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Forcing values, shape (batch, n_points)."""
        o = np.atleast_2d(omegas)
        if self.family == "trig2d":
            x, y = points[:, 0], points[:, 1]
            return (o[:, 0:1] * np.sin(np.outer(o[:, 2], x) + np.outer(o[:, 3], y))
                    + o[:, 1:2] * np.cos(np.outer(o[:, 4], x) + np.outer(o[:, 5], y)))
        if self.family == "trig1d":
            x = points[:, 0]
            return (o[:, 0:1] * np.sin(np.outer(o[:, 2], x))
                    + o[:, 1:2] * np.cos(np.outer(o[:, 3], x)))
        if self.family == "helmholtz2d":
            x, y = points[:, 0], points[:, 1]
            a1, a2, k = o[:, 0], o[:, 1], o[:, 2]
            amp = k ** 2 - (a1 * np.pi) ** 2 - (a2 * np.pi) ** 2
            return amp[:, None] * np.sin(np.outer(a1 * np.pi, x)) * np.sin(np.outer(a2 * np.pi, y))
        x = points[:, 0]
        return (o[:, 0:1] * np.sin(2 * np.pi * np.outer(o[:, 1], x))
                + o[:, 2:3] * np.cos(2 * np.pi * np.outer(o[:, 3], x)))


@dataclass
class Sample:
    """One forcing draw: parameters, assembled load, wavenumber if any."""

    omega: np.ndarray
    F: np.ndarray
    k: float | None = None


@dataclass
class Batch:
    omegas: np.ndarray       # (B, P)
    F: np.ndarray            # (B, N_h)
    k: np.ndarray | None = None

    def __len__(self):
        return self.F.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(omegas=self.omegas[idx], F=self.F[idx],
                     k=None if self.k is None else self.k[idx])

    def to_samples(self):
        return [Sample(omega=self.omegas[b], F=self.F[b],
                       k=None if self.k is None else float(self.k[b]))
                for b in range(len(self))]


def sample_batch(sampler: ForcingSampler, mesh: Mesh, dof: DofMap, count: int):
    """Draw `count` forcings and assemble their load vectors."""
    if count < 1:
        raise ValueError("count must be >= 1")
    assembler = LoadAssembler(mesh, dof)
    return make_batch(sampler, assembler, count).to_samples()


def make_batch(sampler: ForcingSampler, assembler: LoadAssembler, count: int) -> Batch:
    omegas = sampler.sample_omegas(count)
    vals = sampler.values(omegas, assembler.points)
    F = assembler.assemble_values(vals)
    k = omegas[:, 2] if sampler.family == "helmholtz2d" else None
    return Batch(omegas=omegas, F=F, k=k)


# ---------------------------------------------------------------------------
# residual operators (one per PDE family)
# ---------------------------------------------------------------------------

class LinearResidual:
    """r = K alpha - F for families whose system matrix is shared."""

    def __init__(self, K):
        self.K = K
        # small systems run the residual through BLAS instead of csr matvecs
        self._KT = K.T.toarray() if K.shape[0] <= 2048 else None

    def residual(self, alpha, batch):
        if self._KT is not None:
            return alpha @ self._KT - batch.F
        return alpha @ self.K.T - batch.F

    def vjp(self, s, alpha, batch):
        if self._KT is not None:
            return s @ self._KT.T
        return s @ self.K

    def solve(self, batch):
        solve = fem.factorized(self.K)
        return solve(batch.F.T).T


class HelmholtzResidual:
    """r = (-stiff + k^2 M) alpha - F with the per-sample wavenumber."""

    def __init__(self, stiff, M):
        self.stiff = stiff
        self.M = M

    def residual(self, alpha, batch):
        k2 = batch.k[:, None] ** 2
        return -(alpha @ self.stiff.T) + k2 * (alpha @ self.M.T) - batch.F

    def vjp(self, s, alpha, batch):
        k2 = batch.k[:, None] ** 2
        return -(s @ self.stiff) + k2 * (s @ self.M)

    def solve(self, batch):
        out = np.empty_like(batch.F)
        for b in range(len(batch)):
            A = fem.helmholtz_matrix(self.stiff, self.M, float(batch.k[b]))
            out[b] = fem.solve_direct(A, batch.F[b]).alpha
        return out


class BurgersResidual:
    """r = nu stiff alpha + N(alpha) - F with the exact convection tensor."""

    def __init__(self, system: FemSystem):
        self.system = system

    def residual(self, alpha, batch):
        return (self.system.nu * (alpha @ self.system.stiff_only.T)
                + self.system.T.apply(alpha) - batch.F)

    def vjp(self, s, alpha, batch):
        return self.system.nu * (s @ self.system.stiff_only) + self.system.T.vjp(s, alpha)

    def solve(self, batch):
        out = np.empty_like(batch.F)
        for b in range(len(batch)):
            out[b] = fem.newton_burgers(self.system, batch.F[b]).alpha
        return out


# ---------------------------------------------------------------------------
# problems: PDE family + mesh + sampler wired together
# ---------------------------------------------------------------------------

FAMILIES = ("poisson2d", "adr2d", "helmholtz2d", "burgers1d", "poisson-unstructured")


@dataclass
class Problem:
    family: str
    mesh: Mesh
    dof: DofMap
    system: FemSystem
    op: object
    forcing_family: str
    assembler: LoadAssembler
    graph: sparsity.BasisGraph


def make_problem(family: str, n: int | None = None, mesh_path=None,
                 domain=(-1.0, 1.0), nu: float = 0.1) -> Problem:
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; choose from {FAMILIES}")
    if family == "poisson-unstructured":
        msh = load_mesh(mesh_path)
    elif family == "burgers1d":
        msh = build_interval(n, domain)
    else:
        msh = build_square(n, domain)
    dof = build_dof_map(msh)

    if family in ("poisson2d", "poisson-unstructured"):
        system = fem.assemble_elliptic(msh, dof, fem.CoefficientSet.constant(2))
        op = LinearResidual(system.K)
        forcing = "trig2d"
    elif family == "adr2d":
        coeffs = fem.CoefficientSet.constant(2, a=0.1, b=(-1.0, 0.0), c=20.0)
        system = fem.assemble_elliptic(msh, dof, coeffs)
        op = LinearResidual(system.K)
        forcing = "trig2d"
    elif family == "helmholtz2d":
        stiff, M = fem.assemble_helmholtz(msh, dof)
        system = fem.FemSystem(K=fem.helmholtz_matrix(stiff, M, 0.0), M=M,
                               stiff_only=stiff, dof=dof)
        op = HelmholtzResidual(stiff, M)
        forcing = "helmholtz2d"
    else:
        system = fem.assemble_burgers(msh, dof, nu)
        op = BurgersResidual(system)
        forcing = "trig1d"

    return Problem(family=family, mesh=msh, dof=dof, system=system, op=op,
                   forcing_family=forcing, assembler=LoadAssembler(msh, dof),
                   graph=sparsity.build_basis_graph(msh, dof))


# ---------------------------------------------------------------------------
# loss and optimizer
# ---------------------------------------------------------------------------

def loss(net: network.SparseNetwork, batch: Batch, op, input_scale: float = 1.0) -> float:
    """Mean residual norm (1/M) sum_j ||r(omega_j)||_2."""
    alpha_hat, _ = network.forward(net, batch.F / input_scale)
    r = op.residual(alpha_hat, batch)
    return float(np.linalg.norm(r, axis=1).mean())


def loss_and_grads(net, batch, op, input_scale=1.0):
    alpha_hat, cache = network.forward(net, batch.F / input_scale)
    r = op.residual(alpha_hat, batch)
    norms = np.linalg.norm(r, axis=1)
    value = float(norms.mean())
    safe = np.where(norms > 0, norms, 1.0)
    s = r / (safe[:, None] * len(batch))
    grad_alpha = op.vjp(s, alpha_hat, batch)
    return value, network.backward(net, cache, grad_alpha)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_network(cls, net: network.SparseNetwork) -> "AdamState":
        m = [(np.zeros_like(l.values), np.zeros_like(l.bias)) for l in net.layers]
        v = [(np.zeros_like(l.values), np.zeros_like(l.bias)) for l in net.layers]
        return cls(m=m, v=v)


def adam_step(net: network.SparseNetwork, state: AdamState, grads, lr: float) -> None:
    """Standard Adam update in place; moments stay congruent to the pattern."""
    state.step += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for layer, (gm, gb), mom, vel in zip(net.layers, grads, state.m, state.v):
        for target, g, m, v in ((layer.values, gm, mom[0], vel[0]),
                                (layer.bias, gb, mom[1], vel[1])):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            target -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    net.bump()


def cosine_lr(step: int, total: int, lr0: float = 1e-3, lr_min: float = 1e-6) -> float:
    if total <= 0:
        return lr_min
    t = min(max(step, 0), total)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + np.cos(np.pi * t / total))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

#: keys accepted in config files and as CLI flags
CONFIG_KEYS = ("family", "n", "mesh", "c_level", "match_c_level", "layers",
               "activation", "epochs", "lr0", "lr_min", "samples_train",
               "samples_test", "seed", "deterministic", "batch", "nu",
               "eval_interval", "resample_each_epoch", "dense_param_cap")


@dataclass
class TrainConfig:
    family: str = "poisson2d"
    n: int = 16
    mesh: str | None = None
    c_level: int = 3            # 0 = dense, -1 = random matched to match_c_level
    match_c_level: int = 4
    layers: int = 6
    activation: str = "swish"
    epochs: int = 2000
    lr0: float = 1e-3
    lr_min: float = 1e-6
    samples_train: int = 3000
    samples_test: int = 3000
    seed: int = 0
    deterministic: bool = True
    batch: int | None = None    # None: full batch up to 500 samples, else 512
    nu: float = 0.1
    eval_interval: int = 50
    resample_each_epoch: bool = False
    dense_param_cap: int = 2_000_000_000  # refuse dense nets above this byte estimate

    def batch_size(self) -> int:
        if self.batch is not None:
            return self.batch
        # smaller minibatches take more optimizer steps per epoch, which is
        # what drives the residual down at a fixed epoch budget
        return self.samples_train if self.samples_train <= 500 else 128

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class TrainState:
    net: network.SparseNetwork
    adam: AdamState
    problem: Problem
    config: TrainConfig
    input_scale: float
    history: list = field(default_factory=list)  # (epoch, loss, train_err, test_err, lr, seconds)
    train_batch: Batch | None = None
    test_batch: Batch | None = None
    oracle_train: np.ndarray | None = None
    oracle_test: np.ndarray | None = None


def choose_pattern(problem: Problem, c_level: int, match_c_level: int,
                   rng: np.random.Generator) -> sparsity.SparsityPattern:
    if c_level > 0:
        return sparsity.build_pattern(problem.graph, c_level)
    if c_level == 0:
        return sparsity.full_pattern(problem.dof.N_h)
    matched = sparsity.build_pattern(problem.graph, match_c_level)
    return sparsity.random_pattern(problem.dof.N_h, matched.nnz, rng)


def batched_rel_l2(pred: np.ndarray, ref: np.ndarray, M) -> np.ndarray:
    diff = pred - ref
    num = np.einsum("bi,bi->b", diff @ M.T, diff)
    den = np.einsum("bi,bi->b", ref @ M.T, ref)
    return np.sqrt(np.maximum(num, 0.0) / den)


def evaluate(net: network.SparseNetwork, batch: Batch, oracle: np.ndarray,
             system: FemSystem, input_scale: float = 1.0) -> dict:
    """Error statistics of the network against precomputed oracle solutions."""
    alpha_hat, _ = network.forward(net, batch.F / input_scale)
    l2 = batched_rel_l2(alpha_hat, oracle, system.M)
    h1 = batched_rel_l2(alpha_hat, oracle, system.stiff_only)
    return {
        "rel_l2_mean": float(l2.mean()),
        "rel_l2_p50": float(np.percentile(l2, 50)),
        "rel_l2_p90": float(np.percentile(l2, 90)),
        "rel_l2_max": float(l2.max()),
        "rel_h1_semi_mean": float(h1.mean()),
    }


def train(config: TrainConfig, problem: Problem | None = None,
          pattern: sparsity.SparsityPattern | None = None) -> TrainState:
    """Full training run: fixed sample sets, Adam with cosine decay.

    Deterministic given the seed: data, init, and shuffling use separate
    child streams so dense and sparse runs consume identical forcings.
    """
    if problem is None:
        problem = make_problem(config.family, n=config.n, mesh_path=config.mesh,
                               nu=config.nu)
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    rng_data, rng_pattern, rng_init, rng_shuffle = (np.random.default_rng(s) for s in seeds)

    sampler = ForcingSampler(problem.forcing_family, rng_data)
    train_batch = make_batch(sampler, problem.assembler, config.samples_train)
    test_batch = make_batch(sampler, problem.assembler, config.samples_test)

    if pattern is None:
        pattern = choose_pattern(problem, config.c_level, config.match_c_level, rng_pattern)
    net = network.init(pattern, config.layers, config.activation, rng_init)
    adam = AdamState.for_network(net)

    # one global scalar brings the load vectors (whose entries scale like the
    # element measure) to unit order; stored with every checkpoint
    max_abs = float(np.abs(train_batch.F).max())
    input_scale = max_abs if max_abs > 0 else 1.0
    oracle_train = problem.op.solve(train_batch)
    oracle_test = problem.op.solve(test_batch)

    state = TrainState(net=net, adam=adam, problem=problem, config=config,
                       input_scale=input_scale, train_batch=train_batch,
                       test_batch=test_batch, oracle_train=oracle_train,
                       oracle_test=oracle_test)

    batch_size = config.batch_size()
    n_train = len(train_batch)
    t0 = time.perf_counter()
    snapshot = _parameter_snapshot(net)

    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.lr0, config.lr_min)
        if config.resample_each_epoch:
            train_batch = make_batch(sampler, problem.assembler, config.samples_train)
            state.train_batch = train_batch
            state.oracle_train = problem.op.solve(train_batch)
        order = rng_shuffle.permutation(n_train) if batch_size < n_train else np.arange(n_train)
        epoch_loss = 0.0
        seen = 0
        for lo in range(0, n_train, batch_size):
            part = train_batch.subset(order[lo:lo + batch_size])
            value, grads = loss_and_grads(net, part, problem.op, input_scale)
            if not np.isfinite(value):
                with np.errstate(all="ignore"):
                    _record(state, epoch, np.nan, lr, t0)
                # the snapshot predates the step that poisoned the loss
                _restore_parameters(net, snapshot)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}; parameters rolled "
                    "back to the last finite step", state=state)
            snapshot = _parameter_snapshot(net)
            adam_step(net, adam, grads, lr)
            epoch_loss += value * len(part)
            seen += len(part)
        epoch_loss /= seen
        if epoch % config.eval_interval == 0 or epoch == config.epochs - 1:
            _record(state, epoch, epoch_loss, lr, t0)
    return state


def _parameter_snapshot(net):
    return [(layer.values.copy(), layer.bias.copy()) for layer in net.layers]


def _restore_parameters(net, snapshot):
    for layer, (values, bias) in zip(net.layers, snapshot):
        layer.values[:] = values
        layer.bias[:] = bias
    net.bump()


def _record(state: TrainState, epoch: int, epoch_loss: float, lr: float, t0: float):
    net, scale = state.net, state.input_scale
    train_err = evaluate(net, state.train_batch, state.oracle_train,
                         state.problem.system, scale)["rel_l2_mean"]
    test_err = evaluate(net, state.test_batch, state.oracle_test,
                        state.problem.system, scale)["rel_l2_mean"]
    seconds = 0.0 if state.config.deterministic else time.perf_counter() - t0
    state.history.append((epoch, epoch_loss, train_err, test_err, lr, seconds))
