"""Constructive approximation of linear maps by graph-sparse networks.

Any invertible matrix factors into transvections E_ij(t) = I + t e_ij and one
diagonal matrix; a transvection whose index pair is not a graph edge expands
along a shortest path through the commutator identity

    E_ij(s t) = E_ik(s) E_kj(t) E_ik(-s) E_kj(-t),

so on a connected graph every factor can be made G-sparse (nonzero off the
diagonal only on edges).  Chaining the factors as network layers realizes
x -> M x exactly with ReLU, and to arbitrary accuracy with any activation
that is C^1 with nonzero slope somewhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sparsity
from .network import SparseLayer, SparseNetwork, _sigmoid
from .network import forward as _net_forward
from .sparsity import BasisGraph, SparsityPattern


class FactorizationFailure(ValueError):
    """Numerically singular input: a pivot fell below tolerance."""


class NotExpandable(ValueError):
    """The graph is disconnected, so off-block transvections are unreachable."""


class RealizationTooDeep(RuntimeError):
    """The fused factor chain exceeds the layer cap."""


class ToleranceUnreachable(RuntimeError):
    def __init__(self, message, achieved):
        super().__init__(message)
        self.achieved = achieved


@dataclass(frozen=True)
class ElementaryFactor:
    """Either a transvection (i, j, t) or an invertible diagonal."""

    kind: str                     # "transvection" | "diagonal"
    i: int = -1
    j: int = -1
    t: float = 0.0
    d: np.ndarray | None = None

    @classmethod
    def transvection(cls, i, j, t) -> "ElementaryFactor":
        if i == j:
            raise ValueError("transvection indices must differ")
        return cls(kind="transvection", i=int(i), j=int(j), t=float(t))

    @classmethod
    def diagonal(cls, d) -> "ElementaryFactor":
        d = np.asarray(d, dtype=np.float64)
        if (d == 0).any():
            raise ValueError("diagonal factor must be invertible")
        return cls(kind="diagonal", d=d)

    def inverse(self) -> "ElementaryFactor":
        if self.kind == "transvection":
            return ElementaryFactor.transvection(self.i, self.j, -self.t)
        return ElementaryFactor.diagonal(1.0 / self.d)

    def to_dense(self, n: int) -> np.ndarray:
        if self.kind == "transvection":
            E = np.eye(n)
            E[self.i, self.j] = self.t
            return E
        return np.diag(self.d)


def transvection_dense(n: int, i: int, j: int, t: float) -> np.ndarray:
    return ElementaryFactor.transvection(i, j, t).to_dense(n)


def factor_elementary(M: np.ndarray, pivot_tol: float = 1e-10) -> list:
    """Gauss-Jordan factorization of an invertible matrix into transvections
    followed by one diagonal factor; the ordered product equals M.

    Row exchanges are realized inside the group as the signed-swap triple
    E_kr(1) E_rk(-1) E_kr(1); the resulting signs land in the final diagonal.
    """
    A = np.array(M, dtype=np.float64)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("matrix must be square")
    scale = np.abs(A).max()
    if scale == 0:
        raise FactorizationFailure("zero matrix")
    ops = []

    def row_op(i, j, t):
        # left-multiply by E_ij(t): row_i += t * row_j
        A[i] += t * A[j]
        ops.append(ElementaryFactor.transvection(i, j, t))

    for k in range(n):
        r = k + int(np.argmax(np.abs(A[k:, k])))
        if abs(A[r, k]) < pivot_tol * scale:
            raise FactorizationFailure(
                f"pivot {abs(A[r, k]):.3e} in column {k} below {pivot_tol:.0e} * max|M|")
        if r != k:
            row_op(k, r, 1.0)
            row_op(r, k, -1.0)
            row_op(k, r, 1.0)
        pivot = A[k, k]
        for i in range(n):
            if i != k and A[i, k] != 0.0:
                row_op(i, k, -A[i, k] / pivot)
    factors = [op.inverse() for op in ops]
    factors.append(ElementaryFactor.diagonal(np.diag(A).copy()))
    return factors


def product_of_factors(factors, n: int) -> np.ndarray:
    out = np.eye(n)
    for f in factors:
        out = out @ (f if isinstance(f, np.ndarray) else f.to_dense(n))
    return out


def _is_edge(graph: BasisGraph, i: int, j: int) -> bool:
    nbrs = graph.adjacency[i]
    pos = np.searchsorted(nbrs, j)
    return pos < len(nbrs) and nbrs[pos] == j


def expand_transvection(factor: ElementaryFactor, graph: BasisGraph) -> list:
    """Rewrite E_ij(t) as an ordered product of edge transvections.

    Along a shortest path v_0 .. v_l the commutator identity (with s = 1)
    peels off the last edge; the emitted chain has 3 * 2^(l-1) - 2 factors.
    """
    if factor.kind != "transvection":
        raise ValueError("only transvections expand")
    if _is_edge(graph, factor.i, factor.j):
        return [factor]
    path = sparsity.shortest_path(graph, factor.i, factor.j)
    if path is None:
        raise NotExpandable(f"no path between {factor.i} and {factor.j}")

    def rec(path, t):
        if len(path) == 2:
            return [ElementaryFactor.transvection(path[0], path[1], t)]
        head, last = path[:-1], path[-1]
        mid = path[-2]
        return (rec(head, 1.0)
                + [ElementaryFactor.transvection(mid, last, t)]
                + rec(head, -1.0)
                + [ElementaryFactor.transvection(mid, last, -t)])

    return rec(path, factor.t)


@dataclass
class GSparseFactorization:
    """Ordered dense factors, each invertible and G-sparse; their product
    reproduces the target within product_checksum (max-abs deviation)."""

    factors: list
    product_checksum: float
    n: int

    @property
    def depth(self) -> int:
        return len(self.factors)


def _allowed_mask(graph: BasisGraph) -> np.ndarray:
    n = graph.n_vertices
    allowed = np.zeros((n, n), dtype=bool)
    np.fill_diagonal(allowed, True)
    for i in range(n):
        allowed[i, graph.adjacency[i]] = True
    return allowed


def is_gsparse(M: np.ndarray, graph: BasisGraph) -> bool:
    """Structural check: exact zeros everywhere off the diagonal and edges."""
    return not M[~_allowed_mask(graph)].any()


def _elementary_gsparse_chain(M, graph, pivot_tol, invert=False):
    """Edge-sparse elementary chain whose product is M (or M^-1 if invert)."""
    elementary = []
    for f in factor_elementary(M, pivot_tol):
        if f.kind == "transvection" and not _is_edge(graph, f.i, f.j):
            elementary.extend(expand_transvection(f, graph))
        else:
            elementary.append(f)
    if invert:
        elementary = [f.inverse() for f in reversed(elementary)]
    return elementary


def _inverse_gsparse_candidate(M, graph, allowed):
    """If M^-1 is G-sparse up to rounding, return it with off-pattern entries
    clamped to exact zero.  Solution operators of assembled systems hit this
    path, and their factor chains are orders of magnitude shorter than the
    dense matrix's own."""
    try:
        inv = np.linalg.inv(M)
    except np.linalg.LinAlgError:
        return None
    off = np.abs(inv[~allowed])
    if off.size and off.max() > 1e-9 * np.abs(inv).max():
        return None
    clamped = np.where(allowed, inv, 0.0)
    return clamped


def gsparse_factorization(M: np.ndarray, graph: BasisGraph,
                          pivot_tol: float = 1e-10) -> GSparseFactorization:
    """Factor an invertible matrix into G-sparse invertible factors.

    Elementary factors are expanded along graph paths where needed, then
    greedily fused: consecutive factors keep multiplying into one matrix for
    as long as the running product stays structurally G-sparse.  When the
    inverse of M is itself G-sparse, the factorization runs on the inverse
    and the chain is inverted, which keeps the chain short.
    """
    M = np.asarray(M, dtype=np.float64)
    n = M.shape[0]
    allowed = _allowed_mask(graph)
    if not M[~allowed].any():
        factors = [M.copy()]
        return GSparseFactorization(factors=factors, product_checksum=0.0, n=n)
    if not sparsity.is_connected(graph):
        raise NotExpandable("graph is disconnected: only block-diagonal "
                            "products are representable")

    inv_candidate = _inverse_gsparse_candidate(M, graph, allowed)
    if inv_candidate is not None:
        elementary = _elementary_gsparse_chain(inv_candidate, graph, pivot_tol, invert=True)
    else:
        elementary = _elementary_gsparse_chain(M, graph, pivot_tol)

    fused = []
    P = np.eye(n)
    for f in elementary:
        if f.kind == "diagonal":
            P *= f.d[None, :]   # column scaling never leaves the pattern
            continue
        newcol = P[:, f.j] + f.t * P[:, f.i]
        if newcol[~allowed[:, f.j]].any():
            fused.append(P)
            P = np.eye(n)
            P[f.i, f.j] = f.t
        else:
            P[:, f.j] = newcol
    if not fused or not np.array_equal(P, np.eye(n)):
        fused.append(P)

    checksum = float(np.abs(product_of_factors(fused, n) - M).max())
    return GSparseFactorization(factors=fused, product_checksum=checksum, n=n)


def _equilibrated_chain(fz: GSparseFactorization):
    """Factors in application order, rescaled so every *prefix product* has
    unit-l1 rows.

    Each factor is conjugated by diagonal matrices (G-sparse, so patterns are
    unchanged): W_l = diag(e^{phi_l}) F_l diag(e^{-phi_{l-1}}).  The scales
    phi_l are chosen per row so the running product diag(e^{phi_l}) F_l...F_1
    keeps unit rows; tracking phi in log space keeps every stored entry
    bounded even when the raw prefix norms span hundreds of orders of
    magnitude.  Returns (chain, out_scale) with

        chain[m-1] @ ... @ chain[0] = diag(1/out_scale) @ (F_m ... F_1),

    so a final diagonal layer with weights out_scale restores the target map.
    """
    ordered = fz.factors[::-1]          # layer 1 applies the rightmost factor
    n = fz.n
    phi = np.zeros(n)                   # log of cumulative row scaling
    B = np.eye(n)                       # normalized prefix: diag(e^phi) F_l...F_1
    chain = []
    for F in ordered:
        W = np.zeros_like(F)
        B_new = np.empty_like(B)
        phi_new = np.empty(n)
        for i in range(n):
            support = np.nonzero(F[i])[0]
            if support.size == 0:
                raise FactorizationFailure("factor with an all-zero row")
            f_row = F[i, support]
            # factor out the dominant scale so exponents stay bounded
            c = np.max(np.log(np.abs(f_row)) - phi[support])
            coeff = f_row * np.exp(-phi[support] - c)
            row = coeff @ B[support]
            r = np.abs(row).sum()
            if r == 0.0:
                raise FactorizationFailure("prefix row vanished during equilibration")
            B_new[i] = row / r
            phi_new[i] = -(c + np.log(r))
            W[i, support] = coeff / r
        B, phi = B_new, phi_new
        chain.append(W)
    out_scale = np.exp(-phi)
    return chain, out_scale


def realize_relu(M: np.ndarray, graph: BasisGraph, box_radius: float,
                 max_layers: int = 10000) -> SparseNetwork:
    """Exact ReLU realization of x -> M x on the box ||x||_inf <= box_radius.

    Biases come from per-coordinate interval bounds of each layer's
    pre-activations, which keeps them strictly positive on the box so ReLU
    acts as the identity; a final affine layer removes the accumulated shift
    and the equilibration scaling.
    """
    if box_radius <= 0:
        raise ValueError("box_radius must be positive")
    fz = gsparse_factorization(np.asarray(M, dtype=np.float64), graph)
    if fz.depth + 1 > max_layers:
        raise RealizationTooDeep(f"{fz.depth + 1} layers exceed the cap {max_layers}")
    chain, out_scale = _equilibrated_chain(fz)
    n = fz.n
    R = float(box_radius)
    pattern = sparsity.build_pattern(graph, 1)

    # The running prefix of the equilibrated chain has unit-l1 rows, so at
    # every depth the signal part of the state is exactly within [-R, R] per
    # coordinate.  Holding the shift at the constant (1+R) therefore keeps
    # every pre-activation inside [1, 1+2R]: strictly positive, ReLU acts as
    # the identity, and no bound ever compounds with depth.
    shift = 1.0 + R
    layers = []
    for l, W in enumerate(chain):
        if l == 0:
            b = np.full(n, shift)
        else:
            b = shift * (np.ones(n) - W @ np.ones(n))
        layers.append(_to_sparse_layer(W, b, pattern))
    layers.append(_to_sparse_layer(np.diag(out_scale), -out_scale * shift, pattern))
    return SparseNetwork(layers=layers, activation="relu")


def _to_sparse_layer(W: np.ndarray, bias: np.ndarray, pattern: SparsityPattern) -> SparseLayer:
    rows = np.repeat(np.arange(pattern.n), pattern.row_sizes())
    mask = np.ones_like(W, dtype=bool)
    mask[rows, pattern.indices] = False
    if W[mask].any():
        raise ValueError("factor has entries outside the allowed pattern")
    return SparseLayer(pattern, W[rows, pattern.indices].copy(), bias.copy())


@dataclass(frozen=True)
class SmoothActivation:
    """Activation data for the general realization: the function, an
    expansion point t0 with sigma'(t0) != 0, and the values there."""

    name: str
    fn: callable
    t0: float
    value_at_t0: float
    deriv_at_t0: float

    @classmethod
    def for_name(cls, name: str, t0: float) -> "SmoothActivation":
        if name == "relu":
            raise ValueError("relu is not C^1 at 0 with nonzero slope; "
                             "use the exact ReLU realization instead")
        table = {
            "sigmoid": (_sigmoid, lambda t: _sigmoid(t) * (1 - _sigmoid(t))),
            "tanh": (np.tanh, lambda t: 1.0 - np.tanh(t) ** 2),
            "swish": (lambda x: x * _sigmoid(x),
                      lambda t: _sigmoid(t) * (1 + t * (1 - _sigmoid(t)))),
            "softplus": (lambda x: np.logaddexp(0.0, x), _sigmoid),
        }
        if name not in table:
            raise ValueError(f"unknown activation {name!r}")
        fn, dfn = table[name]
        deriv = float(dfn(np.float64(t0)))
        if abs(deriv) < 1e-12:
            raise ValueError(f"{name} has zero derivative at t0={t0}")
        return cls(name=name, fn=fn, t0=float(t0),
                   value_at_t0=float(fn(np.float64(t0))), deriv_at_t0=deriv)


def realize_general(M: np.ndarray, graph: BasisGraph, box_radius: float,
                    epsilon: float, activation: SmoothActivation,
                    rng: np.random.Generator | None = None,
                    samples: int = 1000, max_layers: int = 10000):
    """Approximate x -> M x on the box to sup error epsilon with two-layer
    activation blocks (sigma(delta W z + t0 1) - sigma(t0) 1)/(delta sigma'(t0)).

    Per factor, delta halves from 1 until the block's sampled sup deviation
    on the running box is within the budget eta = min(1, eps / (m A_max));
    consecutive affine maps are merged so the result is a standard layered
    network with G-sparse weights.  Returns (network, report dict).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    rng = rng or np.random.default_rng(0)
    fz = gsparse_factorization(np.asarray(M, dtype=np.float64), graph)
    chain, out_scale = _equilibrated_chain(fz)
    m = len(chain)
    if m + 1 > max_layers:
        raise RealizationTooDeep(f"{m + 1} layers exceed the cap {max_layers}")
    n = fz.n
    pattern = sparsity.build_pattern(graph, 1)

    norms = [float(np.abs(W).sum(axis=1).max()) for W in chain]
    # amplification of block l's error by the downstream maps: the operator
    # norm of the actual suffix product (tight and sound, where the
    # submultiplicative product of layer norms overflows on long chains)
    suffix_norms = np.empty(m)
    S = np.eye(n)
    for l in range(m - 1, -1, -1):
        suffix_norms[l] = np.abs(S).sum(axis=1).max()
        S = S @ chain[l]
    a_max = float(suffix_norms.max())
    amplification = float(np.abs(out_scale).max())
    eta = min(1.0, (epsilon / amplification) / (m * a_max))

    t0, s0, ds0 = activation.t0, activation.value_at_t0, activation.deriv_at_t0

    def block_error(W, delta, radius):
        Z = rng.uniform(-radius, radius, size=(samples, n))
        target = Z @ W.T
        out = (activation.fn(delta * target + t0) - s0) / (delta * ds0)
        return float(np.abs(out - target).max())

    def build(eta):
        # the equilibrated prefixes have unit-l1 rows, so the exact trajectory
        # stays in [-R, R] per coordinate; the approximate one adds at most
        # the (<= 1) error budget
        radius = float(box_radius) + 1.0
        deltas = []
        for l, W in enumerate(chain):
            delta = 1.0
            err = block_error(W, delta, radius)
            while err > eta:
                delta *= 0.5
                if delta < 1e-280:
                    raise ToleranceUnreachable(
                        f"delta underflow at factor {l}: achieved {err:.3e} "
                        f"> eta {eta:.3e}", achieved=err)
                err = block_error(W, delta, radius)
            deltas.append(delta)
        layers = []
        for l, W in enumerate(chain):
            if l == 0:
                weight = deltas[0] * W
                bias = np.full(n, t0)
            else:
                gain = deltas[l] / (deltas[l - 1] * ds0)
                weight = gain * W
                bias = np.full(n, t0) - gain * s0 * (W @ np.ones(n))
            layers.append(_to_sparse_layer(weight, bias, pattern))
        out_gain = 1.0 / (deltas[-1] * ds0)
        layers.append(_to_sparse_layer(np.diag(out_scale * out_gain),
                                       -out_scale * out_gain * s0 * np.ones(n), pattern))
        return SparseNetwork(layers=layers, activation=activation.name), deltas

    M_target = np.asarray(M, dtype=np.float64)
    achieved = np.inf
    for attempt in range(6):
        net, deltas = build(eta)
        probe = rng.uniform(-box_radius, box_radius, size=(samples, n))
        out, _ = _net_forward(net, probe)
        achieved = float(np.abs(out - probe @ M_target.T).max())
        if achieved <= epsilon:
            report = {"depth": net.depth, "eta": eta, "deltas": deltas,
                      "factor_count": m, "checksum": fz.product_checksum,
                      "achieved_sup_error": achieved}
            return net, report
        eta *= 0.25
    raise ToleranceUnreachable(
        f"sampled sup error {achieved:.3e} > epsilon {epsilon:.3e} after retries",
        achieved=achieved)
