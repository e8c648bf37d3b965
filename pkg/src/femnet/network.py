"""Masked multilayer perceptrons: every layer has width N_h and its weights
live only at the positions of a shared sparsity pattern.

Weight values are stored in row-compressed order aligned one-to-one with the
pattern; no operation (forward, backward, optimizer, serialization) ever
creates a value off the pattern.  The activation is applied after layers
1..L-1; the final layer is affine.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .sparsity import SparsityPattern, load_pattern, save_pattern

_DENSE_MATVEC_LIMIT = 1024  # below this width a BLAS product beats csr matvec


def _sigmoid(x):
    # stable on the whole line: sigma(x) = (1 + tanh(x/2)) / 2
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_grad(x):
    return (x > 0).astype(x.dtype)  # subgradient 0 at the kink


def _swish(x):
    return x * _sigmoid(x)


def _swish_grad(x):
    s = _sigmoid(x)
    return s + x * s * (1.0 - s)


ACTIVATIONS = {
    "relu": (_relu, _relu_grad, 1.0),
    "swish": (_swish, _swish_grad, 1.1),  # global bound on |swish'| is ~1.0998
    "identity": (lambda x: x, lambda x: np.ones_like(x), 1.0),
    # general activations used by the constructive linear-map realizations
    "sigmoid": (_sigmoid, lambda x: _sigmoid(x) * (1.0 - _sigmoid(x)), 0.25),
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2, 1.0),
    "softplus": (lambda x: np.logaddexp(0.0, x), _sigmoid, 1.0),
}


class SparseLayer:
    """One masked affine map: values at pattern positions plus a bias."""

    def __init__(self, pattern: SparsityPattern, values: np.ndarray, bias: np.ndarray):
        if values.size != pattern.nnz:
            raise ValueError("values length must equal pattern nnz")
        if bias.size != pattern.n:
            raise ValueError("bias length must equal layer width")
        self.pattern = pattern
        self.values = np.asarray(values, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        self._rows = np.repeat(np.arange(pattern.n), pattern.row_sizes())
        self._full = pattern.nnz == pattern.n * pattern.n
        # off-pattern entries of the scatter buffer are written exactly once
        # (to zero) and never touched again
        self._buffer = None
        if not self._full and pattern.n <= _DENSE_MATVEC_LIMIT:
            self._buffer = np.zeros((pattern.n, pattern.n))

    @property
    def n(self) -> int:
        return self.pattern.n

    def to_dense(self) -> np.ndarray:
        p = self.pattern
        if self._full:
            return self.values.reshape(p.n, p.n)  # full pattern stores row-major
        if self._buffer is not None:
            self._buffer[self._rows, p.indices] = self.values
            return self._buffer
        W = np.zeros((p.n, p.n))
        W[self._rows, p.indices] = self.values
        return W

    def to_csr(self) -> sp.csr_matrix:
        p = self.pattern
        return sp.csr_matrix((self.values, p.indices, p.indptr), shape=(p.n, p.n))

    def _use_dense(self) -> bool:
        return self._full or self.n <= _DENSE_MATVEC_LIMIT

    def matmul(self, X: np.ndarray) -> np.ndarray:
        """W @ x for a batch X of shape (B, n): returns X @ W^T."""
        if self._use_dense():
            return X @ self.to_dense().T
        return np.ascontiguousarray((self.to_csr() @ np.ascontiguousarray(X.T)).T)

    def rmatmul(self, G: np.ndarray) -> np.ndarray:
        """W^T @ g for a batch G of shape (B, n): returns G @ W."""
        if self._use_dense():
            return G @ self.to_dense()
        return np.ascontiguousarray((self.to_csr().T @ np.ascontiguousarray(G.T)).T)

    def grad_values(self, G: np.ndarray, X: np.ndarray) -> np.ndarray:
        """d(sum_b G[b] . (W X[b] + bias))/dW restricted to pattern positions."""
        p = self.pattern
        if self._use_dense():
            dense = G.T @ X
            if self._full:
                return dense.reshape(-1).copy()
            return dense[self._rows, p.indices]
        out = np.zeros(p.nnz)
        step = max(1, (1 << 22) // max(p.nnz, 1))
        for lo in range(0, G.shape[0], step):
            out += np.einsum("bp,bp->p", G[lo:lo + step][:, self._rows],
                             X[lo:lo + step][:, p.indices])
        return out


@dataclass
class SparseNetwork:
    """L masked layers of equal width sharing one pattern and activation tag."""

    layers: list
    activation: str
    version: int = 0  # bumped on every parameter update; caches check it

    @property
    def n(self) -> int:
        return self.layers[0].n

    @property
    def depth(self) -> int:
        return len(self.layers)

    def bump(self):
        self.version += 1


@dataclass
class ForwardCache:
    inputs: list        # layer inputs, inputs[l] has shape (B, n)
    preacts: list       # pre-activation of every layer
    sigmas: list        # sigmoid(preact) for swish layers, else None
    version: int
    net_id: int


@dataclass(frozen=True)
class ParamCount:
    weights: int
    biases: int
    bytes_at_4: int
    bytes_at_8: int


def init(pattern: SparsityPattern, L: int, activation: str,
         rng: np.random.Generator, weight_std: float | None = None) -> SparseNetwork:
    """Fresh network: Normal(0, 1/fan_in) per row, zero biases.

    `weight_std` overrides the per-row scaling with a fixed i.i.d. standard
    deviation (the Gaussian setup of the stability experiments).
    """
    if L < 1:
        raise ValueError("need at least one layer")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}; choose from {sorted(ACTIVATIONS)}")
    sizes = pattern.row_sizes()
    if (sizes == 0).any():
        raise ValueError(f"pattern row {int(np.nonzero(sizes == 0)[0][0])} is empty; "
                         "every neuron needs at least one incoming weight")
    if weight_std is None:
        std = np.repeat(1.0 / np.sqrt(sizes.astype(np.float64)), sizes)
    else:
        std = float(weight_std)
    layers = []
    for _ in range(L):
        values = rng.standard_normal(pattern.nnz) * std
        layers.append(SparseLayer(pattern, values, np.zeros(pattern.n)))
    return SparseNetwork(layers=layers, activation=activation)


def forward(net: SparseNetwork, z0: np.ndarray):
    """Apply the network; returns (output, cache).  Accepts (n,) or (B, n)."""
    single = z0.ndim == 1
    Z = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    if Z.shape[1] != net.n:
        raise ValueError(f"input width {Z.shape[1]} != network width {net.n}")
    swish = net.activation == "swish"
    act, _, _ = ACTIVATIONS[net.activation]
    inputs, preacts, sigmas = [], [], []
    for l, layer in enumerate(net.layers):
        inputs.append(Z)
        P = layer.matmul(Z) + layer.bias
        preacts.append(P)
        if l == net.depth - 1:
            Z, S = P, None
        elif swish:
            S = _sigmoid(P)
            Z = P * S
        else:
            Z, S = act(P), None
        sigmas.append(S)
    cache = ForwardCache(inputs=inputs, preacts=preacts, sigmas=sigmas,
                         version=net.version, net_id=id(net))
    return (Z[0] if single else Z), cache


def backward(net: SparseNetwork, cache: ForwardCache, grad_output: np.ndarray):
    """Exact reverse-mode gradients restricted to the pattern.

    Returns a list of (d_values, d_bias) per layer, first layer first.
    """
    if cache.net_id != id(net) or cache.version != net.version:
        raise ValueError("stale cache: network parameters changed since forward")
    G = np.atleast_2d(np.asarray(grad_output, dtype=np.float64))
    _, dact, _ = ACTIVATIONS[net.activation]
    grads = [None] * net.depth
    for l in range(net.depth - 1, -1, -1):
        layer = net.layers[l]
        if l == net.depth - 1:
            dP = G
        elif cache.sigmas[l] is not None:
            S, P = cache.sigmas[l], cache.preacts[l]
            dP = G * (S + P * (S - S * S))  # swish' = s + x s (1 - s)
        else:
            dP = G * dact(cache.preacts[l])
        grads[l] = (layer.grad_values(dP, cache.inputs[l]), dP.sum(axis=0))
        if l > 0:
            G = layer.rmatmul(dP)
    return grads


def spectral_norm(layer: SparseLayer, max_iter: int = 200, tol: float = 1e-9) -> float:
    """Power iteration on W^T W with a fixed deterministic start vector."""
    n = layer.n
    x = np.random.default_rng(12345).standard_normal(n)
    x /= np.linalg.norm(x)
    sigma = 0.0
    for _ in range(max_iter):
        y = layer.matmul(x[None, :])[0]
        z = layer.rmatmul(y[None, :])[0]
        nz = np.linalg.norm(z)
        new_sigma = np.sqrt(np.linalg.norm(y) ** 2)
        if nz == 0.0:
            return 0.0
        x = z / nz
        if sigma > 0 and abs(new_sigma - sigma) <= tol * sigma:
            sigma = new_sigma
            break
        sigma = new_sigma
    return float(sigma)


def param_count(net: SparseNetwork) -> ParamCount:
    weights = sum(layer.pattern.nnz for layer in net.layers)
    biases = sum(layer.n for layer in net.layers)
    total = weights + biases
    return ParamCount(weights=weights, biases=biases,
                      bytes_at_4=4 * total, bytes_at_8=8 * total)


# ---------------------------------------------------------------------------
# checkpoint file: ASCII header + pattern block, then per-layer values and
# biases as little-endian float64.  Round-trips bit-exactly.
# ---------------------------------------------------------------------------

def save_network(net: SparseNetwork, path) -> None:
    pattern = net.layers[0].pattern
    head = io.StringIO()
    head.write(f"snet {net.n} {net.depth} {net.activation} {pattern.c_level}\n")
    save_pattern(pattern, head)
    with open(path, "wb") as fh:
        fh.write(head.getvalue().encode("ascii"))
        for layer in net.layers:
            fh.write(np.ascontiguousarray(layer.values, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())


def load_network(path) -> SparseNetwork:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) != 5 or header[0] != "snet":
            raise ValueError(f"{path}: bad checkpoint header {header}")
        n, L, activation = int(header[1]), int(header[2]), header[3]
        pat_header = fh.readline().decode("ascii")
        nnz = int(pat_header.split()[2])
        pat_text = io.StringIO(pat_header + "".join(
            fh.readline().decode("ascii") for _ in range(nnz)))
        pattern = load_pattern(pat_text)
        if pattern.n != n:
            raise ValueError(f"{path}: pattern size {pattern.n} != header width {n}")
        layers = []
        for _ in range(L):
            values = np.frombuffer(fh.read(8 * nnz), dtype="<f8").astype(np.float64)
            bias = np.frombuffer(fh.read(8 * n), dtype="<f8").astype(np.float64)
            if values.size != nnz or bias.size != n:
                raise ValueError(f"{path}: truncated checkpoint")
            layers.append(SparseLayer(pattern, values, bias))
    return SparseNetwork(layers=layers, activation=activation)
