"""P1 finite element assembly and reference solvers.

Assembles the weak form of  -div(a grad u) + b.grad u + c u = f  with
homogeneous Dirichlet conditions by elimination: only interior dofs appear in
the matrices.  Row index is the test function, so the residual of a
coefficient vector alpha is  K @ alpha - F.

Quadrature is the 3-point edge-midpoint rule on triangles and 2-point Gauss
on segments, exact for every P1 bilinear-form integrand with affine
coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import DofMap, Mesh


class AssemblyError(ValueError):
    """Degenerate element or non-evaluable coefficient during assembly."""


class SolverFailure(RuntimeError):
    """Singular or ill-conditioned system, or residual above tolerance."""


@dataclass(frozen=True)
class CoefficientSet:
    """Diffusion tensor a(x), advection b(x), reaction c(x) as point evaluators.

    Each callable takes points of shape (P, dim) and returns
    a -> (P, dim, dim), b -> (P, dim), c -> (P,).
    """

    a: callable
    b: callable
    c: callable

    @classmethod
    def constant(cls, dim, a=1.0, b=None, c=0.0) -> "CoefficientSet":
        a_mat = np.asarray(a, dtype=np.float64)
        if a_mat.ndim == 0:
            a_mat = a_mat * np.eye(dim)
        b_vec = np.zeros(dim) if b is None else np.asarray(b, dtype=np.float64)
        c_val = float(c)
        return cls(
            a=lambda pts: np.broadcast_to(a_mat, (pts.shape[0], dim, dim)),
            b=lambda pts: np.broadcast_to(b_vec, (pts.shape[0], dim)),
            c=lambda pts: np.full(pts.shape[0], c_val),
        )


@dataclass
class BurgersTensor:
    """Sparse rank-3 tensor T[i,j,k] = integral of phi_i phi_j phi_k' (1D).

    Stored as coordinate lists; `apply` evaluates the quadratic form
    N_i(alpha) = sum_jk T[i,j,k] alpha_j alpha_k for a batch of coefficient
    vectors, `jacobian` its derivative, and `vjp` the adjoint product used by
    training.
    """

    ii: np.ndarray
    jj: np.ndarray
    kk: np.ndarray
    vals: np.ndarray
    n: int

    def __post_init__(self):
        ones = np.ones(self.vals.size)
        rng = np.arange(self.vals.size)
        self._agg_i = sp.csr_matrix((ones, (self.ii, rng)), shape=(self.n, self.vals.size))
        self._one_j = sp.csr_matrix((ones, (rng, self.jj)), shape=(self.vals.size, self.n))
        self._one_k = sp.csr_matrix((ones, (rng, self.kk)), shape=(self.vals.size, self.n))

    def apply(self, alpha: np.ndarray) -> np.ndarray:
        """N(alpha) for alpha of shape (n,) or (B, n)."""
        single = alpha.ndim == 1
        a2 = np.atleast_2d(alpha)
        contrib = self.vals * a2[:, self.jj] * a2[:, self.kk]
        out = contrib @ self._agg_i.T
        return out[0] if single else out

    def jacobian(self, alpha: np.ndarray) -> np.ndarray:
        """Dense dN/dalpha at a single coefficient vector."""
        J = np.zeros((self.n, self.n))
        np.add.at(J, (self.ii, self.jj), self.vals * alpha[self.kk])
        np.add.at(J, (self.ii, self.kk), self.vals * alpha[self.jj])
        return J

    def vjp(self, s: np.ndarray, alpha: np.ndarray) -> np.ndarray:
        """(dN/dalpha)^T s for batches s, alpha of shape (B, n)."""
        si = s[:, self.ii] * self.vals
        return (si * alpha[:, self.kk]) @ self._one_j + (si * alpha[:, self.jj]) @ self._one_k


@dataclass
class FemSystem:
    """Assembled interior-dof matrices for one mesh and coefficient set."""

    K: sp.csr_matrix
    M: sp.csr_matrix
    stiff_only: sp.csr_matrix
    dof: DofMap
    T: BurgersTensor | None = None
    nu: float | None = None


@dataclass(frozen=True)
class FemSolution:
    alpha: np.ndarray


def _as_alpha(u):
    return u.alpha if isinstance(u, FemSolution) else np.asarray(u, dtype=np.float64)


# ---------------------------------------------------------------------------
# quadrature + geometry
# ---------------------------------------------------------------------------

_TRI_LAMBDA = np.array([[0.5, 0.5, 0.0],
                        [0.0, 0.5, 0.5],
                        [0.5, 0.0, 0.5]])  # edge midpoints, weight area/3 each

_GAUSS2 = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])


def _tri_geometry(mesh):
    coords = mesh.nodes[mesh.elements]            # (E, 3, 2)
    v1 = coords[:, 1] - coords[:, 0]
    v2 = coords[:, 2] - coords[:, 0]
    area = 0.5 * (v1[:, 0] * v2[:, 1] - v1[:, 1] * v2[:, 0])
    if (area <= 0).any():
        idx = int(np.nonzero(area <= 0)[0][0])
        raise AssemblyError(f"assembly failure: element {idx} has non-positive area")
    # grad lambda_k = rot90(opposite edge) / (2A)
    grads = np.empty((len(area), 3, 2))
    for k in range(3):
        pa = coords[:, (k + 1) % 3]
        pb = coords[:, (k + 2) % 3]
        grads[:, k, 0] = pa[:, 1] - pb[:, 1]
        grads[:, k, 1] = pb[:, 0] - pa[:, 0]
    grads /= (2.0 * area)[:, None, None]
    points = np.einsum("qk,ekd->eqd", _TRI_LAMBDA, coords)   # (E, Q, 2)
    return coords, area, grads, points


def _seg_geometry(mesh):
    coords = mesh.nodes[mesh.elements][..., 0]    # (E, 2)
    h = coords[:, 1] - coords[:, 0]
    if (h <= 0).any():
        idx = int(np.nonzero(h <= 0)[0][0])
        raise AssemblyError(f"assembly failure: element {idx} has non-positive length")
    points = coords[:, 0, None] + h[:, None] * _GAUSS2[None, :]   # (E, 2)
    lam = np.stack([1.0 - _GAUSS2, _GAUSS2], axis=1)              # (Q, 2) basis values
    grads = np.stack([-1.0 / h, 1.0 / h], axis=1)                 # (E, 2)
    return coords, h, grads, points, lam


def _scatter(dof, elements, local, n_local):
    """Sum (E, n_local, n_local) local blocks into the interior-dof CSR matrix."""
    dofs = dof.node_to_dof[elements]              # (E, n_local)
    rows = np.repeat(dofs, n_local, axis=1).ravel()
    cols = np.tile(dofs, (1, n_local)).ravel()
    vals = local.reshape(-1)
    keep = (rows >= 0) & (cols >= 0)
    mat = sp.coo_matrix((vals[keep], (rows[keep], cols[keep])),
                        shape=(dof.N_h, dof.N_h))
    return mat.tocsr()


def _check_ellipticity(a_vals):
    sym = 0.5 * (a_vals + np.swapaxes(a_vals, -1, -2))
    eig = np.linalg.eigvalsh(sym)
    if (eig <= 0).any():
        raise AssemblyError("diffusion tensor is not positive definite at a quadrature point")


def assemble_elliptic(mesh: Mesh, dof: DofMap, coeffs: CoefficientSet,
                      verify_ellipticity: bool = False) -> FemSystem:
    """Assemble K (full bilinear form), the mass matrix M, and the pure
    Laplacian, all on interior dofs.  K[i, j] = B[phi_j, phi_i]."""
    if mesh.dim == 2:
        _, area, grads, points = _tri_geometry(mesh)
        flat = points.reshape(-1, 2)
        a_v = np.asarray(coeffs.a(flat), dtype=np.float64).reshape(len(area), 3, 2, 2)
        b_v = np.asarray(coeffs.b(flat), dtype=np.float64).reshape(len(area), 3, 2)
        c_v = np.asarray(coeffs.c(flat), dtype=np.float64).reshape(len(area), 3)
        if verify_ellipticity:
            _check_ellipticity(a_v.reshape(-1, 2, 2))
        w = area / 3.0
        # rows are test functions i, columns trial functions j
        k_diff = np.einsum("e,eix,eqxy,ejy->eij", w, grads, a_v, grads)
        k_adv = np.einsum("e,eqx,ejx,qi->eij", w, b_v, grads, _TRI_LAMBDA)
        k_reac = np.einsum("e,eq,qj,qi->eij", w, c_v, _TRI_LAMBDA, _TRI_LAMBDA)
        m_loc = np.einsum("e,qj,qi->eij", area / 3.0, _TRI_LAMBDA, _TRI_LAMBDA)
        s_loc = np.einsum("e,eix,ejx->eij", area, grads, grads)
        K = _scatter(dof, mesh.elements, k_diff + k_adv + k_reac, 3)
        M = _scatter(dof, mesh.elements, m_loc, 3)
        S = _scatter(dof, mesh.elements, s_loc, 3)
    else:
        _, h, grads, points, lam = _seg_geometry(mesh)
        flat = points.reshape(-1, 1)
        a_v = np.asarray(coeffs.a(flat), dtype=np.float64).reshape(len(h), 2, 1, 1)
        b_v = np.asarray(coeffs.b(flat), dtype=np.float64).reshape(len(h), 2, 1)
        c_v = np.asarray(coeffs.c(flat), dtype=np.float64).reshape(len(h), 2)
        if verify_ellipticity:
            _check_ellipticity(a_v.reshape(-1, 1, 1))
        w = h / 2.0
        k_diff = np.einsum("e,eq,ei,ej->eij", w, a_v[:, :, 0, 0], grads, grads)
        k_adv = np.einsum("e,eq,ej,qi->eij", w, b_v[:, :, 0], grads, lam)
        k_reac = np.einsum("e,eq,qj,qi->eij", w, c_v, lam, lam)
        m_loc = np.einsum("e,qj,qi->eij", w, lam, lam)
        s_loc = np.einsum("e,ei,ej->eij", h, grads, grads)
        K = _scatter(dof, mesh.elements, k_diff + k_adv + k_reac, 2)
        M = _scatter(dof, mesh.elements, m_loc, 2)
        S = _scatter(dof, mesh.elements, s_loc, 2)
    return FemSystem(K=K, M=M, stiff_only=S, dof=dof)


class LoadAssembler:
    """Reusable quadrature-to-dof map: F = weights @ f(points).

    Batch evaluation of many forcing samples reduces to one dense-by-sparse
    product, which is what the training samplers use.
    """

    def __init__(self, mesh: Mesh, dof: DofMap):
        if mesh.dim == 2:
            _, area, _, points = _tri_geometry(mesh)
            lam = _TRI_LAMBDA
            w = np.repeat(area / 3.0, lam.shape[0])
            self.points = points.reshape(-1, 2)
        else:
            _, h, _, points, lam = _seg_geometry(mesh)
            w = np.repeat(h / 2.0, lam.shape[0])
            self.points = points.reshape(-1, 1)
        n_q = lam.shape[0]
        dofs = dof.node_to_dof[mesh.elements]                     # (E, n_local)
        e_count = mesh.n_elements
        # point p = e * n_q + q; entry (dof(e,k), p) = w_p * lam[q, k]
        rows = np.concatenate([np.repeat(dofs[:, k], n_q) for k in range(dofs.shape[1])])
        pts_idx = np.tile(np.arange(e_count * n_q), dofs.shape[1])
        vals = np.concatenate([(w.reshape(e_count, n_q) * lam[:, k][None, :]).ravel()
                               for k in range(dofs.shape[1])])
        keep = rows >= 0
        self.matrix = sp.coo_matrix((vals[keep], (rows[keep], pts_idx[keep])),
                                    shape=(dof.N_h, e_count * n_q)).tocsr()

    def assemble(self, f) -> np.ndarray:
        """Load vector for a callable f(points) -> (P,)."""
        vals = np.asarray(f(self.points), dtype=np.float64)
        return self.matrix @ vals

    def assemble_values(self, values: np.ndarray) -> np.ndarray:
        """Load vectors for precomputed forcing values of shape (..., P)."""
        return values @ self.matrix.T


def assemble_load(mesh: Mesh, dof: DofMap, f) -> np.ndarray:
    return LoadAssembler(mesh, dof).assemble(f)


def assemble_helmholtz(mesh: Mesh, dof: DofMap):
    """Pure stiffness and mass for the Helmholtz family; the per-wavenumber
    system matrix is helmholtz_matrix(stiff, M, k) = -stiff + k^2 M."""
    if mesh.dim != 2:
        raise AssemblyError("Helmholtz assembly expects a 2D mesh")
    system = assemble_elliptic(mesh, dof, CoefficientSet.constant(2))
    return system.stiff_only, system.M


def helmholtz_matrix(stiff_only, M, k: float):
    return (-stiff_only + (k * k) * M).tocsr()


def assemble_burgers(mesh: Mesh, dof: DofMap, nu: float) -> FemSystem:
    """1D system for -nu u'' + u u' = f with the exact convection tensor.

    T[i,j,k] = integral phi_i phi_j phi_k' (piecewise quadratic times
    constant, integrated exactly); the residual of alpha is
    nu * stiff @ alpha + N(alpha) - F.
    """
    if mesh.dim != 1:
        raise AssemblyError("Burgers assembly expects a 1D mesh")
    if nu <= 0:
        raise AssemblyError("viscosity must be positive")
    system = assemble_elliptic(mesh, dof, CoefficientSet.constant(1))
    n2d = dof.node_to_dof
    ii, jj, kk, vals = [], [], [], []
    for elem in mesh.elements:
        local = [int(n2d[v]) for v in elem]
        for p in range(2):
            for q in range(2):
                mass_pq = 1.0 / 3.0 if p == q else 1.0 / 6.0   # (1/h factor cancels h)
                for r in range(2):
                    sign = -1.0 if r == 0 else 1.0
                    i, j, k = local[p], local[q], local[r]
                    if i >= 0 and j >= 0 and k >= 0:
                        ii.append(i); jj.append(j); kk.append(k)
                        vals.append(mass_pq * sign)
    order = np.lexsort((np.array(kk), np.array(jj), np.array(ii)))
    T = BurgersTensor(ii=np.array(ii)[order], jj=np.array(jj)[order],
                      kk=np.array(kk)[order], vals=np.array(vals)[order], n=dof.N_h)
    system.T = T
    system.nu = float(nu)
    return system


def burgers_residual(system: FemSystem, alpha: np.ndarray, F: np.ndarray) -> np.ndarray:
    a = _as_alpha(alpha)
    return system.nu * (system.stiff_only @ a) + system.T.apply(a) - F


def burgers_jacobian(system: FemSystem, alpha: np.ndarray) -> np.ndarray:
    a = _as_alpha(alpha)
    return system.nu * system.stiff_only.toarray() + system.T.jacobian(a)


def newton_burgers(system: FemSystem, F: np.ndarray, tol: float = 1e-10,
                   max_iter: int = 20) -> FemSolution:
    """Newton iteration on the Burgers residual from the viscous-only start."""
    alpha = spla.spsolve(system.nu * system.stiff_only.tocsc(), F)
    for _ in range(max_iter):
        R = burgers_residual(system, alpha, F)
        if np.linalg.norm(R) <= tol:
            return FemSolution(alpha=alpha)
        J = burgers_jacobian(system, alpha)
        alpha = alpha + np.linalg.solve(J, -R)
    R = burgers_residual(system, alpha, F)
    if np.linalg.norm(R) <= tol:
        return FemSolution(alpha=alpha)
    raise SolverFailure(f"Newton did not reach |R| <= {tol} in {max_iter} iterations "
                        f"(|R| = {np.linalg.norm(R):.3e})")


def solve_direct(system, F: np.ndarray) -> FemSolution:
    """Sparse direct solve with a residual acceptance check of 1e-10 relative."""
    K = system.K if isinstance(system, FemSystem) else system
    F = np.asarray(F, dtype=np.float64)
    norm_f = np.linalg.norm(F)
    if norm_f == 0.0:
        return FemSolution(alpha=np.zeros(K.shape[0]))
    try:
        lu = spla.splu(sp.csc_matrix(K))
        alpha = lu.solve(F)
    except RuntimeError as exc:
        raise SolverFailure(f"factorization failed: {exc}") from None
    residual = np.linalg.norm(K @ alpha - F) / norm_f
    if not np.isfinite(alpha).all() or residual > 1e-10:
        raise SolverFailure(f"solver failure: relative residual {residual:.3e} > 1e-10")
    return FemSolution(alpha=alpha)


def factorized(K):
    """LU factorization reusable across many right-hand sides (columns allowed)."""
    return spla.splu(sp.csc_matrix(K)).solve


def rel_l2_error(u, v, M) -> float:
    """||u - v||_M / ||v||_M, the discrete relative L2 distance."""
    ua, va = _as_alpha(u), _as_alpha(v)
    ref = float(va @ (M @ va))
    if ref == 0.0:
        raise ValueError("reference solution has zero norm")
    diff = ua - va
    return float(np.sqrt(max(diff @ (M @ diff), 0.0) / ref))


def h1_semi_error(u, v, stiff_only) -> float:
    """Same as rel_l2_error but in the H1 seminorm induced by the stiffness."""
    return rel_l2_error(u, v, stiff_only)


# degree-4 rules, enough to resolve (P1 - smooth)^2 in convergence studies
_TRI_LAMBDA4 = np.vstack([
    np.roll([0.445948490915965, 0.445948490915965, 0.108103018168070], k) for k in range(3)
] + [
    np.roll([0.091576213509771, 0.091576213509771, 0.816847572980459], k) for k in range(3)
])
_TRI_W4 = np.array([0.223381589678011] * 3 + [0.109951743655322] * 3)

_GL3_X = np.array([0.5 - np.sqrt(15.0) / 10.0, 0.5, 0.5 + np.sqrt(15.0) / 10.0])
_GL3_W = np.array([5.0, 8.0, 5.0]) / 18.0


def l2_error_vs_exact(mesh: Mesh, dof: DofMap, alpha, exact) -> float:
    """Relative L2(domain) error of the P1 function against an analytic solution.

    Integrates (u_h - u)^2 elementwise with a degree-4 rule; this is the metric
    that exhibits the O(h^2) convergence of P1 elements (the nodal mass-matrix
    distance superconverges on uniform meshes and is not usable for rates).
    """
    a = _as_alpha(alpha)
    values = np.zeros(mesh.n_nodes)
    values[dof.interior_nodes] = a
    if mesh.dim == 2:
        coords = mesh.nodes[mesh.elements]
        _, area, _, _ = _tri_geometry(mesh)
        pts = np.einsum("qk,ekd->eqd", _TRI_LAMBDA4, coords)
        uh = np.einsum("qk,ek->eq", _TRI_LAMBDA4, values[mesh.elements])
        ue = np.asarray(exact(pts.reshape(-1, 2))).reshape(uh.shape)
        w = area[:, None] * _TRI_W4[None, :]
    else:
        coords = mesh.nodes[mesh.elements][..., 0]
        h = coords[:, 1] - coords[:, 0]
        pts = coords[:, 0, None] + h[:, None] * _GL3_X[None, :]
        lam = np.stack([1.0 - _GL3_X, _GL3_X], axis=1)
        uh = np.einsum("qk,ek->eq", lam, values[mesh.elements])
        ue = np.asarray(exact(pts.reshape(-1, 1))).reshape(uh.shape)
        w = h[:, None] * _GL3_W[None, :]
    num = float(np.sum(w * (uh - ue) ** 2))
    den = float(np.sum(w * ue ** 2))
    if den == 0.0:
        raise ValueError("reference solution has zero norm")
    return np.sqrt(num / den)


def mass_row_sums(mesh: Mesh) -> np.ndarray:
    """Integral of every nodal hat function (all nodes, no Dirichlet
    elimination); by partition of unity the total equals the domain measure."""
    out = np.zeros(mesh.n_nodes)
    if mesh.dim == 2:
        _, area, _, _ = _tri_geometry(mesh)
        share = np.repeat(area / 3.0, 3)
    else:
        coords = mesh.nodes[mesh.elements][..., 0]
        share = np.repeat((coords[:, 1] - coords[:, 0]) / 2.0, 2)
    np.add.at(out, mesh.elements.ravel(), share)
    return out


def save_matrix_coo(A, fh) -> None:
    """Write `coo <rows> <cols> <nnz>` then one `i j value` line per entry."""
    coo = sp.coo_matrix(A)
    fh.write(f"coo {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
    for i, j, v in zip(coo.row, coo.col, coo.data):
        fh.write(f"{i} {j} {v!r}\n")


def evaluate_p1(mesh: Mesh, dof: DofMap, alpha, points) -> np.ndarray:
    """Evaluate the P1 function with interior coefficients alpha at points.

    Only implemented for structured meshes (locating a containing element is
    a closed-form grid lookup there); boundary values are zero.
    """
    if mesh.grid_n is None:
        raise ValueError("point evaluation requires a structured mesh")
    a = _as_alpha(alpha)
    n = mesh.grid_n
    values = np.zeros(mesh.n_nodes)
    values[dof.interior_nodes] = a
    lo = mesh.nodes.min(axis=0)
    hi = mesh.nodes.max(axis=0)
    h = (hi - lo) / n
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if mesh.dim == 1:
        t = np.clip((pts[:, 0] - lo[0]) / h[0], 0.0, n)
        cell = np.minimum(t.astype(np.int64), n - 1)
        s = t - cell
        return values[cell] * (1.0 - s) + values[cell + 1] * s
    tx = np.clip((pts[:, 0] - lo[0]) / h[0], 0.0, n)
    ty = np.clip((pts[:, 1] - lo[1]) / h[1], 0.0, n)
    ci = np.minimum(tx.astype(np.int64), n - 1)
    cj = np.minimum(ty.astype(np.int64), n - 1)
    s = tx - ci
    t = ty - cj
    node = lambda i, j: values[j * (n + 1) + i]
    lower = s + t <= 1.0
    out = np.where(
        lower,
        node(ci, cj) * (1.0 - s - t) + node(ci + 1, cj) * s + node(ci, cj + 1) * t,
        node(ci + 1, cj) * (1.0 - t) + node(ci + 1, cj + 1) * (s + t - 1.0) + node(ci, cj + 1) * (1.0 - s),
    )
    return out
