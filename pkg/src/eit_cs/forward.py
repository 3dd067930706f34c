"""Complete-electrode-model forward solves, measurement maps, and Jacobians.

The weak form couples an interior potential u with electrode voltages U
through a contact impedance z: find (u, U) with

    int sigma grad(u).grad(v) + sum_l (1/z) int_{E_l} (u - U_l)(v - V_l)
        = sum_l I_l V_l

for all test pairs (v, V). Voltages are grounded by expanding U in a basis
of the mean-free space {U : sum_l U_l |E_l| = 0}, which makes the reduced
block system symmetric positive definite. Conductivity is always nodal and
piecewise affine; the potential can be discretized at order 1 or 2.

The Jacobian of the measurement map uses the adjoint identity: the
sensitivity of a measured voltage to a nodal conductivity value is the
negative stiffness pairing of the drive potential with the potential of the
measurement pattern driven as if it were a current pattern. Both families
of solves share one matrix factorization per conductivity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.sparse import bmat, coo_matrix, csr_matrix
from scipy.sparse.linalg import splu

from .errors import InputError, NumericalError
from .mesh import Mesh
from .protocol import Protocol

DEFAULT_CONTACT_IMPEDANCE = 1e-2
DEFAULT_BOUNDS = (0.1, 3.0)

# relative residual accepted from a factorized solve
_RESIDUAL_TOL = 1e-10


@dataclass(frozen=True)
class ConductivityField:
    """Nodal conductivity with box bounds 0 < c0 <= sigma_i <= c1."""

    values: np.ndarray
    bounds: tuple = DEFAULT_BOUNDS

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        c0, c1 = self.bounds
        if not (0.0 < c0 < c1):
            raise InputError(f"bounds must satisfy 0 < c0 < c1, got ({c0}, {c1})")
        if vals.ndim != 1:
            raise InputError("conductivity must be a flat per-vertex vector")
        if not np.isfinite(vals).all():
            raise InputError("conductivity values must be finite")
        if vals.min() < c0 or vals.max() > c1:
            raise InputError(
                f"conductivity leaves the box [{c0}, {c1}]: "
                f"range [{vals.min()}, {vals.max()}]"
            )

    @property
    def n(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class ForwardSolution:
    """One forward solve: interior potential dofs plus electrode voltages.

    ``potential`` holds the vertex coefficients, followed by edge-midpoint
    coefficients when the solve used order 2. ``electrode_voltages`` is
    mean-free: its length-weighted sum over electrodes vanishes.
    """

    potential: np.ndarray
    electrode_voltages: np.ndarray
    z: float
    order: int
    n_vertices: int
    residual: float

    @property
    def vertex_potential(self) -> np.ndarray:
        return self.potential[: self.n_vertices]


@dataclass(frozen=True)
class JacobianMatrix:
    """Derivative of the measurement map at a fixed conductivity."""

    entries: np.ndarray
    protocol: Protocol
    sigma: np.ndarray
    z: float
    order: int

    @property
    def shape(self):
        return self.entries.shape


class RipEstimate(NamedTuple):
    alpha: float
    beta: float
    degenerate: bool


def _sigma_values(sigma, n: int) -> np.ndarray:
    if isinstance(sigma, ConductivityField):
        vals = sigma.values
    else:
        vals = np.ascontiguousarray(sigma, dtype=np.float64)
        if vals.ndim != 1:
            raise InputError("conductivity must be a flat per-vertex vector")
        if not np.isfinite(vals).all():
            raise InputError("conductivity values must be finite")
    if vals.size != n:
        raise InputError(f"conductivity has {vals.size} entries, mesh has {n} vertices")
    return vals


def _hat_gradients(mesh: Mesh):
    """Areas and constant P1 basis gradients per triangle."""
    x = mesh.vertices[mesh.triangles]
    nxt = x[:, [1, 2, 0], :]
    prv = x[:, [2, 0, 1], :]
    areas = 0.5 * (
        (x[:, 1, 0] - x[:, 0, 0]) * (x[:, 2, 1] - x[:, 0, 1])
        - (x[:, 1, 1] - x[:, 0, 1]) * (x[:, 2, 0] - x[:, 0, 0])
    )
    grads = np.empty_like(x)
    grads[:, :, 0] = nxt[:, :, 1] - prv[:, :, 1]
    grads[:, :, 1] = prv[:, :, 0] - nxt[:, :, 0]
    grads /= 2.0 * areas[:, None, None]
    return areas, grads


def _p2_edge_numbering(mesh: Mesh):
    """Assign one dof per undirected triangle edge, after the vertices."""
    edge_ids = {}
    for tri in mesh.triangles:
        for a, b in ((tri[1], tri[2]), (tri[2], tri[0]), (tri[0], tri[1])):
            key = (min(a, b), max(a, b))
            if key not in edge_ids:
                edge_ids[key] = len(edge_ids)
    return edge_ids


@dataclass
class _Discretization:
    order: int
    nd: int
    n_dof: int
    dofs: np.ndarray            # (nt, nd) global dof per local basis function
    rows: np.ndarray            # stiffness scatter pattern
    cols: np.ndarray
    C: np.ndarray               # (nt, 3, nd, nd) stiffness derivative per local vertex
    QT: csr_matrix              # (n, 3 nt) vertex scatter for Jacobian rows
    M_geo: csr_matrix           # electrode boundary mass, z not applied
    B_geo: csr_matrix           # (n_dof, p) electrode boundary load, z not applied
    elec_len: np.ndarray
    N: np.ndarray               # (p, p-1) mean-free voltage basis


def _grad_tensor_p1(areas, grads):
    nt = areas.size
    K = np.einsum("tax,tbx->tab", grads, grads) * areas[:, None, None]
    C = np.repeat(K[:, None, :, :] / 3.0, 3, axis=1)
    return C.reshape(nt, 3, 3, 3)


def _grad_tensor_p2(areas, grads):
    """Exact integrals of lambda_loc grad(psi_a).grad(psi_b) per triangle.

    Each quadratic basis gradient is affine in the barycentric coordinates,
    grad(psi_a) = c_a + sum_k lambda_k d_ak, so the integrand is cubic and
    the monomial integrals 2|T| a!b!c!/(a+b+c+2)! close the computation.
    """
    nt = areas.size
    c = np.zeros((nt, 6, 2))
    d = np.zeros((nt, 6, 3, 2))
    for i in range(3):
        c[:, i] = -grads[:, i]
        d[:, i, i] = 4.0 * grads[:, i]
    # midpoint functions 4 lambda_i lambda_j on the edge opposite each vertex
    for a, (i, j) in enumerate(((1, 2), (2, 0), (0, 1)), start=3):
        d[:, a, i] = 4.0 * grads[:, j]
        d[:, a, j] = 4.0 * grads[:, i]

    w2 = np.full((3, 3), 1.0 / 12.0)
    np.fill_diagonal(w2, 1.0 / 6.0)
    w3 = np.full((3, 3, 3), 1.0 / 60.0)
    for i in range(3):
        for j in range(3):
            w3[i, i, j] = w3[i, j, i] = w3[j, i, i] = 1.0 / 30.0
        w3[i, i, i] = 1.0 / 10.0

    cc = np.einsum("tax,tbx->tab", c, c)
    cd = np.einsum("tax,tbkx->tabk", c, d)
    dd = np.einsum("takx,tblx->tabkl", d, d)
    C = np.repeat(cc[:, None, :, :] / 3.0, 3, axis=1)
    sym = cd + cd.transpose(0, 2, 1, 3)
    C += np.einsum("tabk,mk->tmab", sym, w2)
    C += np.einsum("tabkl,mkl->tmab", dd, w3)
    return C * areas[:, None, None, None]


def _build_discretization(mesh: Mesh, order: int) -> _Discretization:
    if order not in (1, 2):
        raise InputError(f"potential order must be 1 or 2, got {order}")
    areas, grads = _hat_gradients(mesh)
    nt = mesh.n_triangles

    if order == 1:
        nd, n_dof = 3, mesh.n
        dofs = mesh.triangles.copy()
        C = _grad_tensor_p1(areas, grads)
    else:
        edge_ids = _p2_edge_numbering(mesh)
        nd, n_dof = 6, mesh.n + len(edge_ids)
        dofs = np.empty((nt, 6), dtype=np.int64)
        dofs[:, :3] = mesh.triangles
        for t, tri in enumerate(mesh.triangles):
            for a, (i, j) in enumerate(((tri[1], tri[2]), (tri[2], tri[0]),
                                        (tri[0], tri[1])), start=3):
                dofs[t, a] = mesh.n + edge_ids[(min(i, j), max(i, j))]
        C = _grad_tensor_p2(areas, grads)

    rows = np.repeat(dofs, nd, axis=1).ravel()
    cols = np.tile(dofs, (1, nd)).ravel()

    verts = mesh.triangles.ravel()
    QT = coo_matrix(
        (np.ones(3 * nt), (verts, np.arange(3 * nt))), shape=(mesh.n, 3 * nt)
    ).tocsr()

    # electrode boundary integrals (contact impedance applied at assembly)
    p = mesh.p
    edge_len = mesh.boundary_edge_lengths()
    m_rows, m_cols, m_vals = [], [], []
    b_rows, b_cols, b_vals = [], [], []
    if order == 1:
        mass = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
        load = np.array([0.5, 0.5])
    else:
        mass = np.array([[4.0, 2.0, -1.0], [2.0, 16.0, 2.0], [-1.0, 2.0, 4.0]]) / 30.0
        load = np.array([1.0, 4.0, 1.0]) / 6.0
        edge_ids = _p2_edge_numbering(mesh)
    for l, run in enumerate(mesh.electrodes):
        for e in run:
            i, j = mesh.boundary_edges[e]
            if order == 1:
                ed = np.array([i, j])
            else:
                ed = np.array([i, mesh.n + edge_ids[(min(i, j), max(i, j))], j])
            L = edge_len[e]
            for a in range(ed.size):
                b_rows.append(ed[a])
                b_cols.append(l)
                b_vals.append(L * load[a])
                for b in range(ed.size):
                    m_rows.append(ed[a])
                    m_cols.append(ed[b])
                    m_vals.append(L * mass[a, b])
    M_geo = coo_matrix((m_vals, (m_rows, m_cols)), shape=(n_dof, n_dof)).tocsr()
    B_geo = coo_matrix((b_vals, (b_rows, b_cols)), shape=(n_dof, p)).tocsr()

    elec_len = mesh.electrode_lengths()
    N = np.zeros((p, p - 1))
    N[np.arange(p - 1), np.arange(p - 1)] = 1.0
    N[p - 1, :] = -elec_len[:-1] / elec_len[-1]

    return _Discretization(order=order, nd=nd, n_dof=n_dof, dofs=dofs, rows=rows,
                           cols=cols, C=C, QT=QT, M_geo=M_geo, B_geo=B_geo,
                           elec_len=elec_len, N=N)


def _assemble_system(disc: _Discretization, mesh: Mesh, sigma: np.ndarray, z: float):
    sig_loc = sigma[mesh.triangles]
    K = np.einsum("tm,tmab->tab", sig_loc, disc.C)
    A = coo_matrix((K.ravel(), (disc.rows, disc.cols)),
                   shape=(disc.n_dof, disc.n_dof)).tocsr()
    A = A + disc.M_geo / z
    top_right = -(disc.B_geo @ disc.N) / z
    corner = disc.N.T @ (disc.elec_len[:, None] * disc.N) / z
    S = bmat(
        [
            [A, csr_matrix(top_right)],
            [csr_matrix(top_right.T), csr_matrix(corner)],
        ],
        format="csc",
    )
    return S


class _FactorizedSystem:
    """One conductivity's factorized system plus cached pattern solves."""

    def __init__(self, disc: _Discretization, mesh: Mesh, sigma: np.ndarray, z: float):
        self.S = _assemble_system(disc, mesh, sigma, z)
        try:
            self.factor = splu(self.S)
        except RuntimeError as exc:
            raise NumericalError(f"forward system could not be factorized: {exc}") from exc

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        x = self.factor.solve(rhs)
        if not np.isfinite(x).all():
            raise NumericalError("forward solve produced non-finite values")
        res = self.S @ x - rhs
        rhs_norm = np.linalg.norm(rhs, axis=0)
        res_norm = np.linalg.norm(res, axis=0)
        bad = res_norm > _RESIDUAL_TOL * np.maximum(rhs_norm, 1e-300)
        if np.any(bad & (rhs_norm > 0)):
            worst = float((res_norm / np.maximum(rhs_norm, 1e-300)).max())
            raise NumericalError(f"forward solve residual {worst:.3e} above tolerance")
        return x


def _pattern_rhs(disc: _Discretization, pairs) -> np.ndarray:
    p = disc.N.shape[0]
    rhs = np.zeros((disc.n_dof + p - 1, len(pairs)))
    for k, (a, b) in enumerate(pairs):
        e = np.zeros(p)
        e[a], e[b] = 1.0, -1.0
        rhs[disc.n_dof:, k] = disc.N.T @ e
    return rhs


class ForwardOperator:
    """Measurement map and Jacobian over one mesh/protocol/impedance setup.

    Caches the factorization and pattern solves of the most recent
    conductivity, so evaluating the map and its Jacobian at the same point
    costs one factorization.
    """

    def __init__(self, mesh: Mesh, protocol: Protocol, z: float = DEFAULT_CONTACT_IMPEDANCE,
                 order: int = 1):
        if protocol.p != mesh.p:
            raise InputError(
                f"protocol expects {protocol.p} electrodes, mesh has {mesh.p}"
            )
        if z <= 0:
            raise InputError("contact impedance must be positive")
        self.mesh = mesh
        self.protocol = protocol
        self.z = float(z)
        self.order = order
        self.disc = _build_discretization(mesh, order)
        self._drive_rhs = _pattern_rhs(self.disc, protocol.injections)
        self._meas_rhs = _pattern_rhs(self.disc, protocol.measurements)
        self._pair_rows = [ci * protocol.n_v + vi for ci, vi in protocol.pairs()]
        self._cache_key = None
        self._cache = None

    @property
    def m(self) -> int:
        return self.protocol.m

    @property
    def n(self) -> int:
        return self.mesh.n

    def _state(self, sigma):
        vals = _sigma_values(sigma, self.mesh.n)
        key = vals.tobytes()
        if self._cache_key != key:
            sys = _FactorizedSystem(self.disc, self.mesh, vals, self.z)
            drive_x = sys.solve(self._drive_rhs)
            self._cache = {"sigma": vals.copy(), "sys": sys, "drive_x": drive_x,
                           "meas_x": None, "jac": None}
            self._cache_key = key
        return self._cache

    def electrode_voltages(self, sigma) -> np.ndarray:
        """Mean-free voltages, one column per injection pattern."""
        state = self._state(sigma)
        beta = state["drive_x"][self.disc.n_dof:, :]
        return self.disc.N @ beta

    def phi(self, sigma) -> np.ndarray:
        """Evaluate the measurement map, injection-major ordering."""
        U = self.electrode_voltages(sigma)
        meas = np.asarray(self.protocol.measurements)
        full = (U[meas[:, 0], :] - U[meas[:, 1], :]).T.ravel()
        return full[self._pair_rows]

    def jacobian(self, sigma) -> JacobianMatrix:
        """Adjoint-assembled derivative of :meth:`phi`."""
        state = self._state(sigma)
        if state["jac"] is None:
            if state["meas_x"] is None:
                state["meas_x"] = state["sys"].solve(self._meas_rhs)
            disc, prot = self.disc, self.protocol
            drive_pot = state["drive_x"][: disc.n_dof, :]
            meas_pot = state["meas_x"][: disc.n_dof, :]
            Um = meas_pot[disc.dofs, :]                      # (nt, nd, n_v)
            Ud = drive_pot[disc.dofs, :]                     # (nt, nd, n_c)
            nt = disc.dofs.shape[0]
            J_full = np.empty((prot.n_c * prot.n_v, self.mesh.n))
            for ci in range(prot.n_c):
                tmp = np.einsum("tmab,tb->tma", disc.C, Ud[:, :, ci])
                E = np.einsum("tma,tav->tmv", tmp, Um)
                block = disc.QT @ E.reshape(3 * nt, prot.n_v)
                J_full[ci * prot.n_v:(ci + 1) * prot.n_v, :] = -block.T
            state["jac"] = J_full[self._pair_rows, :]
        return JacobianMatrix(entries=state["jac"].copy(), protocol=self.protocol,
                              sigma=state["sigma"].copy(), z=self.z, order=self.order)

    def phi_and_jacobian(self, sigma):
        return self.phi(sigma), self.jacobian(sigma)


def assemble_and_solve(mesh: Mesh, sigma, z: float, currents,
                       order: int = 1) -> ForwardSolution:
    """Solve one forward problem for an explicit injected-current vector."""
    if z <= 0:
        raise InputError("contact impedance must be positive")
    vals = _sigma_values(sigma, mesh.n)
    currents = np.ascontiguousarray(currents, dtype=np.float64)
    if currents.shape != (mesh.p,):
        raise InputError(f"need one current per electrode, got shape {currents.shape}")
    imbalance = abs(currents.sum())
    if imbalance > 1e-12 * max(1.0, np.abs(currents).max()):
        raise InputError(f"injected currents sum to {currents.sum():.3e}, not zero")

    disc = _build_discretization(mesh, order)
    sys = _FactorizedSystem(disc, mesh, vals, z)
    rhs = np.zeros(disc.n_dof + mesh.p - 1)
    rhs[disc.n_dof:] = disc.N.T @ currents
    x = sys.solve(rhs)
    U = disc.N @ x[disc.n_dof:]
    res = float(np.linalg.norm(sys.S @ x - rhs) / max(np.linalg.norm(rhs), 1e-300))
    return ForwardSolution(potential=x[: disc.n_dof], electrode_voltages=U,
                           z=float(z), order=order, n_vertices=mesh.n, residual=res)


def electrode_currents(mesh: Mesh, solution: ForwardSolution) -> np.ndarray:
    """Recover per-electrode currents (U_l |E_l| - int_{E_l} u) / z."""
    disc = _build_discretization(mesh, solution.order)
    boundary_integral = disc.B_geo.T @ solution.potential
    return (disc.elec_len * solution.electrode_voltages - boundary_integral) / solution.z


def apply_phi(mesh: Mesh, sigma, z: float, protocol: Protocol,
              order: int = 1) -> np.ndarray:
    """Measurement vector of the conductivity under the given protocol."""
    return ForwardOperator(mesh, protocol, z, order).phi(sigma)


def jacobian(mesh: Mesh, sigma, z: float, protocol: Protocol,
             order: int = 1) -> JacobianMatrix:
    """Measurement-map Jacobian at sigma, one row per protocol pair."""
    return ForwardOperator(mesh, protocol, z, order).jacobian(sigma)


def estimate_rip_bounds(mesh: Mesh, sigma_samples, z: float, protocol: Protocol,
                        support=None, order: int = 1,
                        degenerate_tol: float = 1e-12) -> RipEstimate:
    """Extreme squared singular values of the Jacobian over sample points.

    ``support`` restricts the Jacobian columns to an index set before the
    spectrum is taken. Whenever the (restricted) Jacobian has more columns
    than rows its kernel is nontrivial, so the lower bound is zero without
    computing a spectrum. A vanishing lower bound is reported through the
    ``degenerate`` flag rather than raised.
    """
    samples = list(sigma_samples)
    if not samples:
        raise InputError("need at least one conductivity sample")
    op = ForwardOperator(mesh, protocol, z, order)
    if support is not None:
        support = np.asarray(support)
        if support.dtype == bool:
            support = np.flatnonzero(support)
    alpha, beta = np.inf, 0.0
    for sigma in samples:
        J = op.jacobian(sigma).entries
        if support is not None:
            J = J[:, support]
        svals = np.linalg.svd(J, compute_uv=False)
        beta = max(beta, float(svals[0] ** 2))
        if J.shape[1] > J.shape[0]:
            alpha = 0.0
        else:
            alpha = min(alpha, float(svals[-1] ** 2))
    return RipEstimate(alpha=alpha, beta=beta,
                       degenerate=bool(alpha <= degenerate_tol * max(beta, 1.0)))
