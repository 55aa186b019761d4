"""Linear input/output bases (DIS, KLE, DOS, PCA) and sample banks.

Input bases are orthonormal in the prior precision inner product, so that
``P_r = Psi Psi^T Gamma_prior^-1`` is the prior-orthogonal projector and the
encoder reads ``beta = Psi^T Gamma_prior^-1 (m - m_prior)``.  Output bases
are Euclidean-orthonormal.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericalValidityError, ParameterDomainError
from .prior import PriorModel, sample_rng

DIS, KLE, DOS, PCA = "DIS", "KLE", "DOS", "PCA"
INPUT_KINDS = (DIS, KLE)
OUTPUT_KINDS = (DOS, PCA)
PRIOR_INVERSE, EUCLIDEAN = "PriorInverse", "Euclidean"
DENSE_LIMIT = 5000
RANK_RTOL = 1e-12


class RankTruncationWarning(UserWarning):
    pass


@dataclass
class ReducedBasis:
    kind: str
    psi: np.ndarray
    values: np.ndarray
    metric: str
    center: np.ndarray
    dual: np.ndarray = field(repr=False, default=None)
    truncated: bool = False

    def __post_init__(self):
        if self.kind not in INPUT_KINDS + OUTPUT_KINDS:
            raise ParameterDomainError(f"unknown basis kind {self.kind!r}")
        if self.dual is None:
            self.dual = self.psi

    @property
    def dim(self) -> int:
        return self.psi.shape[0]

    @property
    def rank(self) -> int:
        return self.psi.shape[1]

    def truncate(self, r: int) -> "ReducedBasis":
        """Leading ``r`` columns.  Bases are nested, so this is a sub-basis."""
        if r > self.rank:
            raise DimensionError(f"cannot truncate a rank-{self.rank} basis to {r}")
        return ReducedBasis(
            self.kind, self.psi[:, :r], self.values[:r], self.metric, self.center, self.dual[:, :r], self.truncated
        )

    def encode(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise DimensionError(f"vector of length {x.shape[-1]} for a basis of dimension {self.dim}")
        return (x - self.center) @ self.dual

    def decode(self, beta):
        beta = np.asarray(beta, dtype=float)
        if beta.shape[-1] != self.rank:
            raise DimensionError(f"{beta.shape[-1]} coefficients for a rank-{self.rank} basis")
        return self.center + beta @ self.psi.T

    def project(self, x):
        return self.decode(self.encode(x))


def _fix_signs(V):
    idx = np.argmax(np.abs(V), axis=0)
    s = np.sign(V[idx, np.arange(V.shape[1])])
    s[s == 0] = 1.0
    return V * s


def randomized_eigh(matvec, d: int, r: int, oversample: int = 10, power: int = 1, seed: int = 0):
    """Leading eigenpairs of a symmetric PSD operator by a double-pass randomized method."""
    k = min(d, r + oversample)
    omega = sample_rng(seed, 0).standard_normal((d, k))
    Q, _ = np.linalg.qr(matvec(omega))
    for _ in range(power):
        Q, _ = np.linalg.qr(matvec(Q))
    T = Q.T @ matvec(Q)
    lam, U = np.linalg.eigh(0.5 * (T + T.T))
    order = np.argsort(lam)[::-1][:r]
    return lam[order], Q @ U[:, order]


def _sym_eig(G, r):
    lam, V = np.linalg.eigh(0.5 * (G + G.T))
    order = np.argsort(lam)[::-1][:r]
    return lam[order], V[:, order]


def _rank_check(lam, r, complete, kind):
    lam = np.where(lam < 0, 0.0, lam)
    tol = RANK_RTOL * (lam[0] if lam.size and lam[0] > 0 else 1.0)
    rank = int(np.count_nonzero(lam > tol))
    truncated = False
    if rank < r and not complete:
        warnings.warn(
            f"{kind}: requested rank {r} exceeds numerical rank {rank}; truncating",
            RankTruncationWarning,
            stacklevel=3,
        )
        r = rank
        truncated = True
    return lam, r, truncated


def _as_stack(jacobians):
    J = np.asarray(jacobians, dtype=float)
    if J.ndim == 2:
        J = J[None]
    if J.ndim != 3 or J.shape[0] == 0:
        raise DimensionError("need a non-empty stack of Jacobians (N, d_s, d_m)")
    return J


def _whitened_jacobians(prior, J):
    # S_n = J_n A^-1 L_M, computed as (L_M^T A^-1 J_n^T)^T
    return np.stack([prior.sqrt_apply_T(Jn.T).T for Jn in J])


def compute_dis(prior: PriorModel, jacobians, r: int, complete: bool = False, seed: int = 0) -> ReducedBasis:
    """Derivative-informed input basis from sample Jacobians.

    With ``complete=True`` eigenvectors of zero eigenvalues are kept so that
    ``r`` may reach ``d_m``; otherwise the basis is cut at the numerical rank.
    """
    J = _as_stack(jacobians)
    d = prior.dim
    if J.shape[2] != d:
        raise DimensionError(f"Jacobians have {J.shape[2]} columns, prior dimension is {d}")
    if not 0 < r <= d:
        raise DimensionError(f"rank must be in [1, {d}], got {r}")
    S = _whitened_jacobians(prior, J)
    N = len(S)
    if d <= DENSE_LIMIT:
        G = np.einsum("nsi,nsj->ij", S, S) / N
        lam, Phi = _sym_eig(G, r)
    else:
        def gram(X):
            return sum(Sn.T @ (Sn @ X) for Sn in S) / N
        lam, Phi = randomized_eigh(gram, d, r, seed=seed)
    lam, r, truncated = _rank_check(lam, r, complete, DIS)
    Phi = _fix_signs(Phi[:, :r])
    psi = prior.sqrt_apply(Phi)
    # Gamma^-1 psi = A L_M^-T phi
    dual = prior.A @ prior.chol_M.solve_Lt(Phi)
    return ReducedBasis(DIS, psi, lam[:r], PRIOR_INVERSE, prior.mean.copy(), dual, truncated)


def compute_kle(prior: PriorModel, r: int) -> ReducedBasis:
    """Leading eigenpairs of the prior covariance, scaled to unit prior-precision norm."""
    d = prior.dim
    if not 0 < r <= d:
        raise DimensionError(f"rank must be in [1, {d}], got {r}")
    if d <= DENSE_LIMIT:
        S = prior.sqrt_apply(np.eye(d))
        U, s, _ = np.linalg.svd(S)
        lam, U = s[:r] ** 2, U[:, :r]
    else:
        lam, U = randomized_eigh(lambda X: prior.covariance_apply(X), d, r)
    U = _fix_signs(U)
    psi = U * np.sqrt(lam)
    dual = U / np.sqrt(lam)
    return ReducedBasis(KLE, psi, lam, PRIOR_INVERSE, prior.mean.copy(), dual)


def compute_pca(observables, r: int) -> ReducedBasis:
    """Principal components of an observable bank (rows are samples)."""
    F = np.atleast_2d(np.asarray(observables, dtype=float))
    N, d_s = F.shape
    if N < 1:
        raise DimensionError("empty observable bank")
    truncated = False
    if r > min(N, d_s):
        warnings.warn(f"PCA: rank {r} exceeds min(N, d_s) = {min(N, d_s)}; truncating", RankTruncationWarning, stacklevel=2)
        r, truncated = min(N, d_s), True
    center = F.mean(axis=0)
    U, s, _ = np.linalg.svd((F - center).T, full_matrices=False)
    psi = _fix_signs(U[:, :r])
    return ReducedBasis(PCA, psi, s[:r], EUCLIDEAN, center, psi, truncated)


def compute_dos(prior: PriorModel, jacobians, r: int, center=None) -> ReducedBasis:
    """Derivative-informed output basis: eigenvectors of the mean of ``J Gamma J^T``."""
    J = _as_stack(jacobians)
    d_s = J.shape[1]
    if not 0 < r <= d_s:
        raise DimensionError(f"rank must be in [1, {d_s}], got {r}")
    S = _whitened_jacobians(prior, J)
    G = np.einsum("nik,njk->ij", S, S) / len(S)
    lam, V = _sym_eig(G, r)
    lam = np.where(lam < 0, 0.0, lam)
    center = np.zeros(d_s) if center is None else np.asarray(center, dtype=float)
    psi = _fix_signs(V)
    return ReducedBasis(DOS, psi, lam, EUCLIDEAN, center, psi)


def _require(basis, metric):
    if basis.metric != metric:
        raise ParameterDomainError(f"expected a {metric} basis, got {basis.kind} ({basis.metric})")


def encode_input(basis: ReducedBasis, m):
    _require(basis, PRIOR_INVERSE)
    return basis.encode(m)


def decode_input(basis: ReducedBasis, beta):
    _require(basis, PRIOR_INVERSE)
    return basis.decode(beta)


def encode_output(basis: ReducedBasis, F):
    _require(basis, EUCLIDEAN)
    return basis.encode(F)


def decode_output(basis: ReducedBasis, beta):
    _require(basis, EUCLIDEAN)
    return basis.decode(beta)


@dataclass
class SampleBank:
    """Prior samples with observables and (optionally) Jacobians, row-aligned."""

    parameters: np.ndarray
    observables: np.ndarray
    seeds: np.ndarray
    jacobians: np.ndarray | None = None
    reduced_jacobians: np.ndarray | None = None
    state_solves: int = 0
    linearized_solves: int = 0

    def __post_init__(self):
        n = len(self.parameters)
        for name in ("observables", "seeds", "jacobians", "reduced_jacobians"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise DimensionError(f"bank field {name} has {len(arr)} rows, expected {n}")

    def __len__(self):
        return len(self.parameters)

    def subset(self, rows) -> "SampleBank":
        rows = np.asarray(rows)
        pick = lambda a: None if a is None else a[rows]
        return SampleBank(
            self.parameters[rows], self.observables[rows], self.seeds[rows],
            pick(self.jacobians), pick(self.reduced_jacobians),
        )


def _map(fn, items, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def generate_bank(prior, pto, seed: int, n: int, start: int = 0, jacobians: bool = False,
                  bases=None, workers: int = 1) -> SampleBank:
    """Draw ``n`` prior samples at stream indices ``start..start+n-1`` and evaluate the PtO map.

    ``jacobians=True`` stores full Jacobians; ``bases=(psi_m, psi_F)`` stores
    reduced Jacobians computed with ``min(r_m, r_F)`` linearized solves each.
    """
    idx = np.arange(start, start + n, dtype=np.uint64)
    params = np.stack([prior.sample(seed, int(i)) for i in idx]) if n else np.zeros((0, prior.dim))

    def work(k):
        m = params[k]
        if bases is not None:
            return pto.reduced_jacobian(m, bases[0].psi, bases[1].psi)
        if jacobians:
            lin = pto.linearize(m)
            return lin.F, lin.jacobian()
        return pto.observables(m), None

    s0, l0 = pto.state_solves, pto.linearized_solves
    out = _map(work, range(n), workers)
    F = np.stack([o[0] for o in out]) if n else np.zeros((0, pto.d_s))
    J = np.stack([o[1] for o in out]) if (n and (jacobians or bases is not None)) else None
    bank = SampleBank(
        params, F, idx,
        J if bases is None else None,
        J if bases is not None else None,
    )
    bank.state_solves = pto.state_solves - s0
    bank.linearized_solves = pto.linearized_solves - l0
    return bank


def _rel(num, den):
    den = np.asarray(den, dtype=float)
    if np.any(den == 0):
        raise NumericalValidityError("relative error against a zero reference")
    return num / den


def projection_errors(bank: SampleBank, basis: ReducedBasis, pto=None) -> dict:
    """Mean relative projection errors of observables and Jacobians over a bank.

    For an input basis the observable error needs ``pto`` to evaluate
    ``F(P_r m)``; the Jacobian error uses ``J P_r``.  For an output basis the
    observables are reconstructed from the basis and the Jacobian error uses
    ``Psi Psi^T J``.
    """
    if len(bank) == 0:
        raise DimensionError("empty bank")
    report = {"kind": basis.kind, "rank": basis.rank, "samples": len(bank)}
    F = bank.observables
    if basis.metric == PRIOR_INVERSE:
        if pto is not None:
            Fp = np.stack([pto.observables(basis.project(m)) for m in bank.parameters])
            report["observable"] = float(np.mean(_rel(np.linalg.norm(F - Fp, axis=1), np.linalg.norm(F, axis=1))))
        if bank.jacobians is not None:
            P = basis.psi @ basis.dual.T
            errs = [np.linalg.norm(J - J @ P) / np.linalg.norm(J) for J in bank.jacobians]
            report["jacobian"] = float(np.mean(errs))
    else:
        Fr = basis.project(F)
        report["observable"] = float(np.mean(_rel(np.linalg.norm(F - Fr, axis=1), np.linalg.norm(F, axis=1))))
        if bank.jacobians is not None:
            Q = basis.psi
            errs = [np.linalg.norm(J - Q @ (Q.T @ J)) / np.linalg.norm(J) for J in bank.jacobians]
            report["jacobian"] = float(np.mean(errs))
    return report


def map_projection_error(basis: ReducedBasis, prior: PriorModel, maps) -> float:
    """Mean relative prior-precision error of projecting MAP points onto an input basis."""
    _require(basis, PRIOR_INVERSE)
    errs = []
    for m in np.atleast_2d(maps):
        den = prior.norm2(m - prior.mean)
        if den == 0:
            raise NumericalValidityError("MAP point equals the prior mean")
        errs.append(np.sqrt(prior.norm2(m - basis.project(m)) / den))
    return float(np.mean(errs))
