"""Rank-R CP model over the identity x gaussian x parameter tensor.

The model stores three factor matrices sharing a common rank ``R``:
``u_identity`` (mode 1), ``u_gaussian`` (mode 2) and ``u_params`` (mode 3).
The reconstruction is the trilinear form

    w[i, g, p] = sum_r u_identity[i, r] * u_gaussian[g, r] * u_params[p, r]

which under the conventions of :mod:`tensorsplat.tensor_ops` equals
``fold(u_gaussian @ khatri_rao(u_identity, u_params).T, mode=2)``.

Provides two decomposition routines (alternating least squares and greedy
rank-one power iteration with deflation) and the analytic gradients of any
scalar loss through the reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_ops import as_mat, as_tensor3, frob_norm, khatri_rao, mttkrp, rel_error, unfold

ALS_RIDGE = 1e-12


@dataclass
class CPModel:
    """Factor matrices of a rank-R CP decomposition.

    u_params: (M, R) parameter-mode factor
    u_identity: (N_i, R) identity-mode factor
    u_gaussian: (N_g, R) gaussian-mode factor
    """

    rank: int
    u_params: np.ndarray
    u_identity: np.ndarray
    u_gaussian: np.ndarray

    def __post_init__(self):
        self.u_params = as_mat(self.u_params)
        self.u_identity = as_mat(self.u_identity)
        self.u_gaussian = as_mat(self.u_gaussian)
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        for name, f in (
            ("u_params", self.u_params),
            ("u_identity", self.u_identity),
            ("u_gaussian", self.u_gaussian),
        ):
            if f.shape[1] != self.rank:
                raise ValueError(f"{name} has {f.shape[1]} columns, expected rank {self.rank}")
            if not np.all(np.isfinite(f)):
                raise ValueError(f"{name} contains non-finite entries")

    @property
    def dims(self) -> tuple[int, int, int]:
        """Tensor dims (N_i, N_g, M) of the reconstruction."""
        return (self.u_identity.shape[0], self.u_gaussian.shape[0], self.u_params.shape[0])

    def copy(self) -> "CPModel":
        return CPModel(
            self.rank, self.u_params.copy(), self.u_identity.copy(), self.u_gaussian.copy()
        )


@dataclass
class FactorGrads:
    """Gradients shaped like the corresponding CPModel factors."""

    g_params: np.ndarray
    g_identity: np.ndarray
    g_gaussian: np.ndarray


def _slice_from_row(row: np.ndarray, u_gaussian: np.ndarray, u_params: np.ndarray) -> np.ndarray:
    return np.einsum("r,gr,pr->gp", row, u_gaussian, u_params)


def reconstruct_full(m: CPModel) -> np.ndarray:
    """Dense (N_i, N_g, M) tensor reconstructed from the factors."""
    # stacked per-identity slices so reconstruct_slice agrees bit-exactly
    return np.stack(
        [_slice_from_row(row, m.u_gaussian, m.u_params) for row in m.u_identity]
    )


def reconstruct_slice(m: CPModel, i: int) -> np.ndarray:
    """The (N_g, M) parameter matrix of identity ``i``.

    Depends on no row of ``u_identity`` other than row ``i``, and is
    identical to ``reconstruct_full(m)[i]``.
    """
    n_i = m.u_identity.shape[0]
    if not 0 <= i < n_i:
        raise ValueError(f"identity index {i} out of range [0, {n_i})")
    return _slice_from_row(m.u_identity[i], m.u_gaussian, m.u_params)


def backward_full(m: CPModel, grad_t: np.ndarray) -> FactorGrads:
    """Chain rule through the trilinear reconstruction.

    ``grad_t`` is the upstream gradient dL/dW with W = reconstruct_full(m);
    each factor gradient is the MTTKRP of ``grad_t`` against the other two
    factors.
    """
    grad_t = as_tensor3(grad_t)
    if grad_t.shape != m.dims:
        raise ValueError(f"grad shape {grad_t.shape} does not match model dims {m.dims}")
    return FactorGrads(
        g_params=mttkrp(grad_t, m.u_identity, m.u_gaussian, 3),
        g_identity=mttkrp(grad_t, m.u_gaussian, m.u_params, 1),
        g_gaussian=mttkrp(grad_t, m.u_identity, m.u_params, 2),
    )


def backward_slice(m: CPModel, i: int, grad_slice: np.ndarray) -> FactorGrads:
    """Gradients when the loss touches only the slice of identity ``i``.

    Equivalent to :func:`backward_full` with an upstream gradient that is
    zero outside slice ``i``; rows ``j != i`` of the identity gradient are
    exactly zero. Implemented by padding and reusing the full path so the
    two are bit-identical.
    """
    n_i, n_g, n_p = m.dims
    if not 0 <= i < n_i:
        raise ValueError(f"identity index {i} out of range [0, {n_i})")
    grad_slice = as_mat(grad_slice)
    if grad_slice.shape != (n_g, n_p):
        raise ValueError(f"grad slice shape {grad_slice.shape}, expected {(n_g, n_p)}")
    grad_t = np.zeros(m.dims)
    grad_t[i] = grad_slice
    return backward_full(m, grad_t)


def param_count(m_dims: int, n_identities: int, n_gaussians: int, rank: int):
    """(factorized, dense, ratio) parameter counts for the given sizes."""
    for name, v in (
        ("m_dims", m_dims),
        ("n_identities", n_identities),
        ("n_gaussians", n_gaussians),
        ("rank", rank),
    ):
        if v < 1:
            raise ValueError(f"{name} must be positive, got {v}")
    factorized = (m_dims + n_identities + n_gaussians) * rank
    dense = m_dims * n_identities * n_gaussians
    return factorized, dense, dense / factorized


def _init_random_model(dims, rank: int, rng: np.random.Generator) -> CPModel:
    n1, n2, n3 = dims
    return CPModel(
        rank,
        u_params=rng.standard_normal((n3, rank)),
        u_identity=rng.standard_normal((n1, rank)),
        u_gaussian=rng.standard_normal((n2, rank)),
    )


def cp_als(
    t,
    rank: int,
    max_sweeps: int = 200,
    tol: float = 1e-10,
    seed: int = 0,
) -> tuple[CPModel, list[float]]:
    """Alternating least squares CP decomposition.

    Each sweep updates every factor in turn by solving the normal equations
    ``F_n = mttkrp(t, n) (G + ridge I)^{-1}`` where ``G`` is the Hadamard
    product of the other factors' Gram matrices. Stops after ``max_sweeps``
    or once the relative fit change drops below ``tol``.

    Returns the model and the per-sweep relative reconstruction error
    history (non-increasing).
    """
    t = as_tensor3(t)
    if not np.all(np.isfinite(t)):
        raise ValueError("input tensor contains non-finite entries")
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if max_sweeps < 1:
        raise ValueError(f"max_sweeps must be >= 1, got {max_sweeps}")

    rng = np.random.default_rng(seed)
    model = _init_random_model(t.shape, rank, rng)
    factors = [model.u_identity, model.u_gaussian, model.u_params]
    history: list[float] = []
    prev_err = np.inf
    eye = np.eye(rank)

    for _ in range(max_sweeps):
        for n in range(3):
            others = [factors[j] for j in range(3) if j != n]
            gram = (others[0].T @ others[0]) * (others[1].T @ others[1])
            rhs = mttkrp(t, others[0], others[1], n + 1)
            # ridge keeps the solve well posed when factor columns go collinear
            factors[n] = np.linalg.solve(gram + ALS_RIDGE * eye, rhs.T).T
        model = CPModel(rank, factors[2], factors[0], factors[1])
        err = rel_error(t, reconstruct_full(model))
        history.append(err)
        if prev_err - err < tol:
            break
        prev_err = err

    return model, history


def _normalized(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n < 1e-300:
        out = np.zeros_like(v)
        out[0] = 1.0
        return out
    return v / n


def cp_power(
    t,
    rank: int,
    iters_per_component: int = 100,
    restarts: int = 5,
    seed: int = 0,
) -> CPModel:
    """Greedy rank-one fitting by tensor power iteration with deflation.

    For each of the ``rank`` components: run ``restarts`` random
    initializations of power iteration for ``iters_per_component``
    iterations each, keep the candidate with the largest component weight
    ``|lambda|``, subtract the rank-one term, and continue on the residual.
    The identity- and parameter-mode factors have unit-norm columns; each
    component weight is absorbed into the gaussian-mode column.
    """
    t = as_tensor3(t)
    if not np.all(np.isfinite(t)):
        raise ValueError("input tensor contains non-finite entries")
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")

    rng = np.random.default_rng(seed)
    n1, n2, n3 = t.shape
    u_identity = np.zeros((n1, rank))
    u_gaussian = np.zeros((n2, rank))
    u_params = np.zeros((n3, rank))
    residual = t.copy()

    for r in range(rank):
        best = None
        for _ in range(restarts):
            a = _normalized(rng.standard_normal(n1))
            b = _normalized(rng.standard_normal(n2))
            c = _normalized(rng.standard_normal(n3))
            for _ in range(iters_per_component):
                a = _normalized(np.einsum("ijk,j,k->i", residual, b, c))
                b = _normalized(np.einsum("ijk,i,k->j", residual, a, c))
                c = _normalized(np.einsum("ijk,i,j->k", residual, a, b))
            lam = float(np.einsum("ijk,i,j,k->", residual, a, b, c))
            if best is None or abs(lam) > abs(best[0]):
                best = (lam, a, b, c)
        lam, a, b, c = best
        u_identity[:, r] = a
        u_gaussian[:, r] = lam * b
        u_params[:, r] = c
        residual = residual - lam * np.einsum("i,j,k->ijk", a, b, c)

    return CPModel(rank, u_params, u_identity, u_gaussian)
