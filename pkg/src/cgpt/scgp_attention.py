"""Sparse (DTC) correlated-GP attention.

Each of the two conditionals of the exact head is replaced by its DTC
approximation through a set of inducing inputs living in the canonical
space: ``S`` (m points) on the query side, ``S'`` (l points) on the key side.

    K_att = s^-4 K_qm A^{-1} K_mo K_ol B^{-1} K_lk
    A = K_mm + s^-2 K_mo K_om,   B = K_ll + s^-2 K_lk K_kl

Nothing of size n x n is inverted; A and B are handled through the
Cholesky factor of the inducing Gram, ``A = L (I + Phi Phi^T / s2) L^T`` with
``Phi = L^{-1} K_mo``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .cgp_attention import AttentionResult, CGPHeadParams, McConfig, latent_inputs
from .gp_core import PsdSolveContext, psd_factor
from .kernels import as_tensor, canonical_matrix


@dataclass
class InducingSets:
    S: torch.Tensor
    S_prime: torch.Tensor

    def __post_init__(self):
        self.S, self.S_prime = as_tensor(self.S), as_tensor(self.S_prime)
        for name in ("S", "S_prime"):
            M = getattr(self, name)
            if M.ndim != 2 or M.shape[0] < 1:
                raise ValueError(f"{name} must be a non-empty matrix")
            if not torch.isfinite(M).all():
                raise ValueError(f"{name} has non-finite entries")


@dataclass
class SCGPHeadParams:
    base: CGPHeadParams
    inducing: InducingSets

    def __post_init__(self):
        s = self.base.W_lat.shape[0]
        if self.inducing.S.shape[1] != s or self.inducing.S_prime.shape[1] != s:
            raise ValueError("inducing inputs must live in the s-dimensional canonical space")


@dataclass
class SparseGrams:
    K_qm: torch.Tensor
    K_mm: torch.Tensor
    K_mo: torch.Tensor
    K_ol: torch.Tensor
    K_ll: torch.Tensor
    K_lk: torch.Tensor
    sigma2: float | torch.Tensor
    K_oo: torch.Tensor | None = None

    @property
    def n(self) -> int:
        return self.K_qm.shape[-2]


def _t(M):
    return M.transpose(-1, -2)


class DtcFactor:
    """Factorization of ``A = K_mm + K_mo K_om / s2``.

    ``K_mm`` goes through the shared jitter policy; the inner matrix
    ``I + Phi Phi^T / s2`` is well conditioned by construction.
    """

    def __init__(self, K_mm: torch.Tensor, K_mo: torch.Tensor, sigma2):
        if float(torch.as_tensor(sigma2).detach()) <= 0:
            raise ValueError("DTC approximation needs sigma2 > 0")
        self.sigma2 = sigma2
        self.L = psd_factor(K_mm, 0.0)
        self.Phi = self.L.half_solve(K_mo)
        inner = self.Phi @ _t(self.Phi) / sigma2
        self.C = psd_factor(inner, 1.0, check_symmetric=False)

    def whiten(self, B: torch.Tensor) -> torch.Tensor:
        """``W`` with ``W^T W = B^T A^{-1} B``."""
        return self.C.half_solve(self.L.half_solve(B))

    def apply_inv(self, B: torch.Tensor) -> torch.Tensor:
        """``A^{-1} B``."""
        w = self.C.solve(self.L.half_solve(B))
        return torch.linalg.solve_triangular(_t(self.L.chol), w, upper=True)

    def mean_operator(self, K_am: torch.Tensor) -> torch.Tensor:
        """(1/s2) K_am A^{-1} K_mo, via A^{-1} K_mo = L^{-T} C^{-1} Phi."""
        w = self.C.solve(self.Phi)
        right = torch.linalg.solve_triangular(_t(self.L.chol), w, upper=True)
        return K_am @ right / self.sigma2

    def apply_mean(self, K_am: torch.Tensor, K_mo: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """(1/s2) K_am A^{-1} K_mo y, right to left."""
        return K_am @ self.apply_inv(K_mo @ y) / self.sigma2


def dtc_mean_operator(K_am, K_mm, K_mo, sigma2) -> torch.Tensor:
    """DTC conditional-mean operator ``(1/s2) K_am (K_mm + K_mo K_om / s2)^{-1} K_mo``."""
    K_am, K_mm, K_mo = as_tensor(K_am), as_tensor(K_mm), as_tensor(K_mo)
    if K_am.shape[-1] != K_mm.shape[-1] or K_mo.shape[-2] != K_mm.shape[-1]:
        raise ValueError("shape mismatch between K_am, K_mm and K_mo")
    return DtcFactor(K_mm, K_mo, sigma2).mean_operator(K_am)


def sparse_grams(X, p: SCGPHeadParams, *, with_oo: bool = False) -> SparseGrams:
    X = as_tensor(X)
    b = p.base
    Q = b.branch_q.project(X)
    Kf = b.branch_k.project(X)
    Xo = latent_inputs(X, b)
    S, Sp = p.inducing.S, p.inducing.S_prime
    return SparseGrams(
        K_qm=b.branch_q.scale * canonical_matrix(Q, S),
        K_mm=canonical_matrix(S, S),
        K_mo=canonical_matrix(S, Xo),
        K_ol=canonical_matrix(Xo, Sp),
        K_ll=canonical_matrix(Sp, Sp),
        K_lk=b.branch_k.scale * canonical_matrix(Sp, Kf),
        sigma2=b.sigma2,
        K_oo=canonical_matrix(Xo, Xo) if with_oo else None,
    )


def _stages(g: SparseGrams):
    A = DtcFactor(g.K_mm, g.K_mo, g.sigma2)
    B = DtcFactor(g.K_ll, g.K_lk, g.sigma2)
    return A, B


def attention_matrix_sparse_from_grams(g: SparseGrams) -> torch.Tensor:
    A, B = _stages(g)
    right = B.mean_operator(g.K_ol) @ torch.eye(g.n, dtype=g.K_ol.dtype)
    # q-stage operator applied to the n x n k-stage operator, never inverting an n x n matrix
    return A.apply_mean(g.K_qm, g.K_mo, right)


def attention_matrix_sparse(X, p: SCGPHeadParams) -> torch.Tensor:
    return attention_matrix_sparse_from_grams(sparse_grams(X, p))


def apply_sparse_attention(g: SparseGrams, Z: torch.Tensor, stages=None) -> torch.Tensor:
    A, B = stages or _stages(g)
    latent = B.apply_mean(g.K_ol, g.K_lk, Z)
    return A.apply_mean(g.K_qm, g.K_mo, latent)


def _expected_sq_terms(P: torch.Tensor, K_am: torch.Tensor, H: torch.Tensor) -> torch.Tensor:
    """s^-4 tr(P^T P H) + tr(P K_ma) with P = K_am A^{-1}; returned without the s^-4 applied to part 2."""
    first = ((P @ H) * P).sum((-1, -2))
    second = (P * K_am).sum((-1, -2))
    return first, second


def bound_constant(n: int, sigma) -> torch.Tensor:
    return -n * math.log(2 * math.pi) - 1.0 / (2.0 * sigma)


def regularizer_sparse_terms(g: SparseGrams, nu: torch.Tensor, Z: torch.Tensor, sigma) -> torch.Tensor:
    """Closed-form negated bound for every output column; returns (..., s).

    Query side, with A = K_mm + K_mo K_om / s2 and z_o ~ N(0, K_oo):

        T_q = ||nu_a||^2 + s^-4 tr(K_om A^{-1} K_mq K_qm A^{-1} K_mo K_oo)
              + tr(K_qm A^{-1} K_mq)
        bound_q = -T_q / (2 s2) - n log 2pi - 1 / (2 s)

    The key side swaps (q, m) for (k, l) and conditions the key inducing
    variables on z_o, i.e. A' = K_ll + K_lo K_ol / s2.
    """
    if g.K_oo is None:
        raise ValueError("regularizer needs K_oo; build grams with with_oo=True")
    s2 = g.sigma2
    n = g.n
    K_lo = _t(g.K_ol)
    K_kl = _t(g.K_lk)
    Aq = DtcFactor(g.K_mm, g.K_mo, s2)
    Ak = DtcFactor(g.K_ll, K_lo, s2)
    Pq = _t(Aq.apply_inv(_t(g.K_qm)))
    Pk = _t(Ak.apply_inv(g.K_lk))
    Hq = g.K_mo @ g.K_oo @ _t(g.K_mo)
    Hk = K_lo @ g.K_oo @ g.K_ol
    q1, q2 = _expected_sq_terms(Pq, g.K_qm, Hq)
    k1, k2 = _expected_sq_terms(Pk, K_kl, Hk)
    s4 = s2 * s2
    shared_q = (q1 / s4 + q2).unsqueeze(-1)
    shared_k = (k1 / s4 + k2).unsqueeze(-1)
    T_q = (nu * nu).sum(-2) + shared_q
    T_k = (Z * Z).sum(-2) + shared_k
    const = bound_constant(n, sigma)
    bound = -(T_q + T_k) / (2 * s2) + 2 * const
    return -bound


def regularizer_sparse(nu_a, z_a, X, p: SCGPHeadParams) -> torch.Tensor:
    nu_a, z_a = as_tensor(nu_a), as_tensor(z_a)
    g = sparse_grams(X, p, with_oo=True)
    return regularizer_sparse_terms(g, nu_a.unsqueeze(-1), z_a.unsqueeze(-1), p.base.sigma)[..., 0]


def predictive_variance_sparse_from_grams(g: SparseGrams) -> torch.Tensor:
    """Var[z_q | z_k] under the two DTC stages.

    The z_k-dependent parts of E[z_q z_q^T | z_k] cancel against the squared
    mean, leaving

        s2 I + K_qm A^{-1} K_mq
        + s^-4 K_qm A^{-1} K_mo (s2 I + K_ol B^{-1} K_lo) K_om A^{-1} K_mq.
    """
    s2 = g.sigma2
    A, B = _stages(g)
    n = g.n
    eye = torch.eye(n, dtype=g.K_qm.dtype)
    wq = A.whiten(_t(g.K_qm))
    wo = B.whiten(_t(g.K_ol))
    E_oo = s2 * eye + _t(wo) @ wo
    Pq = _t(A.apply_inv(_t(g.K_qm)))  # K_qm A^{-1}
    M = Pq @ g.K_mo  # n x n
    V = s2 * eye + _t(wq) @ wq + M @ E_oo @ _t(M) / (s2 * s2)
    return 0.5 * (V + _t(V))


def predictive_variance_sparse(X, p: SCGPHeadParams) -> torch.Tensor:
    return predictive_variance_sparse_from_grams(sparse_grams(X, p))


def forward_sparse(X, p: SCGPHeadParams, mc: McConfig | None = None, *, with_regularizer: bool = True,
                   keep_grams: bool = False) -> AttentionResult:
    """One sparse CGP head with Z = X W_v^T.

    The regularizer is closed form, so ``mc`` is accepted for interface
    symmetry with the exact head and otherwise unused.
    """
    X = as_tensor(X)
    g = sparse_grams(X, p, with_oo=with_regularizer)
    Z = X @ _t(p.base.W_v)
    V_plus = apply_sparse_attention(g, Z)
    if with_regularizer:
        U = regularizer_sparse_terms(g, V_plus, Z, p.base.sigma).sum(-1)
    else:
        U = torch.zeros(X.shape[:-2], dtype=X.dtype)
    return AttentionResult(V_plus=V_plus, U=U, layer_cache=g if keep_grams else None)
