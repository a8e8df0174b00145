"""Exact correlated-GP attention.

Two GP branches ``z_q`` and ``z_k`` are affine input scalings of one
canonical GP ``z_o`` evaluated at latent inputs ``X_o = X W_lat^T``.  The
attention output is the nested conditional mean ``E[z_q | z_k]``:

    K_att = K_qo (K_o + s2 I)^{-1} K_ok (K_k + s2 I)^{-1}

All functions accept a single sequence (n x d) or a batch (B x n x d).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .gp_core import PsdSolveContext, psd_factor, standard_normals
from .kernels import BranchProjection, as_tensor, canonical_matrix


@dataclass
class CGPHeadParams:
    """Learnable quantities of one exact CGP head (W_* are s x d)."""

    branch_q: BranchProjection
    branch_k: BranchProjection
    W_v: torch.Tensor
    W_lat: torch.Tensor
    sigma: float | torch.Tensor = 0.1

    def __post_init__(self):
        self.W_v, self.W_lat = as_tensor(self.W_v), as_tensor(self.W_lat)
        s = self.branch_q.out_dim
        if self.branch_k.out_dim != s or self.W_v.shape[0] != s or self.W_lat.shape[0] != s:
            raise ValueError("branch, value and latent projections must share the output dimension s")
        d = self.branch_q.in_dim
        if self.branch_k.in_dim != d or self.W_v.shape[1] != d or self.W_lat.shape[1] != d:
            raise ValueError("all projections must share the input dimension d")
        for name in ("W_v", "W_lat"):
            if not torch.isfinite(getattr(self, name)).all():
                raise ValueError(f"{name} has non-finite entries")
        if float(torch.as_tensor(self.sigma).detach()) < 0:
            raise ValueError("noise scale sigma must be nonnegative")

    @property
    def sigma2(self):
        return self.sigma * self.sigma


@dataclass
class McConfig:
    sample_count: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")


@dataclass
class ExactGrams:
    """Gram bundle of one head: prior blocks K_q, K_k, K_o and cross blocks K_qo, K_ok."""

    K_q: torch.Tensor
    K_k: torch.Tensor
    K_o: torch.Tensor
    K_qo: torch.Tensor
    K_ok: torch.Tensor
    sigma2: float | torch.Tensor

    @property
    def n(self) -> int:
        return self.K_o.shape[-1]


@dataclass
class AttentionResult:
    V_plus: torch.Tensor
    U: torch.Tensor
    layer_cache: object | None = None
    predictive_cov: list | None = field(default=None)


def _t(M: torch.Tensor) -> torch.Tensor:
    return M.transpose(-1, -2)


def _sym(M: torch.Tensor) -> torch.Tensor:
    return 0.5 * (M + _t(M))


def latent_inputs(X, p: CGPHeadParams) -> torch.Tensor:
    X = as_tensor(X)
    if X.shape[-1] != p.W_lat.shape[1]:
        raise ValueError(f"token dim {X.shape[-1]} does not match W_lat columns {p.W_lat.shape[1]}")
    return X @ _t(p.W_lat)


def exact_grams(X, p: CGPHeadParams) -> ExactGrams:
    X = as_tensor(X)
    Q = p.branch_q.project(X)
    Kf = p.branch_k.project(X)
    Xo = latent_inputs(X, p)
    sq, sk = p.branch_q.scale, p.branch_k.scale
    return ExactGrams(
        K_q=sq * sq * canonical_matrix(Q, Q),
        K_k=sk * sk * canonical_matrix(Kf, Kf),
        K_o=canonical_matrix(Xo, Xo),
        K_qo=sq * canonical_matrix(Q, Xo),
        K_ok=sk * canonical_matrix(Xo, Kf),
        sigma2=p.sigma2,
    )


def attention_matrix_from_grams(g: ExactGrams) -> torch.Tensor:
    A_o = psd_factor(g.K_o, g.sigma2)
    A_k = psd_factor(g.K_k, g.sigma2)
    left = g.K_qo @ A_o.solve(g.K_ok)
    # left @ A_k^{-1} == (A_k^{-1} left^T)^T since A_k is symmetric
    return _t(A_k.solve(_t(left)))


def attention_matrix_exact(X, p: CGPHeadParams) -> torch.Tensor:
    return attention_matrix_from_grams(exact_grams(X, p))


def apply_attention(g: ExactGrams, Z: torch.Tensor, A_o: PsdSolveContext | None = None,
                    A_k: PsdSolveContext | None = None) -> torch.Tensor:
    """``K_att @ Z`` evaluated right to left without forming K_att."""
    A_o = A_o or psd_factor(g.K_o, g.sigma2)
    A_k = A_k or psd_factor(g.K_k, g.sigma2)
    return g.K_qo @ A_o.solve(g.K_ok @ A_k.solve(Z))


def predictive_variance_from_grams(g: ExactGrams) -> torch.Tensor:
    """Var[z_q | z_k] for the nested CGP model.

    Expanding E[z_q z_q^T | z_k] - E[z_q | z_k] E[z_q | z_k]^T, the terms in
    z_k cancel and what remains is

        K_q - K_qo A_o^{-1} K_oq + K_qo A_o^{-1} C_o A_o^{-1} K_oq,
        C_o = K_o - K_ok A_k^{-1} K_ko,

    with A_o = K_o + s2 I and A_k = K_k + s2 I.
    """
    A_o = psd_factor(g.K_o, g.sigma2)
    A_k = psd_factor(g.K_k, g.sigma2)
    K_oq = _t(g.K_qo)
    G = A_o.solve(K_oq)
    half_k = A_k.half_solve(_t(g.K_ok))
    C_o = g.K_o - _t(half_k) @ half_k
    V = g.K_q - g.K_qo @ G + _t(G) @ C_o @ G
    return _sym(V)


def predictive_variance_exact(X, p: CGPHeadParams) -> torch.Tensor:
    return predictive_variance_from_grams(exact_grams(X, p))


def conditional_blocks(g: ExactGrams, A_o: PsdSolveContext | None = None):
    """Covariances of z_q | z_o and z_k | z_o, both conditioned through A_o = K_o + s2 I."""
    A_o = A_o or psd_factor(g.K_o, g.sigma2)
    half_q = A_o.half_solve(_t(g.K_qo))
    half_k = A_o.half_solve(g.K_ok)
    Sigma_q = _sym(g.K_q - _t(half_q) @ half_q)
    Sigma_k = _sym(g.K_k - _t(half_k) @ half_k)
    return Sigma_q, Sigma_k


def latent_samples(g: ExactGrams, eps: torch.Tensor) -> torch.Tensor:
    """Map standard normals (..., N, n) to draws of z_o ~ N(0, K_o) as (..., n, N)."""
    L_o = psd_factor(g.K_o, 0.0).chol
    return L_o @ _t(eps)


def _mean_quadratic(targets: torch.Tensor, means: torch.Tensor, S: PsdSolveContext) -> torch.Tensor:
    """(1/N) sum_i (t_a - m_i)^T S^{-1} (t_a - m_i) for every column a of ``targets``.

    ``targets`` is (..., n, s), ``means`` is (..., n, N); returns (..., s).
    """
    n, s = targets.shape[-2], targets.shape[-1]
    N = means.shape[-1]
    diff = targets.unsqueeze(-1) - means.unsqueeze(-2)  # (..., n, s, N)
    white = S.half_solve(diff.reshape(*diff.shape[:-2], s * N))
    return (white * white).sum(-2).reshape(*targets.shape[:-2], s, N).mean(-1)


def regularizer_terms(g: ExactGrams, nu: torch.Tensor, Z: torch.Tensor, eps: torch.Tensor,
                      A_o: PsdSolveContext | None = None) -> torch.Tensor:
    """Per-output-dimension regularizer for all columns of ``nu`` and ``Z`` at once.

    Returns (..., s) with entry a equal to

        mean_i q(nu_a - m_q^i; Sigma_q) + logdet Sigma_q
      + mean_i q(z_a  - m_k^i; Sigma_k) + logdet Sigma_k

    where m_q^i = K_qo A_o^{-1} z_o^i, m_k^i = K_ko A_o^{-1} z_o^i and
    q(r; S) = r^T S^{-1} r.  The same latent draws are shared by every a.
    """
    A_o = A_o or psd_factor(g.K_o, g.sigma2)
    zo = latent_samples(g, eps)
    T = A_o.solve(zo)
    Mq = g.K_qo @ T
    Mk = _t(g.K_ok) @ T
    Sigma_q, Sigma_k = conditional_blocks(g, A_o)
    Fq = psd_factor(Sigma_q, 0.0)
    Fk = psd_factor(Sigma_k, 0.0)
    quad_q = _mean_quadratic(nu, Mq, Fq)
    quad_k = _mean_quadratic(Z, Mk, Fk)
    return quad_q + quad_k + Fq.logdet().unsqueeze(-1) + Fk.logdet().unsqueeze(-1)


def regularizer_exact(nu_a, z_a, X, p: CGPHeadParams, mc: McConfig) -> torch.Tensor:
    """Negated Monte-Carlo Jensen objective for one output dimension."""
    nu_a, z_a = as_tensor(nu_a), as_tensor(z_a)
    g = exact_grams(X, p)
    eps = standard_normals((mc.sample_count, g.n), mc.seed)
    return regularizer_terms(g, nu_a.unsqueeze(-1), z_a.unsqueeze(-1), eps)[..., 0]


def log_normalizer(n: int) -> float:
    return n * math.log(2 * math.pi)


def forward_exact(X, p: CGPHeadParams, mc: McConfig, *, eps: torch.Tensor | None = None,
                  with_regularizer: bool = True, keep_grams: bool = False) -> AttentionResult:
    """One exact CGP head.

    Z = (K_k + s2 I) X W_v^T, V_plus[:, a] = K_att z_a, and U sums the
    regularizer over the s output dimensions.  ``eps`` overrides the standard
    normals drawn from ``mc.seed``; it must have shape (..., N, n).
    """
    X = as_tensor(X)
    g = exact_grams(X, p)
    V = X @ _t(p.W_v)
    eye = torch.eye(g.n, dtype=X.dtype)
    Z = (g.K_k + p.sigma2 * eye) @ V
    A_o = psd_factor(g.K_o, g.sigma2)
    A_k = psd_factor(g.K_k, g.sigma2)
    V_plus = apply_attention(g, Z, A_o, A_k)
    if with_regularizer:
        if eps is None:
            eps = standard_normals((mc.sample_count, g.n), mc.seed)
        U = regularizer_terms(g, V_plus, Z, eps, A_o).sum(-1)
    else:
        U = torch.zeros(X.shape[:-2], dtype=X.dtype)
    return AttentionResult(V_plus=V_plus, U=U, layer_cache=g if keep_grams else None)


def forward_kernel_warm(X, p: CGPHeadParams) -> torch.Tensor:
    """Asymmetric kernel attention with the head's own branches (warm-start phase)."""
    X = as_tensor(X)
    Q = p.branch_q.project(X)
    Kf = p.branch_k.project(X)
    K = p.branch_q.scale * p.branch_k.scale * canonical_matrix(Q, Kf)
    return K @ (X @ _t(p.W_v))
