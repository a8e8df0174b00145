"""Regularized PSD linear algebra and Gaussian conditioning.

All solves go through :func:`psd_factor`, which tries a plain Cholesky of
``K + sigma2 I`` first and then escalates a diagonal jitter geometrically
(1e-10, 1e-9, ..., 1e-2) per batch element until the factorization succeeds.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass

import torch

from .kernels import DTYPE, as_tensor

JITTER_START = 1e-10
JITTER_FACTOR = 10.0
JITTER_CAP = 1e-2
SYMMETRY_TOL = 1e-10


class SingularMatrixError(ArithmeticError):
    """Raised when a matrix stays unfactorizable at the jitter cap."""

    def __init__(self, cap: float, where: str = ""):
        self.cap = cap
        msg = f"Cholesky factorization failed with jitter at cap {cap:g}"
        super().__init__(f"{msg} ({where})" if where else msg)


_jitter_log: contextvars.ContextVar[list | None] = contextvars.ContextVar("cgpt_jitter_log", default=None)


@contextlib.contextmanager
def record_jitter():
    """Collect every nonzero jitter applied inside the block.

    Yields a list of ``{"n": size, "jitter": value}`` dicts.
    """
    events: list = []
    token = _jitter_log.set(events)
    try:
        yield events
    finally:
        _jitter_log.reset(token)


def _log_jitter(n: int, jitter: torch.Tensor):
    events = _jitter_log.get()
    if events is None:
        return
    for v in jitter.reshape(-1).tolist():
        if v > 0:
            events.append({"n": n, "jitter": v})


@dataclass(frozen=True)
class PsdSolveContext:
    """Cholesky factor of ``K + sigma2 I + jitter I``.

    ``jitter_applied`` has the batch shape of ``K``; it is a 0-d tensor for a
    single matrix.
    """

    chol: torch.Tensor
    jitter_applied: torch.Tensor

    @property
    def n(self) -> int:
        return self.chol.shape[-1]

    def solve(self, B: torch.Tensor) -> torch.Tensor:
        return torch.cholesky_solve(B, self.chol)

    def half_solve(self, B: torch.Tensor) -> torch.Tensor:
        """L^{-1} B, so that ``||L^{-1} b||^2 = b^T (K + sigma2 I)^{-1} b``."""
        return torch.linalg.solve_triangular(self.chol, B, upper=False)

    def logdet(self) -> torch.Tensor:
        return 2.0 * torch.log(torch.diagonal(self.chol, dim1=-2, dim2=-1)).sum(-1)

    def matrix(self) -> torch.Tensor:
        return self.chol @ self.chol.transpose(-1, -2)


def _check_square(K: torch.Tensor):
    if K.ndim < 2 or K.shape[-1] != K.shape[-2]:
        raise ValueError(f"expected square matrix, got shape {tuple(K.shape)}")


def psd_factor(K, sigma2: float | torch.Tensor = 0.0, *, check_symmetric: bool = True) -> PsdSolveContext:
    """Factorize ``K + sigma2 I`` with the escalating jitter policy."""
    K = as_tensor(K)
    _check_square(K)
    n = K.shape[-1]
    if check_symmetric:
        asym = (K - K.transpose(-1, -2)).detach().abs().max() if K.numel() else torch.zeros(())
        if float(asym) > SYMMETRY_TOL:
            raise ValueError(f"matrix is not symmetric (max asymmetry {float(asym):.3g})")
    if float(torch.as_tensor(sigma2).detach().min()) < 0:
        raise ValueError("sigma2 must be nonnegative")
    eye = torch.eye(n, dtype=K.dtype)
    sigma2 = torch.as_tensor(sigma2, dtype=K.dtype)
    if sigma2.ndim > 0:
        sigma2 = sigma2[..., None, None]
    base = K + sigma2 * eye
    batch = base.shape[:-2]
    jitter = torch.zeros(batch, dtype=K.dtype)
    chol, info = torch.linalg.cholesky_ex(base)
    if not bool((info > 0).any()):
        return PsdSolveContext(chol, jitter)
    # pick jitter levels without autograd, then factor once more so no failed
    # factorization ever enters the backward graph
    with torch.no_grad():
        plain = base.detach()
        failed = info > 0
        level = JITTER_START
        while bool(failed.any()):
            if level > JITTER_CAP * (1 + 1e-9):
                raise SingularMatrixError(JITTER_CAP, f"n={n}")
            jitter = torch.where(failed, torch.full_like(jitter, level), jitter)
            _, info = torch.linalg.cholesky_ex(plain + jitter[..., None, None] * eye)
            failed = failed & (info > 0)
            level *= JITTER_FACTOR
    chol, info = torch.linalg.cholesky_ex(base + jitter[..., None, None] * eye)
    if bool((info > 0).any()):
        raise SingularMatrixError(JITTER_CAP, f"n={n}")
    _log_jitter(n, jitter)
    return PsdSolveContext(chol, jitter)


def psd_solve(K, sigma2, B) -> torch.Tensor:
    """Solve ``(K + sigma2 I + jitter I) X = B``."""
    B = as_tensor(B)
    return psd_factor(K, sigma2).solve(B)


def logdet_psd(K, sigma2=0.0) -> torch.Tensor:
    """log det(K + sigma2 I + jitter I) from the Cholesky factor."""
    return psd_factor(K, sigma2).logdet()


def conditional(K_cross, K_obs, sigma2, z_obs) -> torch.Tensor:
    """Gaussian conditional mean ``K_cross (K_obs + sigma2 I)^{-1} z_obs``."""
    K_cross, z_obs = as_tensor(K_cross), as_tensor(z_obs)
    vec = z_obs.ndim == K_cross.ndim - 1
    rhs = z_obs.unsqueeze(-1) if vec else z_obs
    out = K_cross @ psd_solve(K_obs, sigma2, rhs)
    return out.squeeze(-1) if vec else out


@dataclass
class GaussianPredictive:
    mean: torch.Tensor
    covariance: torch.Tensor


def conditional_full(K_query, K_cross, K_obs, sigma2, z_obs) -> GaussianPredictive:
    """Predictive mean and covariance of a GP conditioned on noisy observations."""
    K_query, K_cross, z_obs = as_tensor(K_query), as_tensor(K_cross), as_tensor(z_obs)
    _check_square(K_query)
    ctx = psd_factor(K_obs, sigma2)
    mean = K_cross @ ctx.solve(z_obs.unsqueeze(-1))
    half = ctx.half_solve(K_cross.transpose(-1, -2))
    cov = K_query - half.transpose(-1, -2) @ half
    cov = 0.5 * (cov + cov.transpose(-1, -2))
    return GaussianPredictive(mean.squeeze(-1), cov)


def standard_normals(shape, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
    return torch.randn(shape, generator=gen, dtype=DTYPE)


def sample_mvn(K, count: int, seed: int) -> torch.Tensor:
    """Draw ``count`` rows from N(0, K + jitter I) by reparameterization.

    The draws are ``L eps`` with ``eps`` standard normal from ``seed``, so the
    output is differentiable in ``K`` and bit-identical for a fixed seed.
    """
    if count < 1:
        raise ValueError("count must be positive")
    K = as_tensor(K)
    ctx = psd_factor(K, 0.0)
    eps = standard_normals((count, K.shape[-1]), seed)
    return eps @ ctx.chol.transpose(-1, -2)


def gaussian_logpdf(x, mean, cov) -> torch.Tensor:
    """log N(x; mean, cov) for a single vector (used by tests and oracles)."""
    x, mean = as_tensor(x), as_tensor(mean)
    ctx = psd_factor(cov, 0.0)
    r = ctx.half_solve((x - mean).unsqueeze(-1)).squeeze(-1)
    n = x.shape[-1]
    return -0.5 * ((r * r).sum(-1) + ctx.logdet() + n * math.log(2 * math.pi))
