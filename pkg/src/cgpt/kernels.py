"""Canonical, branch, cross-covariance and baseline kernels.

Every kernel here is evaluated on the difference form ``sum((u - v) ** 2)``
so that ``k(x, x) == 1`` holds exactly and swapping arguments is bit-exact.
Matrix evaluators work on torch tensors with arbitrary leading batch dims.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import torch

ArrayLike = Union[torch.Tensor, Sequence[float], Sequence[Sequence[float]]]
Scale = Union[float, torch.Tensor]

DTYPE = torch.float64


def as_tensor(x, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == dtype else x.to(dtype)
    return torch.as_tensor(x, dtype=dtype)


def sq_dist(A: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    """Pairwise squared distances between the rows of A (..., n, s) and B (..., m, s)."""
    if A.shape[-1] != B.shape[-1]:
        raise ValueError(f"dimension mismatch: {A.shape[-1]} vs {B.shape[-1]}")
    # elementwise mode: exact zeros for equal rows and no (n, m, s) intermediate
    return torch.cdist(A, B, compute_mode="donot_use_mm_for_euclid_dist").square()


def canonical_matrix(A: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    """Gram of the parameter-free SE kernel exp(-0.5 ||a - b||^2)."""
    return torch.exp(-0.5 * sq_dist(A, B))


@dataclass
class BranchProjection:
    """Affine input scaling ``x -> x W^T`` with output scale ``scale``.

    ``W`` is s x d; ``scale`` may be a python float or a 0-d tensor (so it
    can be learnable).
    """

    W: torch.Tensor
    scale: Scale = 1.0

    def __post_init__(self):
        self.W = as_tensor(self.W)
        if self.W.ndim != 2 or min(self.W.shape) < 1:
            raise ValueError(f"W must be a non-empty s x d matrix, got shape {tuple(self.W.shape)}")
        if not torch.isfinite(self.W).all():
            raise ValueError("W has non-finite entries")
        if float(torch.as_tensor(self.scale).detach()) <= 0:
            raise ValueError("branch scale must be positive")

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def project(self, X: torch.Tensor) -> torch.Tensor:
        X = as_tensor(X)
        if X.shape[-1] != self.in_dim:
            raise ValueError(f"input dim {X.shape[-1]} does not match projection columns {self.in_dim}")
        return X @ self.W.transpose(-1, -2)


class KernelTag(str, enum.Enum):
    CANONICAL_SE = "CanonicalSE"
    ARD_RBF = "ArdRbf"
    EXP_DOT = "ExpDot"


@dataclass
class KernelKind:
    """Baseline kernel selection.

    CanonicalSE carries no parameters; ArdRbf and ExpDot carry an output
    variance and one positive lengthscale per input dimension.
    """

    tag: KernelTag = KernelTag.ARD_RBF
    variance: float = 1.0
    lengthscales: torch.Tensor | None = field(default=None)

    def __post_init__(self):
        self.tag = KernelTag(self.tag)
        if self.tag is KernelTag.CANONICAL_SE:
            if self.lengthscales is not None:
                raise ValueError("CanonicalSE is parameter-free")
            return
        if self.variance <= 0:
            raise ValueError("output variance must be positive")
        if self.lengthscales is not None:
            self.lengthscales = as_tensor(self.lengthscales)
            if (self.lengthscales <= 0).any():
                raise ValueError("lengthscales must be positive")

    def _scales(self, dim: int) -> torch.Tensor:
        if self.lengthscales is None:
            return torch.ones(dim, dtype=DTYPE)
        if self.lengthscales.shape[-1] != dim:
            raise ValueError(f"lengthscale vector has length {self.lengthscales.shape[-1]}, inputs have {dim}")
        return self.lengthscales

    def matrix(self, A: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
        A, B = as_tensor(A), as_tensor(B)
        if A.shape[-1] != B.shape[-1]:
            raise ValueError(f"dimension mismatch: {A.shape[-1]} vs {B.shape[-1]}")
        if self.tag is KernelTag.CANONICAL_SE:
            return canonical_matrix(A, B)
        ls = self._scales(A.shape[-1]).to(A.dtype)
        if self.tag is KernelTag.ARD_RBF:
            root = ls.sqrt()
            return self.variance * torch.exp(-0.5 * sq_dist(A / root, B / root))
        return self.variance * torch.exp((A / ls) @ B.transpose(-1, -2))

    symmetric = True


def _vec(x) -> torch.Tensor:
    x = as_tensor(x)
    if x.ndim != 1:
        raise ValueError("expected a 1-d vector")
    return x


def eval_canonical(x, x2) -> float:
    """kappa_o(x, x') = exp(-0.5 ||x - x'||^2)."""
    x, x2 = _vec(x), _vec(x2)
    return float(canonical_matrix(x[None], x2[None])[0, 0])


def eval_branch(x, x2, b: BranchProjection) -> float:
    x, x2 = _vec(x), _vec(x2)
    return float(branch_matrix(x[None], x2[None], b)[0, 0])


def eval_cross(x, x2, a: BranchProjection, b: BranchProjection) -> float:
    """Cross-covariance sigma_a sigma_b kappa_o(x W_a^T, x' W_b^T); not symmetric in general."""
    x, x2 = _vec(x), _vec(x2)
    return float(cross_matrix(x[None], x2[None], a, b)[0, 0])


def eval_baseline(x, x2, k: KernelKind) -> float:
    x, x2 = _vec(x), _vec(x2)
    return float(k.matrix(x[None], x2[None])[0, 0])


def branch_matrix(A: torch.Tensor, B: torch.Tensor, b: BranchProjection) -> torch.Tensor:
    return b.scale**2 * canonical_matrix(b.project(A), b.project(B))


def cross_matrix(A: torch.Tensor, B: torch.Tensor, a: BranchProjection, b: BranchProjection) -> torch.Tensor:
    if a.out_dim != b.out_dim:
        raise ValueError("branches must project into the same canonical space")
    return a.scale * b.scale * canonical_matrix(a.project(A), b.project(B))


class Evaluator:
    """Pairwise kernel evaluator usable with :func:`gram`."""

    symmetric: bool = False

    def __call__(self, x, x2) -> float:
        raise NotImplementedError

    def matrix(self, A: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class Canonical(Evaluator):
    symmetric = True

    def __call__(self, x, x2):
        return eval_canonical(x, x2)

    def matrix(self, A, B):
        return canonical_matrix(as_tensor(A), as_tensor(B))


class Branch(Evaluator):
    symmetric = True

    def __init__(self, b: BranchProjection):
        self.b = b

    def __call__(self, x, x2):
        return eval_branch(x, x2, self.b)

    def matrix(self, A, B):
        return branch_matrix(as_tensor(A), as_tensor(B), self.b)


class Cross(Evaluator):
    def __init__(self, a: BranchProjection, b: BranchProjection):
        self.a, self.b = a, b
        self.symmetric = a is b

    def __call__(self, x, x2):
        return eval_cross(x, x2, self.a, self.b)

    def matrix(self, A, B):
        return cross_matrix(as_tensor(A), as_tensor(B), self.a, self.b)


class Baseline(Evaluator):
    symmetric = True

    def __init__(self, k: KernelKind):
        self.k = k

    def __call__(self, x, x2):
        return eval_baseline(x, x2, self.k)

    def matrix(self, A, B):
        return self.k.matrix(A, B)


@dataclass
class GramMatrix:
    entries: torch.Tensor
    symmetric: bool = False

    def __post_init__(self):
        if self.symmetric:
            E = self.entries
            if E.shape[-1] != E.shape[-2] or not torch.allclose(E, E.transpose(-1, -2), rtol=0, atol=1e-12):
                raise ValueError("symmetric flag requires a square matrix equal to its transpose")


def gram(A, B, evaluator: Evaluator | Callable) -> GramMatrix:
    """Materialize ``evaluator(A_i, B_j)`` for every pair of rows.

    Evaluators exposing ``matrix`` are evaluated vectorized; plain callables
    fall back to a double loop.
    """
    A, B = as_tensor(A), as_tensor(B)
    if A.ndim == 1:
        A = A[:, None]
    if B.ndim == 1:
        B = B[:, None]
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValueError("gram needs non-empty point lists")
    if hasattr(evaluator, "matrix"):
        entries = evaluator.matrix(A, B)
    else:
        entries = torch.tensor([[float(evaluator(a, b)) for b in B] for a in A], dtype=DTYPE)
    same = A.shape == B.shape and bool(torch.equal(A, B))
    symmetric = same and bool(getattr(evaluator, "symmetric", False))
    return GramMatrix(entries, symmetric)
