"""Seeded random head configurations shared by the attention tests."""

import numpy as np
import torch

from cgpt.cgp_attention import CGPHeadParams
from cgpt.kernels import BranchProjection
from cgpt.scgp_attention import InducingSets, SCGPHeadParams


def exact_head(seed, n=3, d=4, s=2, sigma=0.1, scale=0.5, sq=1.0, sk=1.0, x_scale=1.0):
    rng = np.random.default_rng(seed)

    def w():
        return torch.tensor(rng.normal(size=(s, d)) * scale)

    X = torch.tensor(rng.normal(size=(n, d)) * x_scale)
    return X, CGPHeadParams(BranchProjection(w(), sq), BranchProjection(w(), sk), w(), w(), sigma)


def sparse_head(seed, n=5, d=4, s=2, m=3, l=3, sigma=0.3, scale=0.5):
    X, base = exact_head(seed, n, d, s, sigma, scale)
    rng = np.random.default_rng(seed + 1000)
    S = torch.tensor(rng.normal(size=(m, s)))
    Sp = torch.tensor(rng.normal(size=(l, s)))
    return X, SCGPHeadParams(base, InducingSets(S, Sp))


def points(X, p):
    """(Q, X_o, K) canonical-space points as numpy arrays."""
    return (p.branch_q.project(X).numpy(), (X @ p.W_lat.T).numpy(), p.branch_k.project(X).numpy())
