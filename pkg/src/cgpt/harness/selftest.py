"""Fast algebraic identity checks run by ``cgpt selftest``."""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
import torch

from .. import metrics as M
from ..cgp_attention import CGPHeadParams, apply_attention, attention_matrix_from_grams, exact_grams
from ..gp_core import psd_solve
from ..kernels import DTYPE, BranchProjection, canonical_matrix
from ..scgp_attention import (InducingSets, SCGPHeadParams, apply_sparse_attention, attention_matrix_sparse_from_grams,
                              dtc_mean_operator, sparse_grams)
from ..transformer import read_checkpoint, write_checkpoint


def _check(name: str, err: float, tol: float) -> dict:
    return {"name": name, "error": float(err), "tol": tol, "pass": bool(err <= tol)}


def _head(gen, d=6, s=3, sigma=0.3):
    def w():
        return torch.randn(s, d, generator=gen, dtype=DTYPE) / np.sqrt(d)

    return CGPHeadParams(BranchProjection(w()), BranchProjection(w()), w(), w(), sigma=sigma)


def selftest(seed: int = 0) -> list[dict]:
    gen = torch.Generator().manual_seed(seed)
    X = torch.randn(7, 6, generator=gen, dtype=DTYPE)
    p = _head(gen)
    out = []

    K = canonical_matrix(X, X)
    out.append(_check("canonical kernel unit diagonal", (K.diagonal() - 1).abs().max(), 1e-14))
    out.append(_check("canonical kernel symmetry", (K - K.T).abs().max(), 0.0))

    B = torch.randn(7, 2, generator=gen, dtype=DTYPE)
    ref = torch.linalg.solve(K + 0.1 * torch.eye(7, dtype=DTYPE), B)
    out.append(_check("psd_solve matches dense solve", (psd_solve(K, 0.1, B) - ref).abs().max(), 1e-10))

    g = exact_grams(X, p)
    Z = torch.randn(7, 3, generator=gen, dtype=DTYPE)
    out.append(_check("exact attention right-to-left product",
                      (attention_matrix_from_grams(g) @ Z - apply_attention(g, Z)).abs().max(), 1e-10))

    sp = SCGPHeadParams(p, InducingSets(torch.randn(4, 3, generator=gen, dtype=DTYPE),
                                        torch.randn(4, 3, generator=gen, dtype=DTYPE)))
    sg = sparse_grams(X, sp)
    out.append(_check("sparse attention right-to-left product",
                      (attention_matrix_sparse_from_grams(sg) @ Z - apply_sparse_attention(sg, Z)).abs().max(), 1e-10))

    # Woodbury: the m x m DTC form equals the n x n Nystrom form
    s2 = sg.sigma2
    Kmm_inv_Kmo = torch.linalg.solve(sg.K_mm, sg.K_mo)
    nystrom = sg.K_mo.T @ Kmm_inv_Kmo
    dense = sg.K_qm @ Kmm_inv_Kmo @ torch.linalg.inv(nystrom + s2 * torch.eye(7, dtype=DTYPE))
    out.append(_check("DTC operator Woodbury identity",
                      (dtc_mean_operator(sg.K_qm, sg.K_mm, sg.K_mo, s2) - dense).abs().max(), 1e-8))

    logits = np.log(np.array([[0.9, 0.1], [0.2, 0.8], [0.7, 0.3]]))
    rep = M.calibration(logits, np.array([0, 1, 1]), bins=10)
    # one sample per bin: |1 - 0.9|, |1 - 0.8|, |0 - 0.7|
    out.append(_check("calibration hand example ECE", abs(rep.ece - 1.0 / 3.0), 1e-12))

    tensors = {"a": torch.randn(2, 3, generator=gen, dtype=DTYPE), "b.c": torch.randn(4, generator=gen, dtype=DTYPE)}
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "t.ckpt"
        write_checkpoint(path, tensors)
        back = read_checkpoint(path)
    out.append(_check("checkpoint round trip",
                      max(float((tensors[k] - back[k]).abs().max()) for k in tensors) + (list(back) != list(tensors)),
                      0.0))
    return out
