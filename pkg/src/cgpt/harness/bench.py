"""Wall-time and memory benchmark of one exact vs one sparse CGP attention step."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

from ..cgp_attention import CGPHeadParams, McConfig, forward_exact
from ..kernels import DTYPE, BranchProjection
from ..scgp_attention import InducingSets, SCGPHeadParams, forward_sparse


@dataclass
class BenchRow:
    attention: str
    n: int
    m: int | None
    repeats: int
    median_s: float
    iqr_s: float
    saved_bytes: int


def _params(d: int, s: int, n_inducing: int | None, gen: torch.Generator):
    def w():
        return (torch.randn(s, d, generator=gen, dtype=DTYPE) / math.sqrt(d)).requires_grad_()

    base = CGPHeadParams(BranchProjection(w()), BranchProjection(w()), w(), w(), sigma=0.1)
    if n_inducing is None:
        return base
    S = torch.randn(n_inducing, s, generator=gen, dtype=DTYPE).requires_grad_()
    Sp = torch.randn(n_inducing, s, generator=gen, dtype=DTYPE).requires_grad_()
    return SCGPHeadParams(base, InducingSets(S, Sp))


def _leaves(p):
    base = p.base if isinstance(p, SCGPHeadParams) else p
    out = [base.branch_q.W, base.branch_k.W, base.W_v, base.W_lat]
    if isinstance(p, SCGPHeadParams):
        out += [p.inducing.S, p.inducing.S_prime]
    return out


def step(X, p, mc: McConfig):
    """Forward (output and regularizer) plus backward of one head."""
    if isinstance(p, SCGPHeadParams):
        r = forward_sparse(X, p, mc)
    else:
        r = forward_exact(X, p, mc)
    loss = r.V_plus.square().mean() + r.U
    torch.autograd.grad(loss, _leaves(p))


def saved_bytes(X, p, mc: McConfig) -> int:
    """Bytes of distinct storages autograd keeps alive for the backward pass."""
    seen: dict = {}

    def pack(t):
        st = t.untyped_storage()
        seen[st.data_ptr()] = st.nbytes()
        return t

    with torch.autograd.graph.saved_tensors_hooks(pack, lambda t: t):
        if isinstance(p, SCGPHeadParams):
            forward_sparse(X, p, mc)
        else:
            forward_exact(X, p, mc)
    return int(sum(seen.values()))


def time_cell(X, p, repeats: int, mc: McConfig):
    step(X, p, mc)  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        step(X, p, mc)
        times.append(time.perf_counter() - t0)
    q1, med, q3 = np.percentile(times, [25, 50, 75])
    return float(med), float(q3 - q1)


def bench(n_values, inducing_values, repeats: int = 20, *, d: int = 32, s: int = 8, seed: int = 0,
          mc: McConfig | None = None) -> list[BenchRow]:
    """Median and IQR wall time per (n, m) cell; exact rows carry no m."""
    if repeats < 5:
        raise ValueError("repeats must be at least 5")
    mc = mc or McConfig(8, seed)
    rows = []
    for n in n_values:
        gen = torch.Generator().manual_seed(seed + n)
        X = torch.randn(n, d, generator=gen, dtype=DTYPE)
        p = _params(d, s, None, gen)
        med, iqr = time_cell(X, p, repeats, mc)
        rows.append(BenchRow("CgpExact", n, None, repeats, med, iqr, saved_bytes(X, p, mc)))
        for m in inducing_values:
            p = _params(d, s, m, gen)
            med, iqr = time_cell(X, p, repeats, mc)
            rows.append(BenchRow("CgpSparse", n, m, repeats, med, iqr, saved_bytes(X, p, mc)))
    return rows


def write_bench_csv(rows: list[BenchRow], path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(asdict(rows[0])))
        w.writeheader()
        for r in rows:
            d = asdict(r)
            d["m"] = "" if d["m"] is None else d["m"]
            w.writerow(d)
