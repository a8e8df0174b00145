"""End-to-end acceptance checks, one test per criterion.

Each test records a status line through :mod:`report`; the lines are
printed in the terminal summary. Criteria 11 and 12 are soft: they log a
warning instead of failing.
"""

import math
import time
import warnings
from dataclasses import replace

import numpy as np
import pytest
import torch

from cgpt.cgp_attention import (McConfig, attention_matrix_exact, exact_grams, forward_exact,
                                predictive_variance_exact, regularizer_terms)
from cgpt.gp_core import standard_normals
from cgpt.harness.bench import bench
from cgpt.harness.config import MetricOptions, RunConfig
from cgpt.harness.run import (build_dataset, effective_model_config, effective_train_config, evaluate, load_trained,
                              run)
from cgpt.kernels import BranchProjection, eval_cross
from cgpt.metrics import calibration, detection_metrics, mcc, ood_score, oversmoothing_probe
from cgpt.scgp_attention import attention_matrix_sparse, dtc_mean_operator, forward_sparse, regularizer_sparse, \
    sparse_grams
from cgpt.transformer import (CGPTransformer, ModelConfig, ParamStore, TrainConfig, accuracy, gradcheck_probes,
                              model_forward, predict, total_loss, train)
from instances import exact_head, points, sparse_head
from oracles import (auroc_all_pairs, dtc_log_mean, gauss_jordan_inverse, jensen_sides_exact, nested_mean,
                     nested_variance, se_kernel)
from report import record


def test_criterion_01_cross_kernel_reversal():
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst, asym = 0.0, 0.0
    for _ in range(1000):
        d, s = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        q = BranchProjection(torch.tensor(rng.normal(size=(s, d))), float(rng.uniform(0.2, 2.0)))
        k = BranchProjection(torch.tensor(rng.normal(size=(s, d))), float(rng.uniform(0.2, 2.0)))
        x, x2 = rng.normal(size=(2, d))
        worst = max(worst, abs(eval_cross(x, x2, k, q) - eval_cross(x2, x, q, k)))
        asym = max(asym, abs(eval_cross(x, x2, q, k) - eval_cross(x2, x, q, k)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-14 and asym > 0 and elapsed < 1.0
    record(1, ok, f"max reversal error {worst:.1e} over 1000; max asymmetry {asym:.3f}; {elapsed:.2f}s")
    assert ok


def test_criterion_02_nested_mean_oracle():
    fails, worst = 0, 0.0
    for seed in range(5):
        X, p = exact_head(100 + seed, n=3, d=2, s=1, sigma=0.5, scale=1.0, sq=1.2, sk=0.9)
        z = np.random.default_rng(seed).normal(size=3)
        est, se = nested_mean(*points(X, p), 1.2, 0.9, 0.25, z, 200_000, np.random.default_rng(50 + seed))
        got = attention_matrix_exact(X, p).numpy() @ z
        dev = np.abs(got - est) / se
        worst = max(worst, float(dev.max()))
        fails += int(np.any(dev > 3))
    ok = fails == 0
    record(2, ok, f"5 instances, 2e5 samples; worst deviation {worst:.2f} SE")
    assert ok


def _scalar_variance(X, p):
    x = float(X[0, 0])
    q, k, o = p.branch_q.W.item() * x, p.branch_k.W.item() * x, p.W_lat.item() * x
    sq, sk, s2 = p.branch_q.scale, p.branch_k.scale, p.sigma ** 2
    k_qo, k_ok = sq * math.exp(-0.5 * (q - o) ** 2), sk * math.exp(-0.5 * (o - k) ** 2)
    gain = k_qo / (1.0 + s2)
    return sq * sq - k_qo * gain + gain * gain * (1.0 - k_ok * k_ok / (sk * sk + s2))


def test_criterion_03_variance_oracle():
    devs = []
    for n, seed in ((1, 7), (2, 31)):
        X, p = exact_head(seed, n=n, d=2, s=1, sigma=0.5, scale=1.0, sq=1.3, sk=0.8)
        z = np.random.default_rng(seed).normal(size=n)
        est, se = nested_variance(*points(X, p), 1.3, 0.8, 0.25, z, 500_000, np.random.default_rng(seed + 1))
        devs.append(float(np.max(np.abs(predictive_variance_exact(X, p).numpy() - est) / se)))
    X1, p1 = exact_head(5, n=1, d=1, s=1, sigma=0.4, scale=1.0, sq=1.1, sk=0.7)
    scalar_err = abs(float(predictive_variance_exact(X1, p1)[0, 0]) - _scalar_variance(X1, p1))
    ok = max(devs) <= 3 and scalar_err <= 1e-10
    record(3, ok, f"n=1,2 with 5e5 samples: worst {max(devs):.2f} SE; scalar transcription error {scalar_err:.1e}")
    assert ok


def _exact_columns(X, p):
    g = exact_grams(X, p)
    V = forward_exact(X, p, McConfig(8, 0), with_regularizer=False).V_plus
    Z = (g.K_k + g.sigma2 * torch.eye(g.n, dtype=torch.float64)) @ (X @ p.W_v.T)
    return V[:, 0], Z[:, 0], g


def _exact_bound_sides(seed, sigma, count):
    X, p = exact_head(seed, n=3, sigma=sigma)
    nu, z, g = _exact_columns(X, p)
    R = float(regularizer_terms(g, nu[:, None], z[:, None], standard_normals((count, 3), seed))[0])
    lm, se, ml, se_ml = jensen_sides_exact(nu.numpy(), z.numpy(), *points(X, p), 1.0, 1.0, g.sigma2, count,
                                           np.random.default_rng(seed))
    return R, lm, se, ml, se_ml


def _sparse_bound_sides(seed, count):
    X, p = sparse_head(seed)
    g = sparse_grams(X, p, with_oo=True)
    nu = forward_sparse(X, p, with_regularizer=False).V_plus[:, 0]
    z = (X @ p.base.W_v.T)[:, 0]
    R = float(regularizer_sparse(nu, z, X, p))
    rng = np.random.default_rng(seed)
    K_oo, s2 = g.K_oo.numpy(), g.sigma2
    a = dtc_log_mean(nu.numpy(), g.K_qm.numpy(), g.K_mm.numpy(), g.K_mo.numpy(), K_oo, s2, count, rng)
    b = dtc_log_mean(z.numpy(), g.K_lk.T.numpy(), g.K_ll.numpy(), g.K_ol.T.numpy(), K_oo, s2, count, rng)
    return R, a[0] + b[0], math.hypot(a[1], b[1])


def test_criterion_04_jensen_bound():
    N = 1_000_000
    exact_ok = normalized_ok = mean_log_ok = sparse_ok = 0
    for seed in range(5):
        R, lm, se, ml, se_ml = _exact_bound_sides(seed, 0.1, N)
        exact_ok += -R <= lm + 3 * se
        lower = -R / 2 - 3 * math.log(2 * math.pi)
        normalized_ok += lower <= lm + 3 * se
        # the normalized bound is an unbiased estimate of E log p, checked against the oracle's own estimate
        mean_log_ok += abs(lower - ml) <= 3 * math.hypot(se_ml, 1e-3 * abs(ml))
        Rs, lms, ses = _sparse_bound_sides(seed, N)
        sparse_ok += -Rs <= lms + 3 * ses
    ok = exact_ok == normalized_ok == sparse_ok == 5
    record(4, ok, f"exact -R <= log E p on {exact_ok}/5 (sigma 0.1, 1e6 samples); normalized exact bound "
                  f"{normalized_ok}/5; E log p agreement {mean_log_ok}/5; sparse chain {sparse_ok}/5")
    assert ok


def test_literal_exact_bound_counterexample():
    """The unnormalized exact inequality is not a theorem: it breaks at sigma 0.5 while the normalized one holds."""
    R, lm, se, _, _ = _exact_bound_sides(0, 0.5, 200_000)
    assert -R > lm + 3 * se
    assert -R / 2 - 3 * math.log(2 * math.pi) <= lm + 3 * se


def test_criterion_05_dtc_reduction():
    errors = []
    for n in (4, 8, 16, 32):
        rng = np.random.default_rng(n + 7)
        P = rng.normal(size=(n + 3, 3)) * 1.5
        K = se_kernel(P, P)
        K_qo, K_oo = K[:3, 3:], K[3:, 3:]
        exact = K_qo @ gauss_jordan_inverse(K_oo + 0.1 * np.eye(n))
        got = dtc_mean_operator(torch.tensor(K_qo), torch.tensor(K_oo), torch.tensor(K_oo), 0.1).numpy()
        errors.append(np.linalg.norm(got - exact) / np.linalg.norm(exact))
    ok = max(errors) <= 1e-9
    record(5, ok, "relative Frobenius errors " + ", ".join(f"{e:.1e}" for e in errors))
    assert ok


def _stage_oracle(K_am, K_mm, K_mo, s2):
    A = K_mm + K_mo @ K_mo.T / s2
    return K_am @ gauss_jordan_inverse(A) @ K_mo / s2


def test_criterion_06_sparse_composition():
    worst = 0.0
    for seed in range(3):
        X, p = sparse_head(seed, n=9, m=4, l=5)
        g = sparse_grams(X, p)
        q = _stage_oracle(g.K_qm.numpy(), g.K_mm.numpy(), g.K_mo.numpy(), g.sigma2)
        k = _stage_oracle(g.K_ol.numpy(), g.K_ll.numpy(), g.K_lk.numpy(), g.sigma2)
        worst = max(worst, float(np.abs(attention_matrix_sparse(X, p).numpy() - q @ k).max()))
    ok = worst <= 1e-10
    record(6, ok, f"max entry error vs composed stage operators {worst:.1e}")
    assert ok


def _objective(kind, seed):
    cfg = ModelConfig(layers=2, heads=2, d=8, s=4, classes=3, attention=kind, inducing_m=4, inducing_l=4)
    model = CGPTransformer(cfg, seed)
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(3, 5, cfg.input_dim, generator=g, dtype=torch.float64)
    y = torch.tensor([0, 1, 2])
    model.init_inducing(x, 0)
    mc = McConfig(4, seed)

    def loss():
        out = model_forward(x, model, "train", mc=mc)
        return total_loss(out.logits, y, out.U_total, 0.5).total

    return ParamStore(model), loss


def test_criterion_07_gradient_contract():
    summary, ok = [], True
    for kind in ("CgpExact", "CgpSparse"):
        store, loss = _objective(kind, 1)
        probes = gradcheck_probes(store, loss, probe_count=50, eps=1e-5, seed=2)
        if kind == "CgpSparse":
            inducing = [n for n in store.names if n.endswith((".S", ".S_prime"))]
            probes += gradcheck_probes(store, loss, probe_count=10, eps=1e-5, seed=3, names=inducing)
            ok &= any(p.name in inducing and p.analytic != 0 for p in probes)
        err = max(p.rel_error for p in probes)
        ok &= err <= 1e-4 and len(probes) >= 50
        summary.append(f"{kind} {len(probes)} probes max rel error {err:.1e}")
    record(7, ok, "; ".join(summary))
    assert ok


@pytest.mark.slow
def test_criterion_08_complexity():
    rows = bench([256, 512], [16], repeats=20)
    t = {(r.attention, r.n): r.median_s for r in rows}
    ratio = t["CgpSparse", 512] / t["CgpSparse", 256]
    ok = t["CgpSparse", 512] < t["CgpExact", 512] and ratio <= 5
    record(8, ok, f"n=512 median exact {t['CgpExact', 512]:.4f}s sparse {t['CgpSparse', 512]:.4f}s; "
                  f"sparse 512/256 ratio {ratio:.2f}")
    assert ok


def test_criterion_09_metric_oracles():
    row = np.log([0.6, 0.4])
    rep = calibration(np.stack([row, row]), np.array([0, 1]))
    pred = np.array([1, 1, 1, 0, 0, 1, 0, 0])
    lab = np.array([1, 1, 1, 0, 0, 0, 1, 1])
    rng = np.random.default_rng(9)
    auroc_ok = True
    for _ in range(20):
        s_in = rng.integers(0, 20, size=int(rng.integers(1, 101))).astype(float)
        s_out = rng.integers(0, 20, size=int(rng.integers(1, 101))).astype(float)
        auroc_ok &= detection_metrics(s_in, s_out).auroc == auroc_all_pairs(s_in, s_out)
    checks = {
        "ece": abs(rep.ece - 0.1) <= 1e-12 and abs(rep.mce - 0.1) <= 1e-12,
        "mcc": abs(mcc(pred, lab) - 0.258199) <= 1e-6,
        "auroc_oracle": auroc_ok,
        "separation": detection_metrics([0.1, 0.2], [0.3, 0.4]).auroc == 1.0,
        "entropy": abs(ood_score(np.zeros(4), "Entropy") - math.log(4)) <= 1e-12,
    }
    ok = all(checks.values())
    record(9, ok, ", ".join(f"{k} {'ok' if v else 'wrong'}" for k, v in checks.items()))
    assert ok


@pytest.mark.slow
def test_criterion_10_training_sanity(tmp_path):
    cfg = RunConfig()
    assert cfg.model.layers == 2 and cfg.model.attention == "CgpExact" and cfg.train.epochs <= 200
    a = run(cfg, out_dir=tmp_path / "a", timestamp="fixed")
    b = run(cfg, out_dir=tmp_path / "b", timestamp="fixed")
    same = (tmp_path / "a" / "results.json").read_bytes() == (tmp_path / "b" / "results.json").read_bytes()
    model, _, ds = load_trained(tmp_path / "a")
    x_tr, y_tr = ds.split("train")
    train_acc = accuracy(predict(model, torch.as_tensor(x_tr)), y_tr)
    test_acc = a["clean"]["accuracy"]
    ok = train_acc >= 0.9 and test_acc >= 0.8 and same and a["clean"] == b["clean"]
    record(10, ok, f"{cfg.train.epochs} epochs: train {train_acc:.3f}, test {test_acc:.3f}; "
                   f"results.json byte-identical across runs: {same}")
    assert ok


def _corrupted_ece(cfg, regularize):
    ds = build_dataset(cfg)
    model, _ = train(effective_model_config(cfg, ds), effective_train_config(cfg), ds, regularize=regularize)
    res = evaluate(model, ds, cfg)
    return float(np.mean([row["ece"] for row in res["corruptions"].values()]))


@pytest.mark.slow
def test_criterion_11_calibration_echo():
    annealed, plain = [], []
    for seed in range(3):
        cfg = RunConfig(seed=seed, train=TrainConfig(epochs=60), metrics=MetricOptions(ood=False))
        annealed.append(_corrupted_ece(cfg, True))
        off = replace(cfg, train=replace(cfg.train, alpha_start=0.0, alpha_end=0.0))
        plain.append(_corrupted_ece(off, False))
    ok = np.mean(annealed) <= np.mean(plain)
    record(11, ok, f"corrupted-test ECE over 3 seeds: annealed {np.mean(annealed):.4f} "
                   f"({', '.join(f'{v:.4f}' for v in annealed)}) vs alpha=0 {np.mean(plain):.4f} "
                   f"({', '.join(f'{v:.4f}' for v in plain)})", soft=True)
    if not ok:
        warnings.warn(f"calibration echo not observed: {np.mean(annealed):.4f} > {np.mean(plain):.4f}")


@pytest.mark.slow
def test_criterion_12_oversmoothing_echo():
    ds = build_dataset(RunConfig())
    x = torch.as_tensor(ds.split("test")[0][:64])
    curves, in_range = {}, True
    for kind in ("CgpExact", "KernelAsym"):
        cfg = ModelConfig(layers=6, heads=2, d=32, s=8, classes=4, attention=kind)
        model, _ = train(cfg, TrainConfig(epochs=15), ds)
        with torch.no_grad():
            layers = model_forward(x, model, "eval", regularize=False).layer_outputs
        curves[kind] = oversmoothing_probe([L.numpy() for L in layers])
        in_range &= all(-1.0 <= v <= 1.0 for v in curves[kind])
    monotone = {k: bool(np.all(np.diff(v) >= 0)) for k, v in curves.items()}
    lower = np.mean(curves["CgpExact"]) <= np.mean(curves["KernelAsym"])
    detail = "; ".join(f"{k} [{', '.join(f'{v:.3f}' for v in c)}] nondecreasing {monotone[k]}"
                       for k, c in curves.items())
    record(12, in_range, f"{detail}; CGP mean below asymmetric {lower}", soft=True)
    assert in_range
