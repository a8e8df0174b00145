"""Calibration, OOD-detection and oversmoothing metrics (numpy)."""

from __future__ import annotations

import csv
import enum
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax
from scipy.stats import rankdata
from sklearn.metrics import average_precision_score, matthews_corrcoef, roc_curve

DEFAULT_BINS = 15


@dataclass
class CalibrationBin:
    confidence: float
    accuracy: float
    weight: float


@dataclass
class CalibrationReport:
    accuracy: float
    mcc: float
    nll: float
    ece: float
    mce: float
    bin_count: int
    bins: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_labels(labels, C: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be a 1-d integer vector")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"label out of range for {C} classes")
    return labels


def predictions(logits) -> np.ndarray:
    # np.argmax returns the first maximum, so the lowest class index wins ties
    return np.argmax(np.asarray(logits), axis=-1)


def nll(logits, labels) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[1])
    return float(-log_softmax(logits, axis=1)[np.arange(len(labels)), labels].mean())


def mcc(predictions, labels) -> float:
    """Binary Matthews correlation; 0 whenever a marginal count vanishes."""
    p = np.asarray(predictions).astype(bool)
    y = np.asarray(labels).astype(bool)
    tp = float(np.sum(p & y))
    tn = float(np.sum(~p & ~y))
    fp = float(np.sum(p & ~y))
    fn = float(np.sum(~p & y))
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / np.sqrt(denom)


def bin_index(confidence: np.ndarray, bins: int) -> np.ndarray:
    """Equal-width bins on [0, 1] with right-closed intervals (b/B, (b+1)/B]."""
    return np.clip(np.ceil(confidence * bins).astype(int) - 1, 0, bins - 1)


def calibration(logits, labels, bins: int = DEFAULT_BINS) -> CalibrationReport:
    """Accuracy, MCC, NLL and ECE/MCE over equal-width confidence bins.

    MCC is the binary coefficient for two classes and the multiclass
    generalization otherwise.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ValueError("logits must be a non-empty N x C matrix")
    if bins < 1:
        raise ValueError("bins must be positive")
    N, C = logits.shape
    labels = _check_labels(labels, C)
    if labels.shape[0] != N:
        raise ValueError("logits and labels disagree on N")
    probs = softmax(logits, axis=1)
    pred = predictions(logits)
    conf = probs[np.arange(N), pred]
    correct = (pred == labels).astype(np.float64)
    idx = bin_index(conf, bins)
    table, ece, mce = [], 0.0, 0.0
    for b in range(bins):
        mask = idx == b
        count = int(mask.sum())
        if count == 0:
            table.append(CalibrationBin(0.0, 0.0, 0.0))
            continue
        c, a, w = conf[mask].mean(), correct[mask].mean(), count / N
        gap = abs(a - c)
        ece += w * gap
        mce = max(mce, gap)
        table.append(CalibrationBin(float(c), float(a), float(w)))
    if C == 2:
        score = mcc(pred, labels)
    else:
        with warnings.catch_warnings():
            # a single observed label is valid input and scores 0
            warnings.simplefilter("ignore", UserWarning)
            score = float(matthews_corrcoef(labels, pred))
    return CalibrationReport(float(correct.mean()), float(score), nll(logits, labels), float(ece), float(mce), bins, table)


# ---------------------------------------------------------------- OOD detection


class Detector(str, enum.Enum):
    MAX_SOFTMAX = "MaxSoftmax"
    ENTROPY = "Entropy"
    ENERGY = "EnergyBased"
    KL_MATCHING = "KLMatching"


DETECTORS = tuple(Detector)


def fit_kl_templates(logits, classes: int | None = None) -> dict[int, np.ndarray]:
    """Mean softmax of the samples predicted as each class (classes never predicted get no template)."""
    logits = np.asarray(logits, dtype=np.float64)
    probs = softmax(logits, axis=1)
    pred = predictions(logits)
    C = classes or logits.shape[1]
    return {c: probs[pred == c].mean(0) for c in range(C) if np.any(pred == c)}


def _kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    tiny = np.finfo(np.float64).tiny
    return np.sum(p * (np.log(np.maximum(p, tiny)) - np.log(np.maximum(q, tiny))), axis=-1)


def ood_scores(logits, detector, templates: dict | None = None) -> np.ndarray:
    """Per-sample OOD scores for an N x C logit matrix (higher means more OOD)."""
    detector = Detector(detector)
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    probs = softmax(logits, axis=1)
    if detector is Detector.MAX_SOFTMAX:
        return -probs.max(1)
    if detector is Detector.ENTROPY:
        return -np.sum(probs * log_softmax(logits, axis=1), axis=1)
    if detector is Detector.ENERGY:
        return -logsumexp(logits, axis=1)
    if not templates:
        raise ValueError("KLMatching needs fitted class templates")
    T = np.stack(list(templates.values()))
    return np.min(_kl(probs[:, None, :], T[None, :, :]), axis=1)


def ood_score(logits, detector, templates: dict | None = None) -> float:
    return float(ood_scores(np.asarray(logits)[None, :], detector, templates)[0])


@dataclass
class DetectionMetrics:
    auroc: float
    aupr_in: float
    aupr_out: float
    fpr_at_95: float


def fpr_at_tpr(fpr: np.ndarray, tpr: np.ndarray, target: float = 0.95) -> float:
    """FPR where the ROC first reaches ``target`` TPR, interpolated linearly from the previous point."""
    i = int(np.argmax(tpr >= target))
    if i == 0 or tpr[i] == tpr[i - 1]:
        return float(fpr[i])
    t = (target - tpr[i - 1]) / (tpr[i] - tpr[i - 1])
    return float(fpr[i - 1] + t * (fpr[i] - fpr[i - 1]))


def auroc(scores_in, scores_out) -> float:
    """Mann-Whitney statistic with half credit for ties, OOD positive.

    Average ranks are half-integers, so twice the rank sum is an exact
    integer and the result is a single correctly rounded division.
    """
    n_in, n_out = len(scores_in), len(scores_out)
    ranks = rankdata(np.concatenate([scores_in, scores_out]))
    twice_u = int(round(2 * ranks[n_in:].sum())) - n_out * (n_out + 1)
    return twice_u / (2 * n_in * n_out)


def detection_metrics(scores_in, scores_out) -> DetectionMetrics:
    """OOD is the positive class for AUROC, AUPR-OUT and FPR@95; AUPR-IN flips roles and signs."""
    s_in = np.asarray(scores_in, dtype=np.float64).ravel()
    s_out = np.asarray(scores_out, dtype=np.float64).ravel()
    if s_in.size == 0 or s_out.size == 0:
        raise ValueError("both score vectors must be non-empty")
    y = np.concatenate([np.zeros(s_in.size), np.ones(s_out.size)])
    s = np.concatenate([s_in, s_out])
    fpr, tpr, _ = roc_curve(y, s, drop_intermediate=False)
    return DetectionMetrics(
        auroc=auroc(s_in, s_out),
        aupr_in=float(average_precision_score(1 - y, -s)),
        aupr_out=float(average_precision_score(y, s)),
        fpr_at_95=fpr_at_tpr(fpr, tpr, 0.95),
    )


@dataclass
class OODReport:
    detectors: dict  # detector name -> DetectionMetrics

    def to_dict(self) -> dict:
        return {k: asdict(v) for k, v in self.detectors.items()}


def ood_report(logits_in, logits_out, templates: dict | None = None) -> OODReport:
    out = {}
    for det in DETECTORS:
        if det is Detector.KL_MATCHING and not templates:
            continue
        out[det.value] = detection_metrics(ood_scores(logits_in, det, templates), ood_scores(logits_out, det, templates))
    return OODReport(out)


# ---------------------------------------------------------------- oversmoothing


def mean_pairwise_cosine(tokens) -> float:
    """Mean cosine similarity over unordered token pairs; zero vectors count as 0."""
    X = np.asarray(tokens, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least two tokens")
    norms = np.linalg.norm(X, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    U = X / safe[:, None]
    U[norms == 0] = 0.0
    S = U @ U.T
    iu = np.triu_indices(n, k=1)
    return float(np.clip(S[iu], -1.0, 1.0).mean())


def oversmoothing_probe(layer_outputs) -> list[float]:
    """Per layer, mean pairwise token cosine similarity.

    Each entry is an n x d matrix or a batch (B, n, d); batches are averaged
    over their sequences.
    """
    out = []
    for L in layer_outputs:
        L = np.asarray(L, dtype=np.float64)
        if L.ndim == 2:
            out.append(mean_pairwise_cosine(L))
        else:
            out.append(float(np.mean([mean_pairwise_cosine(x) for x in L])))
    return out


# ---------------------------------------------------------------- logit dumps


def write_logit_csv(path, logits, labels):
    logits = np.asarray(logits)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"c{i}" for i in range(logits.shape[1])] + ["label"])
        for row, lab in zip(logits, labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])


def read_logit_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    C = len(header) - 1
    if header != [f"c{i}" for i in range(C)] + ["label"]:
        raise ValueError("logit CSV header must be c0..c{C-1},label")
    data = rows[1:]
    logits = np.array([[float(v) for v in r[:C]] for r in data], dtype=np.float64).reshape(len(data), C)
    labels = np.array([int(r[C]) for r in data], dtype=np.int64)
    return logits, labels
