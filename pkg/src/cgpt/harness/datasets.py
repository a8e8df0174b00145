"""Desk-scale synthetic datasets: textured patch images, bracket grammar, corruptions and outlier sets."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

SPLITS = ("train", "val", "test")


@dataclass
class ToyDataset:
    """Token sequences and labels per split.

    For the image kind ``images`` keeps the raw (N, side, side) pixels per
    split so corruptions can act in pixel space; ``inputs`` holds the
    tokenized sequences.
    """

    kind: str
    inputs: dict
    labels: dict
    seed: int
    meta: dict = field(default_factory=dict)
    images: dict | None = None

    def split(self, name: str):
        if name not in self.inputs:
            raise KeyError(name)
        return self.inputs[name], self.labels[name]

    @property
    def classes(self) -> int:
        return int(self.meta["classes"])


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(N, side, side) -> (N, (side/patch)^2, patch^2), row-major over patches."""
    N, side, _ = images.shape
    g = side // patch
    x = images.reshape(N, g, patch, g, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(N, g * g, patch * patch)


def _stratified_split(labels: np.ndarray, rng: np.random.Generator, fractions=(4, 1, 1)):
    parts = {k: [] for k in SPLITS}
    total = sum(fractions)
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_tr = len(idx) * fractions[0] // total
        n_va = len(idx) * fractions[1] // total
        parts["train"].append(idx[:n_tr])
        parts["val"].append(idx[n_tr: n_tr + n_va])
        parts["test"].append(idx[n_tr + n_va:])
    return {k: rng.permutation(np.concatenate(v)) for k, v in parts.items()}


def render_images(classes: int, per_class: int, side: int, rng: np.random.Generator):
    """Class-conditional textures: a Gaussian blob near a class center plus a class-specific grating."""
    yy, xx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    centers = rng.uniform(1.0, side - 2.0, size=(classes, 2))
    freqs = 1.0 + np.arange(classes) * 0.75
    angles = rng.uniform(0, np.pi, size=classes)
    images, labels = [], []
    for c in range(classes):
        for _ in range(per_class):
            cy, cx = centers[c] + rng.normal(0, 0.8, size=2)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 1.5**2))
            proj = np.cos(angles[c]) * xx + np.sin(angles[c]) * yy
            grating = 0.5 + 0.5 * np.sin(2 * np.pi * freqs[c] * proj / side + rng.uniform(0, 2 * np.pi))
            img = 0.55 * blob + 0.45 * grating + rng.normal(0, 0.08, size=(side, side))
            images.append(img)
            labels.append(c)
    return np.asarray(images), np.asarray(labels, dtype=np.int64)


def make_toy_images(classes: int = 4, per_class: int = 300, side: int = 8, patch: int = 2, seed: int = 0) -> ToyDataset:
    """Textured images tokenized into (side/patch)^2 patch vectors, split 4:1:1 per class."""
    if side % patch != 0:
        raise ValueError(f"side {side} is not divisible by patch {patch}")
    if classes < 2 or per_class < 6:
        raise ValueError("need at least 2 classes and 6 images per class")
    rng = np.random.default_rng([seed, 1])
    images, labels = render_images(classes, per_class, side, rng)
    parts = _stratified_split(labels, rng)
    imgs = {k: images[v] for k, v in parts.items()}
    return ToyDataset(
        kind="images",
        inputs={k: patchify(v, patch) for k, v in imgs.items()},
        labels={k: labels[v] for k, v in parts.items()},
        seed=seed,
        meta={"classes": classes, "per_class": per_class, "side": side, "patch": patch},
        images=imgs,
    )


# ---------------------------------------------------------------- corruptions


class Category(str, enum.Enum):
    NOISE = "Noise"
    BLUR = "Blur"
    WEATHER = "Weather"
    DIGITAL = "Digital"


CATEGORIES = tuple(Category)


@dataclass(frozen=True)
class CorruptionSpec:
    category: Category
    severity: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "category", Category(self.category))
        if self.severity not in (1, 2, 3, 4, 5):
            raise ValueError("severity must be in 1..5")


def box_blur(images: np.ndarray, passes: int) -> np.ndarray:
    out = images
    for _ in range(passes):
        p = np.pad(out, ((0, 0), (1, 1), (1, 1)), mode="edge")
        side = out.shape[-1]
        out = sum(p[:, i: i + side, j: j + side] for i in range(3) for j in range(3)) / 9.0
    return out


def apply_corruption(images: np.ndarray, category, severity: int, seed: int = 0) -> np.ndarray:
    """Pixel-space corruption; severity 0 is the identity for every category."""
    category = Category(category)
    if severity == 0:
        return images.copy()
    if category is Category.NOISE:
        rng = np.random.default_rng([seed, 7])
        return images + 0.05 * severity * rng.standard_normal(images.shape)
    if category is Category.BLUR:
        return box_blur(images, severity)
    if category is Category.WEATHER:
        mean = images.mean(axis=(-1, -2), keepdims=True)
        return (images - mean) * (1 - 0.08 * severity) + mean + 0.1 * severity
    levels = 10 - severity
    clipped = np.clip(images, 0.0, 1.0)
    return np.round(clipped * (levels - 1)) / (levels - 1)


def corrupt(dataset: ToyDataset, spec: CorruptionSpec) -> ToyDataset:
    """Corrupt every split of an image dataset; labels are unchanged."""
    if dataset.kind != "images":
        raise ValueError("corruptions apply to image datasets only")
    patch = dataset.meta["patch"]
    imgs = {k: apply_corruption(v, spec.category, spec.severity, spec.seed) for k, v in dataset.images.items()}
    meta = dict(dataset.meta, corruption={"category": spec.category.value, "severity": spec.severity})
    return replace(dataset, inputs={k: patchify(v, patch) for k, v in imgs.items()}, images=imgs, meta=meta,
                   labels=dict(dataset.labels))


# ---------------------------------------------------------------- grammar

PAD = 0
OPEN = {1: 2, 3: 4}  # "(" -> ")", "[" -> "]"
CLOSE = {v: k for k, v in OPEN.items()}
DISTRACTORS = tuple(range(5, 12))
VOCAB_SIZE = 12
SYMBOLS = {"(": 1, ")": 2, "[": 3, "]": 4}


def encode(text: str) -> list[int]:
    """Map a bracket string to token ids; any other character becomes distractor 5."""
    return [SYMBOLS.get(ch, DISTRACTORS[0]) for ch in text]


def well_formed(tokens) -> bool:
    """Balanced, properly nested brackets; distractors and padding are ignored."""
    stack = []
    for t in tokens:
        t = int(t)
        if t in OPEN:
            stack.append(t)
        elif t in CLOSE:
            if not stack or stack.pop() != CLOSE[t]:
                return False
    return not stack


def _balanced(rng: np.random.Generator, pairs: int) -> list[int]:
    out, stack, opened = [], [], 0
    while opened < pairs or stack:
        if opened < pairs and (not stack or rng.random() < 0.5):
            o = int(rng.choice(list(OPEN)))
            out.append(o)
            stack.append(o)
            opened += 1
        else:
            out.append(OPEN[stack.pop()])
    return out


def _break(seq: list[int], rng: np.random.Generator) -> list[int]:
    seq = list(seq)
    brackets = [i for i, t in enumerate(seq) if t in OPEN or t in CLOSE]
    op = rng.integers(3)
    if op == 0:  # flip one bracket's type
        i = int(rng.choice(brackets))
        flip = {1: 3, 3: 1, 2: 4, 4: 2}
        seq[i] = flip[seq[i]]
    elif op == 1:  # drop one bracket
        del seq[int(rng.choice(brackets))]
    else:  # swap two adjacent brackets
        i = int(rng.choice(brackets[:-1]))
        j = brackets[brackets.index(i) + 1]
        seq[i], seq[j] = seq[j], seq[i]
    return seq


def _sample_string(rng: np.random.Generator, lo: int, hi: int, accept: bool) -> list[int]:
    while True:
        length = int(rng.integers(lo, hi + 1))
        n_distract = int(rng.integers(0, max(1, length // 3) + 1))
        pairs = max(1, (length - n_distract) // 2)
        seq = _balanced(rng, pairs)
        if not accept:
            seq = _break(seq, rng)
        for _ in range(length - len(seq)):
            seq.insert(int(rng.integers(len(seq) + 1)), int(rng.choice(DISTRACTORS)))
        if lo <= len(seq) <= hi and well_formed(seq) == accept:
            return seq


def _grammar_block(rng, count, lo, hi, pad_to):
    X = np.full((count, pad_to), PAD, dtype=np.int64)
    y = (rng.random(count) < 0.5).astype(np.int64)
    for i in range(count):
        seq = _sample_string(rng, lo, hi, bool(y[i]))
        X[i, : len(seq)] = seq
    return X, y


def make_toy_grammar(size: int = 1000, max_len: int = 12, seed: int = 0) -> ToyDataset:
    """Bracket strings with distractors; label 1 iff well-formed.

    Splits: ``size`` train, ``size // 4`` each for val and test, and an
    ``ood`` split of ``size // 4`` longer strings with length in
    (max_len, 2 max_len], padded to 2 max_len.
    """
    if max_len < 4:
        raise ValueError("max_len must be at least 4")
    rng = np.random.default_rng([seed, 2])
    sizes = {"train": size, "val": size // 4, "test": size // 4}
    inputs, labels = {}, {}
    for name, count in sizes.items():
        inputs[name], labels[name] = _grammar_block(rng, count, 2, max_len, max_len)
    inputs["ood"], labels["ood"] = _grammar_block(rng, size // 4, max_len + 1, 2 * max_len, 2 * max_len)
    return ToyDataset(kind="grammar", inputs=inputs, labels=labels, seed=seed,
                      meta={"classes": 2, "size": size, "max_len": max_len, "vocab": VOCAB_SIZE})


# ---------------------------------------------------------------- outlier sets

OOD_SETS = ("grammar_noise", "inverted", "pure_noise", "shuffled_patches")


def make_ood_images(dataset: ToyDataset, name: str, seed: int = 0) -> np.ndarray:
    """Tokenized outlier images matched in count and shape to the clean test split."""
    if dataset.kind != "images":
        raise ValueError("outlier sets are defined for image datasets")
    clean = dataset.images["test"]
    N, side, _ = clean.shape
    patch = dataset.meta["patch"]
    rng = np.random.default_rng([seed, 3, OOD_SETS.index(name) if name in OOD_SETS else 99])
    if name == "grammar_noise":
        # rows of bracket-grammar token ids rendered as intensities
        toks, _ = _grammar_block(rng, N, side * side // 2, side * side, side * side)
        imgs = toks.reshape(N, side, side) / (VOCAB_SIZE - 1)
    elif name == "inverted":
        imgs = 1.0 - clean
    elif name == "pure_noise":
        imgs = rng.uniform(0.0, 1.0, size=clean.shape)
    elif name == "shuffled_patches":
        tokens = patchify(clean, patch)
        perm = np.stack([rng.permutation(tokens.shape[1]) for _ in range(N)])
        return np.take_along_axis(tokens, perm[:, :, None], axis=1)
    else:
        raise ValueError(f"unknown outlier set {name!r}")
    return patchify(imgs, patch)
