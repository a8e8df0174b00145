"""Small transformer with pluggable attention and the uncertainty-regularized objective.

Blocks are pre-norm: ``x + MHSA(LN(x))`` followed by ``x + FFN(LN(x))``.  The
classifier reads the mean of the final tokens.  Every CGP head contributes its
regularizer to ``U_total``; softmax and kernel heads contribute nothing.
"""

from __future__ import annotations

import enum
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .cgp_attention import AttentionResult, CGPHeadParams, McConfig, forward_exact, forward_kernel_warm
from .gp_core import standard_normals
from .kernels import DTYPE, BranchProjection, KernelKind, KernelTag
from .scgp_attention import InducingSets, SCGPHeadParams, forward_sparse


class AttentionTag(str, enum.Enum):
    SOFTMAX = "Softmax"
    KERNEL_SYM = "KernelSym"
    KERNEL_ASYM = "KernelAsym"
    CGP_EXACT = "CgpExact"
    CGP_SPARSE = "CgpSparse"


CGP_TAGS = (AttentionTag.CGP_EXACT, AttentionTag.CGP_SPARSE)


@dataclass
class AttentionKind:
    tag: AttentionTag = AttentionTag.CGP_EXACT
    kernel: KernelKind = field(default_factory=lambda: KernelKind(KernelTag.ARD_RBF))

    def __post_init__(self):
        self.tag = AttentionTag(self.tag)

    @property
    def is_cgp(self) -> bool:
        return self.tag in CGP_TAGS

    @property
    def tied(self) -> bool:
        return self.tag is AttentionTag.KERNEL_SYM


@dataclass
class ModelConfig:
    """Architecture.

    ``input_kind`` is ``"patch"`` (float vectors of width ``input_dim``) or
    ``"token"`` (integer ids below ``input_dim``).
    """

    layers: int = 2
    heads: int = 2
    d: int = 32
    s: int = 8
    classes: int = 4
    attention: str = "CgpExact"
    input_kind: str = "patch"
    input_dim: int = 4
    ffn_mult: int = 2
    inducing_m: int = 16
    inducing_l: int = 16
    sigma_init: float = 0.1

    def __post_init__(self):
        for name in ("layers", "heads", "d", "s", "classes", "input_dim", "ffn_mult", "inducing_m", "inducing_l"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.input_kind not in ("patch", "token"):
            raise ValueError("input_kind must be 'patch' or 'token'")
        if self.sigma_init <= 0:
            raise ValueError("sigma_init must be positive")
        AttentionTag(self.attention)

    @property
    def kind(self) -> AttentionKind:
        return AttentionKind(AttentionTag(self.attention))

    @property
    def concat_width(self) -> int:
        return self.heads * self.s


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 3e-3
    lr_final: float = 3e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    alpha_start: float = 0.0
    alpha_end: float = 1e-3
    seed: int = 0
    mc_samples: int = 8
    warm_start: bool = False
    warm_epochs: int = 25

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0 or self.lr_final <= 0:
            raise ValueError("learning rates must be positive")
        if self.alpha_start < 0 or self.alpha_end < 0:
            raise ValueError("alpha values must be nonnegative")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be positive")
        if self.warm_epochs < 0:
            raise ValueError("warm_epochs must be nonnegative")

    def alpha(self, epoch: int) -> float:
        """Linear schedule: ``alpha_start`` at epoch 0, ``alpha_end`` at the last epoch."""
        if self.epochs == 1:
            return self.alpha_start
        t = epoch / (self.epochs - 1)
        return self.alpha_start + (self.alpha_end - self.alpha_start) * t


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, detail):
        self.step = step
        msg = detail if isinstance(detail, str) else f"non-finite loss {detail}"
        super().__init__(f"{msg} at step {step}")


def configure_threads() -> int:
    """Cap torch intra-op threads from ``CGP_ATTN_THREADS`` (default 1)."""
    threads = max(1, int(os.environ.get("CGP_ATTN_THREADS", "1")))
    torch.set_num_threads(threads)
    return threads


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed from a tuple of nonnegative integers."""
    return int(np.random.SeedSequence([int(p) & 0xFFFF_FFFF_FFFF_FFFF for p in parts]).generate_state(1, np.uint64)[0]) >> 1


# ---------------------------------------------------------------- attention ops


def softmax_attention(X, W_q, W_k, W_v) -> torch.Tensor:
    """Row-softmax attention ``softmax(Q K^T / sqrt(d)) V`` with d the token width."""
    Q = X @ W_q.transpose(-1, -2)
    K = X @ W_k.transpose(-1, -2)
    V = X @ W_v.transpose(-1, -2)
    A = torch.softmax(Q @ K.transpose(-1, -2) / math.sqrt(X.shape[-1]), dim=-1)
    return A @ V


def kernel_attention_matrix(X, kernel: KernelKind, W_q, W_k) -> torch.Tensor:
    return kernel.matrix(X @ W_q.transpose(-1, -2), X @ W_k.transpose(-1, -2))


def kernel_attention(X, kind: AttentionKind, W_q, W_k, W_v) -> torch.Tensor:
    """Unnormalized kernel attention ``K V`` with ``K[a, b] = k(x_a W_q^T, x_b W_k^T)``.

    A tied kind (KernelSym) ignores ``W_k`` and uses ``W_q`` on both sides.
    """
    if kind.tied:
        W_k = W_q
    return kernel_attention_matrix(X, kind.kernel, W_q, W_k) @ (X @ W_v.transpose(-1, -2))


def mhsa(X, heads: Sequence[Callable], W_o):
    """Multi-head self-attention.

    Args:
        X: Tokens (..., n, d).
        heads: Callables mapping X to either an (..., n, s) tensor or an
            :class:`AttentionResult`.
        W_o: Output projection (d_out, h * s).

    Returns:
        ``(H, U)`` with ``H = concat(heads) W_o^T`` and ``U`` the sum of the
        heads' regularizers (zero for plain tensors).
    """
    outs, U = [], 0.0
    for head in heads:
        r = head(X)
        if isinstance(r, AttentionResult):
            outs.append(r.V_plus)
            U = U + r.U
        else:
            outs.append(r)
    H = torch.cat(outs, dim=-1) @ W_o.transpose(-1, -2)
    return H, U


# ---------------------------------------------------------------- model


def _inv_softplus(v: float) -> float:
    return math.log(math.expm1(v))


def _normal(shape, std: float, gen: torch.Generator) -> torch.Tensor:
    return torch.randn(shape, generator=gen, dtype=DTYPE) * std


def sinusoidal_positions(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=DTYPE)[:, None]
    i = torch.arange(0, d, 2, dtype=DTYPE)
    angle = pos / torch.pow(10000.0, i / d)
    P = torch.zeros(n, d, dtype=DTYPE)
    P[:, 0::2] = torch.sin(angle)
    P[:, 1::2] = torch.cos(angle)[:, : d // 2]
    return P


class MultiHeadAttention(nn.Module):
    def __init__(self, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        self.cfg = cfg
        self.kind = cfg.kind
        h, s, d = cfg.heads, cfg.s, cfg.d
        std = 1.0 / math.sqrt(d)
        self.W_q = nn.Parameter(_normal((h, s, d), std, gen))
        if not self.kind.tied:
            self.W_k = nn.Parameter(_normal((h, s, d), std, gen))
        self.W_v = nn.Parameter(_normal((h, s, d), std, gen))
        if self.kind.is_cgp:
            self.W_lat = nn.Parameter(_normal((h, s, d), std, gen))
            self.sigma_raw = nn.Parameter(torch.full((h,), _inv_softplus(cfg.sigma_init), dtype=DTYPE))
            self.sigma_q_raw = nn.Parameter(torch.full((h,), _inv_softplus(1.0), dtype=DTYPE))
            self.sigma_k_raw = nn.Parameter(torch.full((h,), _inv_softplus(1.0), dtype=DTYPE))
        if self.kind.tag is AttentionTag.CGP_SPARSE:
            self.S = nn.Parameter(_normal((h, cfg.inducing_m, s), 1.0, gen))
            self.S_prime = nn.Parameter(_normal((h, cfg.inducing_l, s), 1.0, gen))
        self.W_o = nn.Parameter(_normal((d, h * s), 1.0 / math.sqrt(h * s), gen))

    def _W_k(self, i):
        return self.W_q[i] if self.kind.tied else self.W_k[i]

    def head_params(self, i: int):
        base = CGPHeadParams(
            branch_q=BranchProjection(self.W_q[i], F.softplus(self.sigma_q_raw[i])),
            branch_k=BranchProjection(self.W_k[i], F.softplus(self.sigma_k_raw[i])),
            W_v=self.W_v[i],
            W_lat=self.W_lat[i],
            sigma=F.softplus(self.sigma_raw[i]),
        )
        if self.kind.tag is AttentionTag.CGP_SPARSE:
            return SCGPHeadParams(base, InducingSets(self.S[i], self.S_prime[i]))
        return base

    @torch.no_grad()
    def init_inducing(self, tokens: torch.Tensor, gen: torch.Generator):
        """Seed S and S' from projected sample tokens plus 0.01-scale noise."""
        if self.kind.tag is not AttentionTag.CGP_SPARSE:
            return
        for i in range(self.cfg.heads):
            for P, count in ((self.S, self.cfg.inducing_m), (self.S_prime, self.cfg.inducing_l)):
                idx = torch.randint(tokens.shape[0], (count,), generator=gen)
                P[i] = tokens[idx] @ self.W_lat[i].T + _normal((count, self.cfg.s), 0.01, gen)

    def _head(self, i: int, layer: int, mc: McConfig, regularize: bool, warm: bool):
        tag = self.kind.tag

        def run(X):
            if tag is AttentionTag.SOFTMAX:
                return softmax_attention(X, self.W_q[i], self.W_k[i], self.W_v[i])
            if tag in (AttentionTag.KERNEL_SYM, AttentionTag.KERNEL_ASYM):
                return kernel_attention(X, self.kind, self.W_q[i], self._W_k(i), self.W_v[i])
            p = self.head_params(i)
            if warm:
                base = p.base if isinstance(p, SCGPHeadParams) else p
                return forward_kernel_warm(X, base)
            if tag is AttentionTag.CGP_SPARSE:
                return forward_sparse(X, p, mc, with_regularizer=regularize)
            eps = None
            if regularize:
                eps = _element_normals(X, mc, layer, i)
            return forward_exact(X, p, mc, eps=eps, with_regularizer=regularize)

        return run

    def forward(self, X, layer: int, mc: McConfig, regularize: bool = True, warm: bool = False):
        heads = [self._head(i, layer, mc, regularize, warm) for i in range(self.cfg.heads)]
        return mhsa(X, heads, self.W_o)


def _element_normals(X: torch.Tensor, mc: McConfig, layer: int, head: int) -> torch.Tensor:
    """Standard normals (..., N, n), one independent stream per batch element."""
    n = X.shape[-2]
    shape = (mc.sample_count, n)
    if X.ndim == 2:
        return standard_normals(shape, derive_seed(mc.seed, layer, head, 0))
    B = X.shape[0]
    return torch.stack([standard_normals(shape, derive_seed(mc.seed, layer, head, b)) for b in range(B)])


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        d = cfg.d
        self.norm1 = nn.LayerNorm(d, dtype=DTYPE)
        self.attn = MultiHeadAttention(cfg, gen)
        self.norm2 = nn.LayerNorm(d, dtype=DTYPE)
        hidden = cfg.ffn_mult * d
        self.ff1 = nn.Linear(d, hidden, dtype=DTYPE)
        self.ff2 = nn.Linear(hidden, d, dtype=DTYPE)
        for lin in (self.ff1, self.ff2):
            with torch.no_grad():
                lin.weight.copy_(_normal(lin.weight.shape, 1.0 / math.sqrt(lin.in_features), gen))
                lin.bias.zero_()

    def forward(self, X, layer, mc, regularize=True, warm=False):
        H, U = self.attn(self.norm1(X), layer, mc, regularize, warm)
        X = X + H
        X = X + self.ff2(F.gelu(self.ff1(self.norm2(X))))
        return X, U


class CGPTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(derive_seed(seed, 0xC0FFEE))
        if cfg.input_kind == "patch":
            self.embed = nn.Linear(cfg.input_dim, cfg.d, dtype=DTYPE)
            with torch.no_grad():
                self.embed.weight.copy_(_normal(self.embed.weight.shape, 1.0 / math.sqrt(cfg.input_dim), gen))
                self.embed.bias.zero_()
        else:
            self.embed = nn.Embedding(cfg.input_dim, cfg.d, dtype=DTYPE)
            with torch.no_grad():
                self.embed.weight.copy_(_normal(self.embed.weight.shape, 1.0, gen))
        self.blocks = nn.ModuleList(Block(cfg, gen) for _ in range(cfg.layers))
        self.norm_f = nn.LayerNorm(cfg.d, dtype=DTYPE)
        self.head = nn.Linear(cfg.d, cfg.classes, dtype=DTYPE)
        with torch.no_grad():
            self.head.weight.copy_(_normal(self.head.weight.shape, 1.0 / math.sqrt(cfg.d), gen))
            self.head.bias.zero_()
        self._init_gen = gen

    def embed_tokens(self, x: torch.Tensor) -> torch.Tensor:
        if self.cfg.input_kind == "patch":
            E = self.embed(torch.as_tensor(x, dtype=DTYPE))
        else:
            E = self.embed(torch.as_tensor(x, dtype=torch.long))
        return E + sinusoidal_positions(E.shape[-2], self.cfg.d)

    @torch.no_grad()
    def init_inducing(self, x: torch.Tensor, seed: int = 0):
        """Initialize every sparse layer's inducing sets from first-layer attention inputs."""
        gen = torch.Generator().manual_seed(derive_seed(seed, 0x1D))
        tokens = self.blocks[0].norm1(self.embed_tokens(x)).reshape(-1, self.cfg.d)
        for blk in self.blocks:
            blk.attn.init_inducing(tokens, gen)


@dataclass
class ForwardOutput:
    logits: torch.Tensor
    U_total: torch.Tensor
    layer_outputs: list


EVAL_MC_SEED = 0


def model_forward(batch, model: CGPTransformer, mode: str = "eval", *, mc: McConfig | None = None,
                  regularize: bool = True, warm: bool = False) -> ForwardOutput:
    """Run the transformer on a batch of sequences.

    Args:
        batch: Patch vectors (B, n, p) or token ids (B, n).
        model: The network.
        mode: ``"train"`` or ``"eval"``; eval always uses the fixed MC seed.
        mc: Sample count and seed for the exact regularizer.
        regularize: Skip every regularizer call when False.
        warm: Replace CGP heads by asymmetric kernel attention with the
            heads' own branches (warm-start phase).

    Returns:
        Logits (B, C), ``U_total`` (batch mean of the per-sequence sum over
        blocks, heads and output dimensions) and the per-block token outputs.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    mc = mc or McConfig()
    if mode == "eval":
        mc = McConfig(mc.sample_count, EVAL_MC_SEED)
    regularize = regularize and model.cfg.kind.is_cgp and not warm
    X = model.embed_tokens(batch)
    U = torch.zeros(X.shape[0], dtype=DTYPE)
    outputs = []
    for layer, blk in enumerate(model.blocks):
        X, u = blk(X, layer, mc, regularize, warm)
        U = U + u
        outputs.append(X)
    pooled = model.norm_f(X).mean(-2)
    logits = model.head(pooled)
    return ForwardOutput(logits, U.mean(), outputs)


@dataclass
class LossBreakdown:
    task: torch.Tensor
    regularizer: torch.Tensor
    alpha: float
    total: torch.Tensor


def total_loss(logits, labels, U_total, alpha: float) -> LossBreakdown:
    """Mean cross-entropy plus ``alpha * U_total``."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    labels = torch.as_tensor(labels, dtype=torch.long)
    task = F.cross_entropy(logits, labels)
    U_total = torch.as_tensor(U_total, dtype=logits.dtype)
    reg = alpha * U_total
    return LossBreakdown(task, U_total, alpha, task + reg)


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Named learnable tensors with a flat-vector view."""

    def __init__(self, source: nn.Module | Mapping[str, torch.Tensor]):
        if isinstance(source, nn.Module):
            self.module = source
            self.tensors = dict(source.named_parameters())
        else:
            self.module = None
            self.tensors = dict(source)

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    def count(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def flat(self) -> torch.Tensor:
        return torch.cat([t.detach().reshape(-1) for t in self.tensors.values()])

    def load_flat(self, vec: torch.Tensor):
        vec = torch.as_tensor(vec, dtype=DTYPE)
        if vec.numel() != self.count():
            raise ValueError(f"flat vector has {vec.numel()} entries, store holds {self.count()}")
        offset = 0
        with torch.no_grad():
            for t in self.tensors.values():
                k = t.numel()
                t.copy_(vec[offset: offset + k].reshape(t.shape))
                offset += k

    def locate(self, flat_index: int) -> tuple[str, int]:
        for name, t in self.tensors.items():
            if flat_index < t.numel():
                return name, flat_index
            flat_index -= t.numel()
        raise IndexError("flat index out of range")

    def save(self, path):
        write_checkpoint(path, {k: v.detach() for k, v in self.tensors.items()})

    def load(self, path):
        data = read_checkpoint(path)
        if list(data) != self.names:
            raise ValueError("checkpoint name table does not match the parameter store")
        with torch.no_grad():
            for name, t in self.tensors.items():
                if tuple(data[name].shape) != tuple(t.shape):
                    raise ValueError(f"shape mismatch for {name}")
                t.copy_(data[name])


CHECKPOINT_MAGIC = b"CGPTCKPT"
CHECKPOINT_VERSION = 1


def write_checkpoint(path, tensors: Mapping[str, torch.Tensor]):
    """Flat binary checkpoint.

    Layout (all integers u64 little-endian unless noted): magic (8 bytes),
    version (u32), tensor count, then per tensor its UTF-8 name length, name
    bytes, rank and dims; finally every tensor's entries as f64 little-endian
    in name-table order.
    """
    header = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<Q", len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        header.append(struct.pack("<Q", len(raw)) + raw)
        header.append(struct.pack("<Q", t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape))
    body = [t.detach().to(torch.float64).contiguous().numpy().astype("<f8").tobytes() for t in tensors.values()]
    with open(path, "wb") as fh:
        fh.write(b"".join(header + body))


def read_checkpoint(path) -> dict[str, torch.Tensor]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 12
    (count,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    table = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        name = buf[pos: pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        table.append((name, shape))
    out = {}
    for name, shape in table:
        k = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype="<f8", count=k, offset=pos).reshape(shape)
        out[name] = torch.from_numpy(arr.astype(np.float64))
        pos += 8 * k
    if pos != len(buf):
        raise ValueError("trailing bytes in checkpoint")
    return out


# ---------------------------------------------------------------- gradient check


@dataclass
class GradProbe:
    name: str
    index: int
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return abs(self.analytic - self.numeric) / max(1e-8, abs(self.analytic) + abs(self.numeric))


def _pick_probes(store: ParamStore, count: int, seed: int, names: Iterable[str] | None):
    """Round-robin over tensors so every tensor is probed, random index inside each."""
    rng = np.random.default_rng(seed)
    pool = [n for n in store.names if names is None or n in set(names)]
    if not pool:
        raise ValueError("no parameters selected for probing")
    picks = []
    for k in range(count):
        name = pool[k % len(pool)]
        picks.append((name, int(rng.integers(store.tensors[name].numel()))))
    return picks


def gradcheck_probes(store: ParamStore, loss_fn: Callable[[], torch.Tensor], probe_count: int = 50,
                     eps: float = 1e-5, seed: int = 0, names: Iterable[str] | None = None) -> list[GradProbe]:
    """Compare autograd gradients with central differences on sampled coordinates."""
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    tensors = list(store.tensors.values())
    if any(t.dtype != torch.float64 for t in tensors):
        raise ValueError("gradient checking requires 64-bit parameters")
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    grads = {n: (g if g is not None else torch.zeros_like(t)) for (n, t), g in zip(store.tensors.items(), grads)}
    for n, g in grads.items():
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in parameter {n}")
    probes = []
    for name, idx in _pick_probes(store, probe_count, seed, names):
        t = store.tensors[name]
        flat = t.data.view(-1)
        orig = flat[idx].item()
        with torch.no_grad():
            flat[idx] = orig + eps
            f_plus = loss_fn().item()
            flat[idx] = orig - eps
            f_minus = loss_fn().item()
            flat[idx] = orig
        probes.append(GradProbe(name, idx, float(grads[name].view(-1)[idx]), (f_plus - f_minus) / (2 * eps)))
    return probes


def gradcheck(store: ParamStore, loss_fn: Callable[[], torch.Tensor], probe_count: int = 50,
              eps: float = 1e-5, seed: int = 0, names: Iterable[str] | None = None) -> float:
    """Max relative error ``|g_a - g_fd| / max(1e-8, |g_a| + |g_fd|)`` over the probes."""
    return max(p.rel_error for p in gradcheck_probes(store, loss_fn, probe_count, eps, seed, names))


# ---------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    alpha: float
    lr: float
    task_loss: float
    regularizer: float
    train_accuracy: float
    val_accuracy: float | None
    warm: bool


def predict(model: CGPTransformer, x, batch_size: int = 256, mc: McConfig | None = None) -> torch.Tensor:
    """Eval-mode logits for a whole split (no regularizer)."""
    out = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(model_forward(x[i: i + batch_size], model, "eval", mc=mc, regularize=False).logits)
    return torch.cat(out)


def accuracy(logits: torch.Tensor, labels) -> float:
    labels = torch.as_tensor(labels, dtype=torch.long)
    # torch.argmax returns the first maximal index, i.e. lowest class wins ties
    return float((logits.argmax(-1) == labels).to(DTYPE).mean())


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset, *, regularize: bool = True,
          log: Callable[[EpochRecord], None] | None = None):
    """Minibatch Adam on ``task + alpha(epoch) * U_total``.

    Args:
        model_cfg: Architecture.
        train_cfg: Optimization settings.
        dataset: Object exposing ``split(name) -> (inputs, labels)`` for
            ``"train"`` and optionally ``"val"``.
        regularize: When False the regularizer is never evaluated.
        log: Optional per-epoch callback.

    Returns:
        ``(model, history)`` where history is a list of :class:`EpochRecord`.
    """
    configure_threads()
    x, y = dataset.split("train")
    x = torch.as_tensor(x)
    y = torch.as_tensor(y, dtype=torch.long)
    if len(x) == 0:
        raise ValueError("training split is empty")
    try:
        vx, vy = dataset.split("val")
        vx, vy = torch.as_tensor(vx), torch.as_tensor(vy, dtype=torch.long)
    except KeyError:
        vx = vy = None
    model = CGPTransformer(model_cfg, train_cfg.seed)
    if model_cfg.kind.tag is AttentionTag.CGP_SPARSE:
        model.init_inducing(x, train_cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr, betas=train_cfg.betas, eps=train_cfg.adam_eps)
    steps_per_epoch = math.ceil(len(x) / train_cfg.batch_size)
    total_steps = train_cfg.epochs * steps_per_epoch
    ratio = train_cfg.lr_final / train_cfg.lr

    def lr_factor(step):
        return 1.0 + (ratio - 1.0) * step / max(1, total_steps - 1)

    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_factor)
    shuffle_gen = torch.Generator().manual_seed(derive_seed(train_cfg.seed, 0x5EED))
    history: list[EpochRecord] = []
    step = 0
    for epoch in range(train_cfg.epochs):
        warm = train_cfg.warm_start and epoch < train_cfg.warm_epochs
        alpha = train_cfg.alpha(epoch)
        perm = torch.randperm(len(x), generator=shuffle_gen)
        task_sum = reg_sum = 0.0
        correct = 0
        lr_now = opt.param_groups[0]["lr"]
        model.train()
        for b in range(steps_per_epoch):
            idx = perm[b * train_cfg.batch_size: (b + 1) * train_cfg.batch_size]
            mc = McConfig(train_cfg.mc_samples, derive_seed(train_cfg.seed, step))
            use_reg = regularize and alpha > 0
            out = model_forward(x[idx], model, "train", mc=mc, regularize=use_reg, warm=warm)
            lb = total_loss(out.logits, y[idx], out.U_total, alpha if use_reg else 0.0)
            if not torch.isfinite(lb.total):
                raise TrainingDivergedError(step, lb.total.item())
            opt.zero_grad(set_to_none=True)
            lb.total.backward()
            for name, prm in model.named_parameters():
                if prm.grad is not None and not torch.isfinite(prm.grad).all():
                    raise TrainingDivergedError(step, f"non-finite gradient in {name}")
            opt.step()
            sched.step()
            step += 1
            task_sum += lb.task.item() * len(idx)
            reg_sum += lb.regularizer.item() * len(idx)
            correct += int((out.logits.detach().argmax(-1) == y[idx]).sum())
        model.eval()
        val_acc = accuracy(predict(model, vx), vy) if vx is not None else None
        rec = EpochRecord(epoch, alpha, lr_now, task_sum / len(x), reg_sum / len(x), correct / len(x), val_acc, warm)
        history.append(rec)
        if log:
            log(rec)
    return model, history


def history_dicts(history: Sequence[EpochRecord]) -> list[dict]:
    return [asdict(r) for r in history]
