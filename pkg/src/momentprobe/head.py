"""Probing heads over frozen token features.

The main head fuses two branches:

* a first-order branch: linear classifier on the CLS token or on the
  global average of the word tokens, and
* a second-order branch: multi-head convolutional cross-covariance.
  Tokens are projected from d to d_hat channels, split into h column
  blocks, cross-covariances of adjacent blocks are Frobenius-normalized
  and stacked into an (h-1)-channel square image, which two stride-2
  3x3 convolutions (GELU between) aggregate and flatten down to
  (h-1) * (d_hat / 4h)**2 features.

Baseline representations (plain covariance pooling, signed-sqrt
bilinear, Newton-Schulz matrix square root) live here too so the
ablation harness can compare them under one classifier interface.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, InputError
from .tensor import Value

FIRST_MOMENT_MODES = ("cls", "gap")


@dataclass
class TokenFeatures:
    """One sample's frozen backbone output.

    ``tokens`` holds the N word tokens (the CLS token, when present, is
    stored separately and never counted among the N rows). During
    recalibrated training these can be graph Values instead of plain
    arrays so gradients flow through them.
    """

    tokens: np.ndarray | Value
    cls: np.ndarray | Value | None = None
    label: int = 0

    def __post_init__(self):
        shape = self.tokens.shape if isinstance(self.tokens, Value) else np.shape(self.tokens)
        if len(shape) != 2 or shape[0] < 1 or shape[1] < 1:
            raise DimensionError(f"tokens must be [N x d] with N, d >= 1, got {shape}")
        if self.cls is not None:
            cls_shape = self.cls.shape if isinstance(self.cls, Value) else np.shape(self.cls)
            if cls_shape != (shape[1],):
                raise DimensionError(
                    f"cls must have shape ({shape[1]},), got {cls_shape}")

    @property
    def dim(self) -> int:
        shape = self.tokens.shape if isinstance(self.tokens, Value) else np.shape(self.tokens)
        return shape[1]


@dataclass(frozen=True)
class MHC3Config:
    """Shape knobs for the cross-covariance branch.

    ``d_hat / h`` must be divisible by 4 so the two stride-2
    convolutions land on integer extents.
    """

    d: int
    d_hat: int = 512
    h: int = 8
    eps: float = 1e-6

    def __post_init__(self):
        if self.h < 2:
            raise ConfigError("cross-covariance branch requires at least two heads")
        if self.d_hat % self.h != 0:
            raise ConfigError(f"d_hat={self.d_hat} not divisible by h={self.h}")
        if (self.d_hat // self.h) % 4 != 0:
            raise ConfigError(
                f"d_hat/h={self.d_hat // self.h} must be divisible by 4 "
                "(two stride-2 convolutions quarter the extent)")
        if self.d_hat > self.d:
            raise ConfigError(f"d_hat={self.d_hat} exceeds input width d={self.d}")

    @property
    def head_width(self) -> int:
        return self.d_hat // self.h

    @property
    def output_len(self) -> int:
        return (self.h - 1) * (self.d_hat // (4 * self.h)) ** 2


@dataclass
class MPHeadParams:
    """All learnable parameters of the fused head."""

    reduce_w: Value   # [d_hat x d]
    reduce_b: Value   # [d_hat]
    lra_k1: Value     # [(h-1) x (h-1) x 3 x 3]
    lra_b1: Value     # [h-1]
    lra_k2: Value     # [(h-1) x (h-1) x 3 x 3]
    lra_b2: Value     # [h-1]
    w1: Value         # [C x d]
    b1: Value         # [C]
    w2: Value         # [C x S2]
    b2: Value         # [C]

    def values(self) -> list[Value]:
        return [getattr(self, f.name) for f in fields(self)]


def _fan_in_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_mp_head(cfg: MHC3Config, n_classes: int, rng: np.random.Generator) -> MPHeadParams:
    """Fan-in uniform init for reduction and convolution kernels; the
    classifiers (and all biases) start at zero so initial logits vanish
    and the first loss equals ln(n_classes) exactly."""
    if n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {n_classes}")
    ch = cfg.h - 1
    s2 = cfg.output_len
    return MPHeadParams(
        reduce_w=Value(_fan_in_uniform(rng, (cfg.d_hat, cfg.d), cfg.d), requires_grad=True),
        reduce_b=Value(np.zeros(cfg.d_hat), requires_grad=True),
        lra_k1=Value(_fan_in_uniform(rng, (ch, ch, 3, 3), ch * 9), requires_grad=True),
        lra_b1=Value(np.zeros(ch), requires_grad=True),
        lra_k2=Value(_fan_in_uniform(rng, (ch, ch, 3, 3), ch * 9), requires_grad=True),
        lra_b2=Value(np.zeros(ch), requires_grad=True),
        w1=Value(np.zeros((n_classes, cfg.d)), requires_grad=True),
        b1=Value(np.zeros(n_classes), requires_grad=True),
        w2=Value(np.zeros((n_classes, s2)), requires_grad=True),
        b2=Value(np.zeros(n_classes), requires_grad=True),
    )


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------

def reduce_dim(x: TokenFeatures, p: MPHeadParams) -> Value:
    """Per-token linear projection from d to d_hat channels (the 1x1
    convolution applied along the token axis)."""
    tokens = T.as_value(x.tokens)
    if tokens.data.shape[1] != p.reduce_w.data.shape[1]:
        raise DimensionError(
            f"tokens have {tokens.data.shape[1]} channels, reduction expects "
            f"{p.reduce_w.data.shape[1]}")
    return T.add(T.matmul(tokens, T.transpose(p.reduce_w)), p.reduce_b)


def split_heads(x_hat: Value, h: int) -> list[Value]:
    """Contiguous column blocks H_1..H_h; concatenating them restores
    the input exactly."""
    d_hat = x_hat.data.shape[1]
    if d_hat % h != 0:
        raise ConfigError(f"width {d_hat} not divisible into {h} heads")
    q = d_hat // h
    return [T.col_slice(x_hat, i * q, (i + 1) * q) for i in range(h)]


def cross_cov_adjacent(heads: list[Value], eps: float = 1e-6) -> list[Value]:
    """Z_i = frobenius_normalize(H_i^T @ H_{i+1}) for each adjacent pair.

    No 1/N factor: the Frobenius normalization makes the token-count
    scale immaterial.
    """
    if len(heads) < 2:
        raise ConfigError("cross-covariance requires at least two heads")
    shape = heads[0].data.shape
    for hd in heads[1:]:
        if hd.data.shape != shape:
            raise DimensionError(f"head shapes differ: {shape} vs {hd.data.shape}")
    return [T.frobenius_normalize(T.matmul(T.transpose(heads[i]), heads[i + 1]), eps)
            for i in range(len(heads) - 1)]


def lra(z_stack: Value, p: MPHeadParams) -> Value:
    """Aggregate the stacked cross-covariances: two stride-2 3x3
    convolutions with a GELU between, then flatten."""
    extent = z_stack.data.shape[-1]
    if extent % 4 != 0:
        raise ConfigError(f"spatial extent {extent} must be divisible by 4")
    y = T.conv2d(z_stack, p.lra_k1, p.lra_b1, stride=2, pad=1)
    y = T.gelu(y)
    y = T.conv2d(y, p.lra_k2, p.lra_b2, stride=2, pad=1)
    return T.flatten(y)


def mhc3(x: TokenFeatures, p: MPHeadParams, cfg: MHC3Config) -> Value:
    """Full second-order branch; output length (h-1) * (d_hat / 4h)**2."""
    heads = split_heads(reduce_dim(x, p), cfg.h)
    z = T.stack(cross_cov_adjacent(heads, cfg.eps))
    out = lra(z, p)
    assert out.data.size * 16 * cfg.h <= cfg.d_hat ** 2, "compression bound violated"
    return out


def first_moment(x: TokenFeatures, mode: str) -> Value:
    """First-order statistic: the CLS token, or the token column mean."""
    if mode == "cls":
        if x.cls is None:
            raise InputError("cls first moment requested but sample has no cls token")
        return T.as_value(x.cls)
    if mode == "gap":
        return T.mean_rows(T.as_value(x.tokens))
    raise ConfigError(f"unknown first-moment mode {mode!r}")


def lp_forward(m1: Value | np.ndarray, w: Value, b: Value) -> Value:
    """Affine classifier on a flat representation: w @ m1 + b."""
    m1 = T.as_value(m1)
    d = m1.data.size
    if w.data.ndim != 2 or w.data.shape[1] != d:
        raise DimensionError(
            f"classifier weight {w.data.shape} incompatible with representation "
            f"of size {d}")
    logits = T.matmul(w, T.reshape(m1, (d, 1)))
    return T.add(T.reshape(logits, (w.data.shape[0],)), b)


def mp_branch_logits(x: TokenFeatures, p: MPHeadParams, cfg: MHC3Config,
                     mode: str) -> tuple[Value, Value]:
    """The two branch logits (first-order, second-order), pre-fusion."""
    branch1 = lp_forward(first_moment(x, mode), p.w1, p.b1)
    branch2 = lp_forward(mhc3(x, p, cfg), p.w2, p.b2)
    return branch1, branch2


def mp_forward(x: TokenFeatures, p: MPHeadParams, cfg: MHC3Config,
               mode: str = "cls") -> Value:
    """Fused prediction: elementwise sum of the two branch logits."""
    branch1, branch2 = mp_branch_logits(x, p, cfg, mode)
    return T.add(branch1, branch2)


# ---------------------------------------------------------------------------
# baseline second-order representations
# ---------------------------------------------------------------------------

def gcp_forward(x: TokenFeatures, reduce_w: Value, reduce_b: Value,
                eps: float = 1e-6) -> Value:
    """Plain covariance pooling: flatten(frobenius_normalize(Xhat^T Xhat))."""
    tokens = T.as_value(x.tokens)
    xhat = T.add(T.matmul(tokens, T.transpose(reduce_w)), reduce_b)
    cov = T.matmul(T.transpose(xhat), xhat)
    return T.flatten(T.frobenius_normalize(cov, eps))


def bcnn_signed_sqrt(z: Value) -> Value:
    """Signed square root then Frobenius normalization of a pooled
    representation (the classic bilinear-pooling post-processing)."""
    return T.frobenius_normalize(T.signed_sqrt(z))


def isqrt_cov(a: Value, iters: int = 5) -> Value:
    """Matrix square root of a symmetric PSD matrix by coupled
    Newton-Schulz iteration.

    The input is normalized by its trace (so the iteration converges),
    and the result is compensated by sqrt(trace). Built entirely from
    differentiable ops, so it can sit inside a trained head.
    """
    a = T.as_value(a)
    if a.data.ndim != 2 or a.data.shape[0] != a.data.shape[1]:
        raise DimensionError(f"isqrt_cov needs a square matrix, got {a.data.shape}")
    if float(np.linalg.norm(a.data - a.data.T)) > 1e-8:
        raise InputError("isqrt_cov input must be symmetric")
    q = a.data.shape[0]
    eye = np.eye(q)
    tr = T.sum_all(T.mul(a, eye))
    if float(tr.data) <= 0.0:
        raise InputError("isqrt_cov input must have positive trace")
    a_hat = T.div(a, tr)
    y, z = a_hat, T.as_value(eye)
    for _ in range(iters):
        t = T.sub(3.0 * eye, T.matmul(z, y))
        y = T.mul(T.matmul(y, t), 0.5)
        z = T.mul(T.matmul(t, z), 0.5)
    return T.mul(y, T.sqrt(tr))


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

def count_params(p: MPHeadParams) -> int:
    """Exact learnable-parameter count: sum of all field extents."""
    return sum(v.data.size for v in p.values())


def count_params_closed_form(d: int, d_hat: int, h: int, n_classes: int) -> int:
    """Independent closed-form count for cross-checking ``count_params``."""
    s2 = (h - 1) * (d_hat // (4 * h)) ** 2
    reduction = d_hat * d + d_hat
    convs = 2 * (9 * (h - 1) ** 2 + (h - 1))
    classifiers = n_classes * d + n_classes + n_classes * s2 + n_classes
    return reduction + convs + classifiers
