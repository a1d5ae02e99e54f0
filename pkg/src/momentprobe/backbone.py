"""Toy frozen pre-LN transformer with optional feature recalibration.

The backbone stands in for a large pretrained encoder at desk scale:
L blocks of pre-LN multi-head self-attention and pre-LN FFN with
residual connections, all weights generated deterministically from a
seed and marked non-trainable.

Two recalibration schemes can be inserted at the FFN site:

* PSRP: a tiny two-branch network with a shared down-projection
  produces input-dependent scale w and shift b per token, and the FFN
  branch output becomes (w + 1) * ffn_out + b before the residual add.
  With zero-initialized up-projections this is exactly the identity.
* SSF: input-independent learnable per-channel gamma/beta, applied at
  the same site for an apples-to-apples contrast (gamma starts at one
  and beta at zero, also the identity).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .head import TokenFeatures
from .rng import STREAM_BACKBONE, STREAM_PSRP, generator
from .tensor import Value


@dataclass(frozen=True)
class ToyBackboneConfig:
    layers: int = 4
    width: int = 64
    attn_heads: int = 4
    tokens: int = 16          # word tokens per sample, plus one CLS row
    ffn_expansion: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.width % self.attn_heads != 0:
            raise ConfigError(
                f"width {self.width} not divisible by {self.attn_heads} attention heads")
        if self.layers < 1 or self.tokens < 1:
            raise ConfigError("need at least one layer and one token")


def _frozen(rng: np.random.Generator, shape: tuple, fan_in: int) -> Value:
    bound = 1.0 / np.sqrt(fan_in)
    return Value(rng.uniform(-bound, bound, size=shape), requires_grad=False)


@dataclass
class BackboneLayer:
    ln1_gain: Value
    ln1_shift: Value
    wq: Value
    bq: Value
    wk: Value
    bk: Value
    wv: Value
    bv: Value
    wo: Value
    bo: Value
    ln2_gain: Value
    ln2_shift: Value
    wf1: Value
    bf1: Value
    wf2: Value
    bf2: Value


@dataclass
class BackboneWeights:
    config: ToyBackboneConfig
    layers: list[BackboneLayer]
    final_gain: Value
    final_shift: Value

    def values(self) -> list[Value]:
        out = []
        for layer in self.layers:
            out.extend(getattr(layer, f) for f in layer.__dataclass_fields__)
        out.extend([self.final_gain, self.final_shift])
        return out


def build_backbone(cfg: ToyBackboneConfig) -> BackboneWeights:
    """Generate frozen weights from the config seed.

    Projections use fan-in-scaled uniform values; layer-norm gains start
    at one and shifts at zero. Nothing here requires grad.
    """
    rng = generator(STREAM_BACKBONE, cfg.seed)
    d, dff = cfg.width, cfg.width * cfg.ffn_expansion
    layers = []
    for _ in range(cfg.layers):
        layers.append(BackboneLayer(
            ln1_gain=Value(np.ones(d)), ln1_shift=Value(np.zeros(d)),
            wq=_frozen(rng, (d, d), d), bq=Value(np.zeros(d)),
            wk=_frozen(rng, (d, d), d), bk=Value(np.zeros(d)),
            wv=_frozen(rng, (d, d), d), bv=Value(np.zeros(d)),
            wo=_frozen(rng, (d, d), d), bo=Value(np.zeros(d)),
            ln2_gain=Value(np.ones(d)), ln2_shift=Value(np.zeros(d)),
            wf1=_frozen(rng, (dff, d), d), bf1=Value(np.zeros(dff)),
            wf2=_frozen(rng, (d, dff), dff), bf2=Value(np.zeros(d)),
        ))
    return BackboneWeights(
        config=cfg, layers=layers,
        final_gain=Value(np.ones(d)), final_shift=Value(np.zeros(d)))


# ---------------------------------------------------------------------------
# recalibration parameters
# ---------------------------------------------------------------------------

@dataclass
class PSRPLayerParams:
    w_down: Value   # [d_h x d], shared by both branches
    w_up1: Value    # [d x d_h], scale branch
    w_up2: Value    # [d x d_h], shift branch


@dataclass
class PSRPParams:
    d_h: int
    layers: list[PSRPLayerParams] = field(default_factory=list)

    def values(self) -> list[Value]:
        out = []
        for layer in self.layers:
            out.extend([layer.w_down, layer.w_up1, layer.w_up2])
        return out

    def count(self) -> int:
        return sum(v.data.size for v in self.values())


def init_psrp(cfg: ToyBackboneConfig, d_h: int = 16, seed: int = 0) -> PSRPParams:
    """Shared down-projection gets fan-in uniform values; both
    up-projections start at zero so recalibration is the identity."""
    if d_h < 1:
        raise ConfigError(f"psrp hidden width must be >= 1, got {d_h}")
    rng = generator(STREAM_PSRP, seed)
    d = cfg.width
    params = PSRPParams(d_h=d_h)
    for _ in range(cfg.layers):
        params.layers.append(PSRPLayerParams(
            w_down=Value(rng.uniform(-1 / np.sqrt(d), 1 / np.sqrt(d), size=(d_h, d)),
                         requires_grad=True),
            w_up1=Value(np.zeros((d, d_h)), requires_grad=True),
            w_up2=Value(np.zeros((d, d_h)), requires_grad=True),
        ))
    return params


@dataclass
class SSFLayerParams:
    gamma: Value    # [d]
    beta: Value     # [d]


@dataclass
class SSFParams:
    layers: list[SSFLayerParams] = field(default_factory=list)

    def values(self) -> list[Value]:
        out = []
        for layer in self.layers:
            out.extend([layer.gamma, layer.beta])
        return out

    def count(self) -> int:
        return sum(v.data.size for v in self.values())


def init_ssf(cfg: ToyBackboneConfig) -> SSFParams:
    params = SSFParams()
    for _ in range(cfg.layers):
        params.layers.append(SSFLayerParams(
            gamma=Value(np.ones(cfg.width), requires_grad=True),
            beta=Value(np.zeros(cfg.width), requires_grad=True),
        ))
    return params


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def psrp_compute(x_l: Value, p: PSRPLayerParams) -> tuple[Value, Value]:
    """Per-token scale and shift from the shared-trunk tiny network:
    w = up1(relu(down(x))), b = up2(relu(down(x))). No bias terms."""
    trunk = T.relu(T.matmul(x_l, T.transpose(p.w_down)))
    w_l = T.matmul(trunk, T.transpose(p.w_up1))
    b_l = T.matmul(trunk, T.transpose(p.w_up2))
    return w_l, b_l


def psrp_apply(ffn_out: Value, w_l: Value, b_l: Value) -> Value:
    """(w + 1) * ffn_out + b, elementwise."""
    return T.add(T.mul(T.add(w_l, 1.0), ffn_out), b_l)


def ssf_apply(x: Value, s: SSFLayerParams) -> Value:
    """Channelwise affine recalibration gamma * x + beta; the same
    (gamma, beta) apply regardless of the input."""
    if s.gamma.data.shape != (x.data.shape[-1],):
        raise DimensionError(
            f"ssf gamma has shape {s.gamma.data.shape}, input width is "
            f"{x.data.shape[-1]}")
    return T.add(T.mul(x, s.gamma), s.beta)


def _attention(x: Value, layer: BackboneLayer, n_heads: int) -> Value:
    d = x.data.shape[1]
    dk = d // n_heads
    q = T.add(T.matmul(x, T.transpose(layer.wq)), layer.bq)
    k = T.add(T.matmul(x, T.transpose(layer.wk)), layer.bk)
    v = T.add(T.matmul(x, T.transpose(layer.wv)), layer.bv)
    outs = []
    for i in range(n_heads):
        qi = T.col_slice(q, i * dk, (i + 1) * dk)
        ki = T.col_slice(k, i * dk, (i + 1) * dk)
        vi = T.col_slice(v, i * dk, (i + 1) * dk)
        attn = T.softmax_rows(T.mul(T.matmul(qi, T.transpose(ki)), 1.0 / np.sqrt(dk)))
        outs.append(T.matmul(attn, vi))
    merged = T.concat(outs, axis=1)
    return T.add(T.matmul(merged, T.transpose(layer.wo)), layer.bo)


def _ffn(x: Value, layer: BackboneLayer) -> Value:
    hidden = T.gelu(T.add(T.matmul(x, T.transpose(layer.wf1)), layer.bf1))
    return T.add(T.matmul(hidden, T.transpose(layer.wf2)), layer.bf2)


def backbone_forward(x, frozen: BackboneWeights,
                     recal: PSRPParams | SSFParams | None = None,
                     label: int = 0) -> TokenFeatures:
    """Run the frozen encoder over one sample [(N+1) x d], CLS in row 0.

    With PSRP recalibration, each FFN branch output is rescaled and
    shifted (from the block's own input) before the residual add.
    Returns the final word tokens plus CLS as graph Values so head
    gradients can reach the recalibration parameters.
    """
    cfg = frozen.config
    x = T.as_value(x)
    if x.data.ndim != 2 or x.data.shape[1] != cfg.width or x.data.shape[0] < 2:
        raise DimensionError(
            f"backbone expects [(N+1) x {cfg.width}] input with N >= 1, "
            f"got {x.data.shape}")
    if isinstance(recal, PSRPParams) and len(recal.layers) != cfg.layers:
        raise ConfigError(
            f"psrp has {len(recal.layers)} layers, backbone has {cfg.layers}")
    if isinstance(recal, SSFParams) and len(recal.layers) != cfg.layers:
        raise ConfigError(
            f"ssf has {len(recal.layers)} layers, backbone has {cfg.layers}")

    for li, layer in enumerate(frozen.layers):
        attn_in = T.layer_norm(x, layer.ln1_gain, layer.ln1_shift)
        x = T.add(x, _attention(attn_in, layer, cfg.attn_heads))
        ffn_out = _ffn(T.layer_norm(x, layer.ln2_gain, layer.ln2_shift), layer)
        if isinstance(recal, PSRPParams):
            w_l, b_l = psrp_compute(x, recal.layers[li])
            ffn_out = psrp_apply(ffn_out, w_l, b_l)
        elif isinstance(recal, SSFParams):
            ffn_out = ssf_apply(ffn_out, recal.layers[li])
        x = T.add(x, ffn_out)

    x = T.layer_norm(x, frozen.final_gain, frozen.final_shift)
    cls = T.reshape(T.row_slice(x, 0, 1), (cfg.width,))
    tokens = T.row_slice(x, 1, x.data.shape[0])
    return TokenFeatures(tokens=tokens, cls=cls, label=label)


def mp_plus_forward(x, frozen: BackboneWeights, psrp: PSRPParams,
                    head_params, head_cfg, mode: str = "cls") -> Value:
    """Recalibrated backbone then the fused probing head; the trainable
    set is the PSRP parameters plus the head parameters only."""
    from .head import mp_forward

    features = backbone_forward(x, frozen, recal=psrp)
    return mp_forward(features, head_params, head_cfg, mode)
