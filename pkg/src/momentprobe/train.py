"""Training runs over feature datasets.

A run config selects one probing head (or the recalibrated variant),
trains its parameters with AdamW under a warmup+cosine schedule, and
produces a structured-text report plus a binary checkpoint. Everything
is deterministic under (config, dataset): identical runs produce
byte-identical checkpoints and reports apart from wall-clock fields.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import (BackboneWeights, PSRPParams, ToyBackboneConfig,
                       backbone_forward, build_backbone, init_psrp)
from .data import FeatureDataset, batch_iter, split_train_val
from .errors import ConfigError, DataError, UsageError
from .head import (MHC3Config, MPHeadParams, TokenFeatures, bcnn_signed_sqrt,
                   first_moment, gcp_forward, init_mp_head, isqrt_cov,
                   lp_forward, mhc3, mp_forward)
from .optim import AdamW, Schedule, linear_scale_lr, lr_at
from .rng import STREAM_HEAD, generator
from .tensor import Value

HEAD_KINDS = ("lp-cls", "lp-gap", "lp-cls+gap", "gcp", "bcnn", "isqrt",
              "mhc3", "mp", "mp+cls-gcp")

CHECKPOINT_MAGIC = b"MPCK"
CHECKPOINT_VERSION = 1


@dataclass
class RunConfig:
    head: str = "mp"
    d_hat: int = 8
    h: int = 2
    d_hat_gcp: int = 0          # 0 = min(128, data dim)
    d_h: int = 16               # recalibration hidden width (mp+ only)
    mode: str = "auto"          # first-moment source: cls, gap, or auto
    epochs: int = 20
    batch: int = 32
    lr: float = 1e-2
    weight_decay: float = 0.05
    warmup_frac: float = 0.1
    lr_min: float = 1e-6
    batch_ref: int = 0          # >0 enables the linear batch scaling rule
    val_fraction: float = 0.8
    seed: int = 0
    isqrt_iters: int = 5
    features: str = ""
    # mp+ backbone knobs; width/tokens always come from the data
    backbone_layers: int = 4
    backbone_heads: int = 4
    backbone_ffn: int = 4
    backbone_seed: int = 0
    psrp: bool = True

    def __post_init__(self):
        if self.head not in HEAD_KINDS and self.head != "mp+":
            raise ConfigError(f"unknown head {self.head!r}; expected one of "
                              f"{HEAD_KINDS + ('mp+',)}")
        if self.mode not in ("auto", "cls", "gap"):
            raise ConfigError(f"mode must be auto/cls/gap, got {self.mode!r}")
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("epochs and batch must be >= 1")
        if not (0.0 <= self.warmup_frac < 1.0):
            raise ConfigError(f"warmup fraction must lie in [0, 1), got {self.warmup_frac}")

    def canonical(self) -> dict:
        return dict(sorted(asdict(self).items()))

    def config_hash(self, data_summary: dict) -> str:
        payload = {"config": self.canonical(), "data": dict(sorted(data_summary.items()))}
        return hashlib.sha256(
            json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def effective_lr(self) -> float:
        if self.batch_ref > 0:
            return linear_scale_lr(self.lr, self.batch, self.batch_ref)
        return self.lr


def resolve_mode(mode: str, has_cls: bool) -> str:
    if mode == "auto":
        return "cls" if has_cls else "gap"
    if mode == "cls" and not has_cls:
        raise ConfigError("cls mode requested but the dataset stores no cls token")
    return mode


def data_summary(ds: FeatureDataset) -> dict:
    return {"dim": ds.feature_dim, "tokens": ds.tokens_per_sample,
            "has_cls": int(ds.has_cls), "classes": ds.class_count}


# ---------------------------------------------------------------------------
# probing heads
# ---------------------------------------------------------------------------

@dataclass
class ProbeHead:
    kind: str
    params: dict[str, Value]
    forward: callable = field(repr=False, default=None)
    counts: dict = field(default_factory=dict)

    def param_list(self) -> list[Value]:
        return list(self.params.values())

    def total_params(self) -> int:
        return sum(v.data.size for v in self.params.values())


def _zeros_classifier(n_classes: int, rep_size: int) -> tuple[Value, Value]:
    return (Value(np.zeros((n_classes, rep_size)), requires_grad=True),
            Value(np.zeros(n_classes), requires_grad=True))


def _fan_in_reduce(rng, d_out: int, d_in: int) -> tuple[Value, Value]:
    bound = 1.0 / np.sqrt(d_in)
    return (Value(rng.uniform(-bound, bound, size=(d_out, d_in)), requires_grad=True),
            Value(np.zeros(d_out), requires_grad=True))


def build_probe_head(config: RunConfig, ds: FeatureDataset) -> ProbeHead:
    """Construct parameters and a per-sample forward for the configured
    head kind. Classifier weights start at zero so the first loss is
    exactly ln(class count)."""
    d, n_classes = ds.feature_dim, ds.class_count
    rng = generator(STREAM_HEAD, config.seed)
    kind = config.head
    mode = resolve_mode(config.mode, ds.has_cls)
    needs_cls = kind in ("lp-cls", "lp-cls+gap", "mp+cls-gcp")
    if needs_cls and not ds.has_cls:
        raise ConfigError(f"head {kind!r} needs a cls token, dataset has none")

    if kind == "lp-cls":
        w, b = _zeros_classifier(n_classes, d)
        return ProbeHead(kind, {"w": w, "b": b},
                         lambda x: lp_forward(first_moment(x, "cls"), w, b))

    if kind == "lp-gap":
        w, b = _zeros_classifier(n_classes, d)
        return ProbeHead(kind, {"w": w, "b": b},
                         lambda x: lp_forward(first_moment(x, "gap"), w, b))

    if kind == "lp-cls+gap":
        w, b = _zeros_classifier(n_classes, 2 * d)
        def fwd(x):
            m = T.concat([first_moment(x, "cls"), first_moment(x, "gap")], axis=0)
            return lp_forward(m, w, b)
        return ProbeHead(kind, {"w": w, "b": b}, fwd)

    if kind in ("gcp", "bcnn", "isqrt"):
        d_gcp = config.d_hat_gcp or min(128, d)
        if d_gcp > d:
            raise ConfigError(f"gcp reduction width {d_gcp} exceeds data dim {d}")
        rw, rb = _fan_in_reduce(rng, d_gcp, d)
        w, b = _zeros_classifier(n_classes, d_gcp * d_gcp)
        iters = config.isqrt_iters
        def fwd(x):
            if kind == "gcp":
                rep = gcp_forward(x, rw, rb)
            else:
                tokens = T.as_value(x.tokens)
                xhat = T.add(T.matmul(tokens, T.transpose(rw)), rb)
                cov = T.matmul(T.transpose(xhat), xhat)
                if kind == "bcnn":
                    rep = T.flatten(bcnn_signed_sqrt(cov))
                else:
                    rep = T.flatten(isqrt_cov(cov, iters))
            return lp_forward(rep, w, b)
        return ProbeHead(kind, {"reduce_w": rw, "reduce_b": rb, "w": w, "b": b}, fwd)

    if kind == "mhc3":
        cfg = MHC3Config(d=d, d_hat=config.d_hat, h=config.h)
        p = init_mp_head(cfg, n_classes, rng)
        params = {"reduce_w": p.reduce_w, "reduce_b": p.reduce_b,
                  "lra_k1": p.lra_k1, "lra_b1": p.lra_b1,
                  "lra_k2": p.lra_k2, "lra_b2": p.lra_b2,
                  "w2": p.w2, "b2": p.b2}
        return ProbeHead(kind, params,
                         lambda x: lp_forward(mhc3(x, p, cfg), p.w2, p.b2))

    if kind == "mp":
        cfg = MHC3Config(d=d, d_hat=config.d_hat, h=config.h)
        p = init_mp_head(cfg, n_classes, rng)
        params = {"reduce_w": p.reduce_w, "reduce_b": p.reduce_b,
                  "lra_k1": p.lra_k1, "lra_b1": p.lra_b1,
                  "lra_k2": p.lra_k2, "lra_b2": p.lra_b2,
                  "w1": p.w1, "b1": p.b1, "w2": p.w2, "b2": p.b2}
        return ProbeHead(kind, params,
                         lambda x: mp_forward(x, p, cfg, mode))

    if kind == "mp+cls-gcp":
        d_gcp = config.d_hat_gcp or min(128, d)
        if d_gcp > d:
            raise ConfigError(f"gcp reduction width {d_gcp} exceeds data dim {d}")
        rw, rb = _fan_in_reduce(rng, d_gcp, d)
        w1, b1 = _zeros_classifier(n_classes, d)
        w2, b2 = _zeros_classifier(n_classes, d_gcp * d_gcp)
        def fwd(x):
            branch1 = lp_forward(first_moment(x, "cls"), w1, b1)
            branch2 = lp_forward(gcp_forward(x, rw, rb), w2, b2)
            return T.add(branch1, branch2)
        return ProbeHead(kind, {"reduce_w": rw, "reduce_b": rb,
                                "w1": w1, "b1": b1, "w2": w2, "b2": b2}, fwd)

    raise ConfigError(f"unknown head {kind!r}")


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class RunReport:
    config: dict
    data: dict
    config_hash: str
    param_counts: dict
    initial_train_loss: float
    epochs: list            # (epoch, train_loss, val_accuracy, wall_clock_s)
    final_val_accuracy: float

    def to_text(self) -> str:
        lines = ["momentprobe-report\tv1", "[config]"]
        for k, v in self.config.items():
            lines.append(f"{k}\t{v!r}" if isinstance(v, str) else f"{k}\t{v}")
        lines.append("[data]")
        for k, v in sorted(self.data.items()):
            lines.append(f"{k}\t{v}")
        lines.append(f"config_hash\t{self.config_hash}")
        lines.append("[params]")
        for k, v in self.param_counts.items():
            lines.append(f"{k}\t{v}")
        lines.append("[initial]")
        lines.append(f"train_loss\t{self.initial_train_loss!r}")
        lines.append("[epochs]")
        lines.append("epoch\ttrain_loss\tval_accuracy\twall_clock_s")
        for epoch, loss, acc, wall in self.epochs:
            lines.append(f"{epoch}\t{loss!r}\t{acc!r}\t{wall:.3f}")
        lines.append("[final]")
        lines.append(f"val_accuracy\t{self.final_val_accuracy!r}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())


def strip_wall_clock(report_text: str) -> str:
    """Drop the wall-clock column so reports can be compared byte-wise."""
    out = []
    for line in report_text.splitlines():
        cells = line.split("\t")
        if cells and cells[0] == "epoch" or (cells[0].isdigit() and len(cells) == 4):
            cells = cells[:3]
        out.append("\t".join(cells))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(forward, ds: FeatureDataset,
             samples=None) -> tuple[float, dict[int, float]]:
    """Accuracy and per-class accuracy of argmax predictions."""
    if len(ds) == 0:
        raise UsageError("cannot evaluate on an empty dataset")
    hits: dict[int, int] = {c: 0 for c in range(ds.class_count)}
    totals: dict[int, int] = {c: 0 for c in range(ds.class_count)}
    correct = 0
    for i in range(len(ds)):
        sample = ds.sample(i) if samples is None else samples(i)
        pred = int(np.argmax(forward(sample).data))
        totals[sample.label] += 1
        if pred == sample.label:
            hits[sample.label] += 1
            correct += 1
    per_class = {c: hits[c] / totals[c] for c in totals if totals[c]}
    return correct / len(ds), per_class


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _mean_batch_loss(forward, ds: FeatureDataset, indices: np.ndarray) -> Value:
    logits = T.stack([forward(ds.sample(int(i))) for i in indices])
    labels = ds.labels[indices].astype(np.int64)
    return T.softmax_cross_entropy(logits, labels)


def _fit(forward, params: list[Value], config: RunConfig,
         train_ds: FeatureDataset, val_ds: FeatureDataset):
    opt = AdamW(params, lr_base=config.effective_lr(),
                weight_decay=config.weight_decay)
    steps_per_epoch = (len(train_ds) + config.batch - 1) // config.batch
    total_steps = config.epochs * steps_per_epoch
    warmup = min(int(round(config.warmup_frac * total_steps)), total_steps - 1)
    sched = Schedule(warmup_steps=warmup, total_steps=total_steps,
                     lr_base=config.effective_lr(), lr_min=min(config.lr_min,
                                                               config.effective_lr()))
    first_batch = next(batch_iter(train_ds, config.batch, config.seed, 0))
    initial_loss = float(_mean_batch_loss(forward, train_ds, first_batch).data)

    history = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        tic = time.perf_counter()
        losses = []
        for indices in batch_iter(train_ds, config.batch, config.seed, epoch - 1):
            loss = _mean_batch_loss(forward, train_ds, indices)
            opt.zero_grad()
            T.backward(loss)
            step += 1
            opt.step(lr_at(min(step, total_steps), sched))
            losses.append(float(loss.data))
        val_acc, _ = evaluate(forward, val_ds)
        history.append((epoch, float(np.mean(losses)), val_acc,
                        time.perf_counter() - tic))
    return initial_loss, history


def train_probe_run(config: RunConfig,
                    ds: FeatureDataset) -> tuple[RunReport, ProbeHead]:
    """Train one probing head on frozen features from a dataset."""
    if config.head == "mp+":
        raise UsageError("use train_mpplus_run for the recalibrated head")
    train_ds, val_ds = split_train_val(ds, config.val_fraction, config.seed)
    head = build_probe_head(config, ds)
    initial_loss, history = _fit(head.forward, head.param_list(), config,
                                 train_ds, val_ds)
    summary = data_summary(ds)
    report = RunReport(
        config=config.canonical(), data=summary,
        config_hash=config.config_hash(summary),
        param_counts={"trainable_total": head.total_params(),
                      "head": head.total_params(), "psrp": 0},
        initial_train_loss=initial_loss,
        epochs=history, final_val_accuracy=history[-1][2])
    return report, head


@dataclass
class MPPlusArtifacts:
    frozen: BackboneWeights
    psrp: PSRPParams | None
    head_params: MPHeadParams
    head_cfg: MHC3Config
    mode: str
    params: dict[str, Value]

    def forward(self, raw: np.ndarray, label: int) -> Value:
        features = backbone_forward(raw, self.frozen, recal=self.psrp, label=label)
        return mp_forward(features, self.head_params, self.head_cfg, self.mode)

    def forward_sample(self, sample: TokenFeatures) -> Value:
        raw = np.vstack([np.asarray(sample.cls)[None, :], np.asarray(sample.tokens)])
        return self.forward(raw, sample.label)


def build_mpplus(config: RunConfig, ds: FeatureDataset) -> MPPlusArtifacts:
    if not ds.has_cls:
        raise ConfigError("the recalibrated pipeline expects datasets with a cls row")
    backbone_cfg = ToyBackboneConfig(
        layers=config.backbone_layers, width=ds.feature_dim,
        attn_heads=config.backbone_heads, tokens=ds.tokens_per_sample,
        ffn_expansion=config.backbone_ffn, seed=config.backbone_seed)
    frozen = build_backbone(backbone_cfg)
    psrp = init_psrp(backbone_cfg, d_h=config.d_h, seed=config.seed) \
        if config.psrp else None
    head_cfg = MHC3Config(d=ds.feature_dim, d_hat=config.d_hat, h=config.h)
    head_params = init_mp_head(head_cfg, ds.class_count,
                               generator(STREAM_HEAD, config.seed))
    params: dict[str, Value] = {}
    if psrp is not None:
        for li, layer in enumerate(psrp.layers):
            params[f"psrp{li}.w_down"] = layer.w_down
            params[f"psrp{li}.w_up1"] = layer.w_up1
            params[f"psrp{li}.w_up2"] = layer.w_up2
    for name in ("reduce_w", "reduce_b", "lra_k1", "lra_b1", "lra_k2",
                 "lra_b2", "w1", "b1", "w2", "b2"):
        params[name] = getattr(head_params, name)
    return MPPlusArtifacts(frozen=frozen, psrp=psrp, head_params=head_params,
                           head_cfg=head_cfg, mode="cls", params=params)


def train_mpplus_run(config: RunConfig,
                     ds: FeatureDataset) -> tuple[RunReport, MPPlusArtifacts]:
    """Jointly train recalibration and head parameters over the frozen
    toy backbone; raw dataset rows are the backbone inputs."""
    train_ds, val_ds = split_train_val(ds, config.val_fraction, config.seed)
    art = build_mpplus(config, ds)
    initial_loss, history = _fit(art.forward_sample, list(art.params.values()),
                                 config, train_ds, val_ds)
    psrp_count = art.psrp.count() if art.psrp is not None else 0
    head_count = sum(v.data.size for v in art.head_params.values())
    summary = data_summary(ds)
    report = RunReport(
        config=config.canonical(), data=summary,
        config_hash=config.config_hash(summary),
        param_counts={"trainable_total": psrp_count + head_count,
                      "head": head_count, "psrp": psrp_count},
        initial_train_loss=initial_loss,
        epochs=history, final_val_accuracy=history[-1][2])
    return report, art


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, config: RunConfig, data: dict,
                    params: dict[str, Value]) -> None:
    """Binary envelope (little-endian, like the feature format): magic,
    version, config hash, canonical config+data JSON, then each named
    parameter as f64."""
    payload = json.dumps({"config": config.canonical(),
                          "data": dict(sorted(data.items()))},
                         sort_keys=True).encode()
    h = config.config_hash(data).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<H", len(h)))
        fh.write(h)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        fh.write(struct.pack("<I", len(params)))
        for name, value in params.items():
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", value.data.ndim))
            for extent in value.data.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(value.data.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict, str, dict[str, np.ndarray]]:
    path = Path(path)
    raw = path.read_bytes()
    view = memoryview(raw)
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    off = 4
    (version,) = struct.unpack_from("<I", view, off); off += 4
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<H", view, off); off += 2
    config_hash = bytes(view[off:off + hlen]).decode(); off += hlen
    (jlen,) = struct.unpack_from("<I", view, off); off += 4
    meta = json.loads(bytes(view[off:off + jlen]).decode()); off += jlen
    (count,) = struct.unpack_from("<I", view, off); off += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, off); off += 2
        name = bytes(view[off:off + nlen]).decode(); off += nlen
        (ndim,) = struct.unpack_from("<B", view, off); off += 1
        shape = struct.unpack_from(f"<{ndim}I", view, off); off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(view, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        params[name] = arr.copy()
    if off != len(raw):
        raise DataError(f"{path}: trailing bytes after checkpoint payload")
    return meta["config"], meta["data"], config_hash, params


def _shell_dataset(meta_data: dict) -> FeatureDataset:
    rows = meta_data["tokens"] + (1 if meta_data["has_cls"] else 0)
    return FeatureDataset(
        tokens_per_sample=meta_data["tokens"], feature_dim=meta_data["dim"],
        has_cls=bool(meta_data["has_cls"]), class_count=meta_data["classes"],
        labels=np.zeros(0, dtype=np.uint32),
        features=np.zeros((0, rows, meta_data["dim"]), dtype=np.float32))


def _assign_stored(params: dict[str, Value], stored: dict[str, np.ndarray],
                   what: str) -> None:
    if set(params) != set(stored):
        raise DataError(f"checkpoint parameters {sorted(stored)} do not match {what}")
    for name, value in params.items():
        if stored[name].shape != value.data.shape:
            raise DataError(f"checkpoint parameter {name} has shape "
                            f"{stored[name].shape}, expected {value.data.shape}")
        value.data = np.ascontiguousarray(stored[name])


def restore_probe_head(meta_config: dict, meta_data: dict,
                       stored: dict[str, np.ndarray]) -> ProbeHead:
    """Rebuild a probing head from checkpoint metadata and weights."""
    config = RunConfig(**meta_config)
    head = build_probe_head(config, _shell_dataset(meta_data))
    _assign_stored(head.params, stored, f"head {config.head!r}")
    return head


def restore_mpplus(meta_config: dict, meta_data: dict,
                   stored: dict[str, np.ndarray]) -> MPPlusArtifacts:
    """Rebuild the recalibrated pipeline from checkpoint metadata."""
    config = RunConfig(**meta_config)
    art = build_mpplus(config, _shell_dataset(meta_data))
    _assign_stored(art.params, stored, "recalibrated head")
    return art
