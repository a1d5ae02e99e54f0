"""Acceptance suite.

One test per release criterion, each printing a [PASS]/[FAIL] line
(run with ``pytest tests/test_acceptance.py -s`` to see them live).
Tolerances are pinned here and nowhere else.
"""

import os
import tempfile
from contextlib import contextmanager

import numpy as np
import pytest

from momentprobe import tensor as T
from momentprobe.ablate import run_suite
from momentprobe.backbone import (ToyBackboneConfig, backbone_forward,
                                  build_backbone, init_psrp)
from momentprobe.data import SynthSpec, synth_generate
from momentprobe.head import (MHC3Config, TokenFeatures, count_params,
                              count_params_closed_form, cross_cov_adjacent,
                              init_mp_head, mhc3, mp_forward)
from momentprobe.optim import AdamW, Schedule, lr_at
from momentprobe.rng import STREAM_HEAD, generator
from momentprobe.tensor import Value
from momentprobe.train import (RunConfig, data_summary, save_checkpoint,
                               strip_wall_clock, train_mpplus_run,
                               train_probe_run)


@contextmanager
def criterion(name):
    try:
        yield
    except Exception:
        print(f"[FAIL] {name}")
        raise
    print(f"[PASS] {name}")


def rand(seed, *shape):
    return np.random.default_rng(seed).standard_normal(shape)


def randomized_head(cfg, n_classes, seed, scale=0.3):
    p = init_mp_head(cfg, n_classes, generator(STREAM_HEAD, seed))
    rng = np.random.default_rng(seed + 1000)
    for v in p.values():
        v.data = rng.standard_normal(v.data.shape) * scale
    return p


# ---------------------------------------------------------------------------
# 1. dimension and compression laws
# ---------------------------------------------------------------------------

def test_dimension_law():
    with criterion("dimension-law"):
        for d_hat, h in ((128, 2), (256, 4), (512, 8), (64, 2)):
            cfg = MHC3Config(d=d_hat, d_hat=d_hat, h=h)
            p = init_mp_head(cfg, 2, generator(STREAM_HEAD, 0))
            out = mhc3(TokenFeatures(tokens=rand(0, 3, d_hat)), p, cfg)
            assert out.data.size == (h - 1) * (d_hat // (4 * h)) ** 2
            assert d_hat ** 2 / out.data.size >= 16 * h


# ---------------------------------------------------------------------------
# 2. gradient suite (rel. err < 1e-4, >= 20 seeds)
# ---------------------------------------------------------------------------

def test_gradient_suite():
    with criterion("gradient-suite"):
        worst = 0.0
        for seed in range(20):
            rng = np.random.default_rng(seed)

            a = Value(rng.standard_normal((3, 4)), requires_grad=True)
            b = Value(rng.standard_normal((4, 2)), requires_grad=True)
            worst = max(worst, T.finite_diff_check(
                lambda: T.sum_all(T.matmul(a, b)), [a, b]))

            x = Value(rng.standard_normal((2, 5, 5)), requires_grad=True)
            k = Value(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
            bias = Value(rng.standard_normal(2), requires_grad=True)
            worst = max(worst, T.finite_diff_check(
                lambda: T.sum_all(T.conv2d(x, k, bias, stride=2, pad=1)),
                [x, k, bias]))

            v = Value(rng.standard_normal(6), requires_grad=True)
            w = rng.standard_normal(6)
            worst = max(worst, T.finite_diff_check(
                lambda: T.sum_all(T.mul(T.gelu(v), w)), [v]))
            worst = max(worst, T.finite_diff_check(
                lambda: T.sum_all(T.mul(T.relu(v), w)), [v]))

            xm = Value(rng.standard_normal((3, 5)), requires_grad=True)
            gain = Value(rng.standard_normal(5), requires_grad=True)
            shift = Value(rng.standard_normal(5), requires_grad=True)
            probe = rng.standard_normal((3, 5))
            worst = max(worst, T.finite_diff_check(
                lambda: T.sum_all(T.mul(T.layer_norm(xm, gain, shift), probe)),
                [xm, gain, shift]))

            z = Value(rng.standard_normal((4, 4)), requires_grad=True)
            zprobe = rng.standard_normal((4, 4))
            worst = max(worst, T.finite_diff_check(
                lambda: T.sum_all(T.mul(T.frobenius_normalize(z), zprobe)), [z]))

            logits = Value(rng.standard_normal((3, 4)), requires_grad=True)
            labels = rng.integers(0, 4, size=3)
            worst = max(worst, T.finite_diff_check(
                lambda: T.softmax_cross_entropy(logits, labels), [logits]))

        assert worst < 1e-4, f"per-op gradient error {worst:.3e}"

        # full fused-head loss at toy scale; the step ladder resolves
        # coordinates whose true derivative sits near the roundoff floor
        refine = (1e-4, 1e-3, 1e-2)
        worst_mp = 0.0
        for seed in range(20):
            cfg = MHC3Config(d=16, d_hat=8, h=2)
            p = randomized_head(cfg, 3, seed)
            xs = TokenFeatures(tokens=rand(seed + 50, 4, 16),
                               cls=rand(seed + 90, 16), label=seed % 3)
            worst_mp = max(worst_mp, T.finite_diff_check(
                lambda: T.softmax_cross_entropy(
                    T.reshape(mp_forward(xs, p, cfg, "cls"), (1, 3)), [xs.label]),
                p.values(), refine=refine))
        assert worst_mp < 1e-4, f"fused-head loss gradient error {worst_mp:.3e}"

        # full recalibrated loss at toy scale
        worst_plus = 0.0
        bcfg = ToyBackboneConfig(layers=2, width=16, attn_heads=2, tokens=4, seed=1)
        frozen = build_backbone(bcfg)
        for seed in range(20):
            cfg = MHC3Config(d=16, d_hat=8, h=2)
            p = randomized_head(cfg, 3, seed)
            psrp = init_psrp(bcfg, d_h=4, seed=seed)
            rng = np.random.default_rng(seed + 2000)
            for layer in psrp.layers:
                layer.w_up1.data = rng.standard_normal(layer.w_up1.data.shape) * 0.2
                layer.w_up2.data = rng.standard_normal(layer.w_up2.data.shape) * 0.2
            raw = rand(seed + 70, 5, 16)
            params = psrp.values() + p.values()

            def loss():
                feats = backbone_forward(raw, frozen, recal=psrp)
                lg = mp_forward(feats, p, cfg, "cls")
                return T.softmax_cross_entropy(T.reshape(lg, (1, 3)), [seed % 3])

            worst_plus = max(worst_plus, T.finite_diff_check(loss, params,
                                                             refine=refine))
        assert worst_plus < 1e-4, f"recalibrated loss gradient error {worst_plus:.3e}"


# ---------------------------------------------------------------------------
# 3. cross-covariance oracle equivalence (< 1e-12, 100 instances)
# ---------------------------------------------------------------------------

def test_oracle_equivalence():
    with criterion("oracle-equivalence"):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            n, q = int(rng.integers(2, 8)), int(rng.integers(2, 6))
            h1, h2 = rng.standard_normal((n, q)), rng.standard_normal((n, q))
            raw = np.zeros((q, q))
            for a in range(q):
                for b in range(q):
                    for t in range(n):
                        raw[a, b] += h1[t, a] * h2[t, b]
            oracle = raw / (np.sqrt((raw ** 2).sum()) + 1e-6)
            (z,) = cross_cov_adjacent([Value(h1), Value(h2)])
            assert np.abs(z.data - oracle).max() < 1e-12


# ---------------------------------------------------------------------------
# 4. identity at initialization, frozen immutability
# ---------------------------------------------------------------------------

def test_identity_at_init():
    with criterion("identity-at-init"):
        bcfg = ToyBackboneConfig(layers=2, width=16, attn_heads=2, tokens=4, seed=5)
        frozen = build_backbone(bcfg)
        cfg = MHC3Config(d=16, d_hat=8, h=2)
        head = randomized_head(cfg, 3, 0)
        psrp = init_psrp(bcfg, d_h=4, seed=0)
        raw = rand(8, 5, 16)

        plain = mp_forward(backbone_forward(raw, frozen), head, cfg, "cls")
        recal = mp_forward(backbone_forward(raw, frozen, recal=psrp), head,
                           cfg, "cls")
        assert np.array_equal(plain.data, recal.data)

        snapshot = [v.data.copy() for v in frozen.values()]
        opt = AdamW(psrp.values() + head.values(), lr_base=1e-2)
        for step in range(100):
            feats = backbone_forward(rand(step, 5, 16), frozen, recal=psrp)
            loss = T.softmax_cross_entropy(
                T.reshape(mp_forward(feats, head, cfg, "cls"), (1, 3)),
                [step % 3])
            opt.zero_grad()
            T.backward(loss)
            opt.step()
        for before, value in zip(snapshot, frozen.values()):
            assert np.array_equal(before, value.data)
            assert value.grad is None


# ---------------------------------------------------------------------------
# 5. separability: second-order signal invisible to linear probes
# ---------------------------------------------------------------------------

def test_separability():
    with criterion("separability"):
        cov = synth_generate(SynthSpec(classes=2, tokens=32, dim=8,
                                       regime="cov_sep", per_class=500,
                                       seed=42, rho=0.8))
        lp_report, _ = train_probe_run(
            RunConfig(head="lp-gap", epochs=8, batch=32, lr=1e-2, seed=1,
                      mode="gap"), cov)
        assert 0.40 <= lp_report.final_val_accuracy <= 0.60, \
            f"linear probe escaped the chance band: {lp_report.final_val_accuracy}"

        mp_report, _ = train_probe_run(
            RunConfig(head="mp", d_hat=8, h=2, epochs=20, batch=32, lr=1e-2,
                      seed=1), cov)
        assert mp_report.final_val_accuracy >= 0.90, \
            f"fused head below target: {mp_report.final_val_accuracy}"

        mean = synth_generate(SynthSpec(classes=2, tokens=32, dim=8,
                                        regime="mean_sep", per_class=500,
                                        seed=42, delta=10.0))
        lp_mean, _ = train_probe_run(
            RunConfig(head="lp-gap", epochs=5, batch=32, lr=1e-2, seed=1,
                      mode="gap"), mean)
        assert lp_mean.final_val_accuracy >= 0.99


# ---------------------------------------------------------------------------
# 6. representation comparison keeps the fused head on top
# ---------------------------------------------------------------------------

def test_ablation_ordering():
    with criterion("ablation-ordering"):
        ds = synth_generate(SynthSpec(classes=2, tokens=16, dim=16,
                                      regime="mixed", per_class=200, seed=11,
                                      delta=0.8, rho=0.8))
        table = run_suite("probing",
                          RunConfig(head="mp", d_hat=16, h=2, epochs=12,
                                    batch=32, lr=1e-2, seed=3), ds)
        acc = {row.label: row.accuracy for row in table.rows}
        assert [row.label for row in table.rows] == \
            ["lp-cls", "lp-gap", "gcp", "mhc3", "lp-cls+gap", "mp+cls-gcp", "mp"]
        for rival in ("lp-cls", "lp-gap", "gcp", "mhc3"):
            assert acc["mp"] >= acc[rival] - 0.005, \
                f"mp ({acc['mp']}) lost to {rival} ({acc[rival]})"


# ---------------------------------------------------------------------------
# 7. parameter accounting
# ---------------------------------------------------------------------------

def test_parameter_accounting():
    with criterion("parameter-accounting"):
        rng = np.random.default_rng(0)
        for _ in range(10):
            h = int(rng.choice([2, 4, 8]))
            d_hat = 4 * h * int(rng.integers(1, 5))
            d = d_hat + int(rng.integers(0, 32))
            c = int(rng.integers(2, 20))
            cfg = MHC3Config(d=d, d_hat=d_hat, h=h)
            p = init_mp_head(cfg, c, generator(STREAM_HEAD, 0))
            assert count_params(p) == count_params_closed_form(d, d_hat, h, c)

        counts = [count_params_closed_form(768, d_hat, 8, 100)
                  for d_hat in (128, 256, 384, 512)]
        assert counts == sorted(counts) and len(set(counts)) == 4


# ---------------------------------------------------------------------------
# 8. run determinism
# ---------------------------------------------------------------------------

def test_determinism():
    with criterion("determinism"):
        ds = synth_generate(SynthSpec(classes=2, tokens=16, dim=8,
                                      regime="cov_sep", per_class=50, seed=2,
                                      rho=0.8))
        config = RunConfig(head="mp", d_hat=8, h=2, epochs=3, batch=16,
                           lr=1e-2, seed=7)
        artifacts = []
        for _ in range(2):
            report, head = train_probe_run(config, ds)
            with tempfile.NamedTemporaryFile(suffix=".mpck", delete=False) as fh:
                save_checkpoint(fh.name, config, data_summary(ds), head.params)
                blob = open(fh.name, "rb").read()
            os.unlink(fh.name)
            artifacts.append((strip_wall_clock(report.to_text()), blob))
        assert artifacts[0][0] == artifacts[1][0], "reports differ"
        assert artifacts[0][1] == artifacts[1][1], "checkpoints differ"


# ---------------------------------------------------------------------------
# 9. optimizer anchors
# ---------------------------------------------------------------------------

def test_optimizer_anchors():
    with criterion("optimizer-anchors"):
        p = Value(np.array([1.0]), requires_grad=True)
        p.grad = np.array([1.0])
        AdamW([p], lr_base=0.1, weight_decay=0.0).step()
        assert abs(p.data[0] - (1.0 - 0.1 / (1.0 + 1e-8))) < 1e-9
        assert abs(p.data[0] - 0.9) < 2e-9

        s = Schedule(warmup_steps=10, total_steps=100, lr_base=1e-3, lr_min=1e-6)
        assert lr_at(10, s) == 1e-3
        assert lr_at(100, s) == 1e-6
