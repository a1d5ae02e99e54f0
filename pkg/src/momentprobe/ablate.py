"""Ablation suites: representation comparison, reduction-width sweep,
and recalibration-width sweep, each emitting one table of
(row label, trainable params, final accuracy) under a shared seed."""

from __future__ import annotations

from dataclasses import dataclass, replace

from .data import FeatureDataset
from .errors import ConfigError, UsageError
from .train import RunConfig, train_mpplus_run, train_probe_run

SUITES = ("probing", "dhat", "dh")

# representation comparison rows, fixed order: single-statistic heads
# first, then the two-branch combinations, fused head last
PROBING_ROWS = ("lp-cls", "lp-gap", "gcp", "mhc3", "lp-cls+gap",
                "mp+cls-gcp", "mp")

DH_SWEEP = (4, 8, 16, 32, 64)

# reduction widths swept as these fractions of the data width, snapped
# to multiples of 4h so the aggregation arithmetic stays integral
DHAT_FRACTIONS = (1 / 6, 1 / 3, 1 / 2, 2 / 3)


@dataclass
class AblationRow:
    label: str
    params: int
    accuracy: float


@dataclass
class AblationTable:
    suite: str
    rows: list[AblationRow]

    def to_tsv(self) -> str:
        lines = [f"momentprobe-ablation\tv1\t{self.suite}",
                 "row\tparams\tval_accuracy"]
        for row in self.rows:
            lines.append(f"{row.label}\t{row.params}\t{row.accuracy!r}")
        return "\n".join(lines) + "\n"

    def to_aligned(self) -> str:
        header = ("row", "params", "val_accuracy")
        cells = [(r.label, str(r.params), f"{r.accuracy:.4f}") for r in self.rows]
        widths = [max(len(header[i]), *(len(c[i]) for c in cells)) for i in range(3)]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        out = [fmt.format(*header)]
        out.extend(fmt.format(*c) for c in cells)
        return "\n".join(out) + "\n"


def dhat_sweep_values(dim: int, h: int) -> list[int]:
    step = 4 * h
    values = []
    for frac in DHAT_FRACTIONS:
        snapped = max(step, round(dim * frac / step) * step)
        if snapped <= dim and snapped not in values:
            values.append(snapped)
    if len(values) < 2:
        raise ConfigError(
            f"data width {dim} too narrow for a reduction sweep with h={h}")
    return sorted(values)


def run_suite(suite: str, config: RunConfig, ds: FeatureDataset) -> AblationTable:
    if suite == "probing":
        rows = []
        for kind in PROBING_ROWS:
            report, _ = train_probe_run(replace(config, head=kind), ds)
            rows.append(AblationRow(kind, report.param_counts["trainable_total"],
                                    report.final_val_accuracy))
        return AblationTable(suite, rows)

    if suite == "dhat":
        rows = []
        for d_hat in dhat_sweep_values(ds.feature_dim, config.h):
            report, _ = train_probe_run(replace(config, head="mp", d_hat=d_hat), ds)
            rows.append(AblationRow(str(d_hat),
                                    report.param_counts["trainable_total"],
                                    report.final_val_accuracy))
        return AblationTable(suite, rows)

    if suite == "dh":
        rows = []
        for d_h in DH_SWEEP:
            report, _ = train_mpplus_run(replace(config, head="mp+", d_h=d_h), ds)
            rows.append(AblationRow(str(d_h),
                                    report.param_counts["trainable_total"],
                                    report.final_val_accuracy))
        return AblationTable(suite, rows)

    raise UsageError(f"unknown suite {suite!r}; expected one of {SUITES}")
