"""Analytical FLOPs and storage accounting for encoder sharing.

FLOPs count multiplies and adds separately (2 per MAC) and ignore
normalization, softmax, and bias terms; per layer at sequence length n
and width d that gives 8nd^2 for the QKV and output projections, 16nd^2
for the feed-forward, and 4n^2*d for attention score and mixing
matmuls, i.e. L * (24nd^2 + 4n^2*d) total.  This reproduces the ~7x
full-vs-distilled compute ratio and the break-even task count where a
shared frozen encoder overtakes per-task distilled models.

Storage accounting mirrors the write path of the feature store:
raw-layer records persist the L post-embedding layers, 1-bit rows are
byte-padded, and a 16-bit storage dtype is included as the baseline the
16x one-bit reduction is measured against.
"""

import csv
from dataclasses import dataclass
from typing import Dict, List, Optional

from .encoder import EncoderConfig
from .errors import ParameterError
from .feature_store import STAGE_LAYER_POOLED, STAGE_RAW_LAYERS
from .quantization import KIND_BIT1, _BITS

STRATEGY_SINGLE_FULL = "single-task-full"
STRATEGY_SINGLE_DISTILLED = "single-task-distilled"
STRATEGY_SHARED = "shared-frozen-encoder"


def encoder_flops(config: EncoderConfig, seq_len: int) -> int:
    """Forward-pass FLOPs for one sequence of ``seq_len`` tokens."""
    if seq_len < 1:
        raise ParameterError(f"seq_len must be >= 1, got {seq_len}")
    n, d = seq_len, config.model_dim
    return config.num_layers * (24 * n * d * d + 4 * n * n * d)


def storage_per_token(stage: str, config: EncoderConfig, scheme_kind: str) -> int:
    """Stored bits per input token for a pooling stage and storage dtype.

    ``raw_layers`` persists all L post-embedding layer outputs;
    ``layer_pooled`` persists one d-vector per token.  One-bit rows are
    padded to byte boundaries, matching the on-disk payload exactly.
    """
    if scheme_kind not in _BITS:
        raise ParameterError(f"unknown storage dtype {scheme_kind!r}")
    d = config.model_dim
    if scheme_kind == KIND_BIT1:
        row_bits = 8 * ((d + 7) // 8)
    else:
        row_bits = d * _BITS[scheme_kind]
    if stage == STAGE_RAW_LAYERS:
        return config.num_layers * row_bits
    if stage == STAGE_LAYER_POOLED:
        return row_bits
    raise ParameterError(f"unknown pooling stage {stage!r}")


@dataclass(frozen=True)
class CostScenario:
    full_config: EncoderConfig
    distilled_config: EncoderConfig
    head_cost_fraction: float
    seq_len: int
    num_tasks: int

    def __post_init__(self):
        if not 0.0 <= self.head_cost_fraction < 1.0:
            raise ParameterError(
                f"head_cost_fraction must be in [0, 1), got "
                f"{self.head_cost_fraction}")
        if self.num_tasks < 1:
            raise ParameterError("num_tasks must be >= 1")


@dataclass
class CostReport:
    scenario: CostScenario
    curves: Dict[str, List[float]]        # strategy -> cumulative FLOPs, k=1..K
    break_even_k: Optional[int]           # None when no crossing <= num_tasks
    storage_rows: List[dict]              # stage/dtype -> bits per token


def cumulative_flops(scenario: CostScenario) -> CostReport:
    """Cumulative inference FLOPs per strategy as tasks accumulate.

    Per-task strategies pay a full encoder pass per task; the shared
    strategy pays the full encoder once plus a per-task head cost of
    ``head_cost_fraction`` of a full pass.
    """
    f_full = encoder_flops(scenario.full_config, scenario.seq_len)
    f_dist = encoder_flops(scenario.distilled_config, scenario.seq_len)
    head = scenario.head_cost_fraction * f_full
    ks = range(1, scenario.num_tasks + 1)
    curves = {
        STRATEGY_SINGLE_FULL: [float(k * f_full) for k in ks],
        STRATEGY_SINGLE_DISTILLED: [float(k * f_dist) for k in ks],
        STRATEGY_SHARED: [float(f_full + k * head) for k in ks],
    }
    return CostReport(scenario=scenario, curves=curves,
                      break_even_k=break_even_tasks(scenario),
                      storage_rows=storage_table(scenario.full_config))


def break_even_tasks(scenario: CostScenario) -> Optional[int]:
    """Smallest k where the shared strategy beats per-task distillation.

    Returns None when no crossing occurs within ``num_tasks`` (e.g. the
    per-task head cost exceeds a distilled pass).
    """
    f_full = encoder_flops(scenario.full_config, scenario.seq_len)
    f_dist = encoder_flops(scenario.distilled_config, scenario.seq_len)
    head = scenario.head_cost_fraction * f_full
    for k in range(1, scenario.num_tasks + 1):
        if f_full + k * head < k * f_dist:
            return k
    return None


def format_break_even(break_even_k: Optional[int], num_tasks: int) -> str:
    if break_even_k is None:
        return f"none <= {num_tasks}"
    return str(break_even_k)


def storage_table(config: EncoderConfig,
                  reference_tokens: int = 50) -> List[dict]:
    """Bits/token and reference-document bytes per stage and dtype."""
    rows = []
    for stage in (STAGE_RAW_LAYERS, STAGE_LAYER_POOLED):
        for kind in ("f32", "f16", "u8", "bit1"):
            bits = storage_per_token(stage, config, kind)
            rows.append(dict(
                stage=stage, dtype=kind, bits_per_token=bits,
                reference_doc_bytes=reference_tokens * bits // 8,
            ))
    return rows


def write_cost_csv(path, report: CostReport) -> None:
    """Emit (k, strategy, flops) rows plus one break-even marker row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "strategy", "flops"])
        for strategy, curve in report.curves.items():
            for k, flops in enumerate(curve, start=1):
                writer.writerow([k, strategy, f"{flops:.0f}"])
        if report.break_even_k is not None:
            shared = report.curves[STRATEGY_SHARED][report.break_even_k - 1]
            writer.writerow([report.break_even_k, "break-even", f"{shared:.0f}"])


def write_storage_table(path, rows: List[dict],
                        reference_tokens: int = 50) -> None:
    with open(path, "w") as fh:
        fh.write(f"{'stage':14} {'dtype':6} {'bits/token':>12} "
                 f"{'bytes/{}tok'.format(reference_tokens):>14}\n")
        for row in rows:
            fh.write(f"{row['stage']:14} {row['dtype']:6} "
                     f"{row['bits_per_token']:12d} "
                     f"{row['reference_doc_bytes']:14d}\n")
