# Copyright 2024 Tarkan Al-Kazily
"""
Report encodings: canonical JSON for PruneReport, flat CSV rows for summaries and ablations.

Canonical JSON has sorted keys, no insignificant whitespace, and floats rounded to 6
significant digits. Infinite values are written as the string "inf", NaN as "nan".
"""

import csv
import dataclasses
import io
import json
import math
import typing

from putri.evaluation import PerplexityResult
from putri.pruning import AblationRow, PruneReport

SUMMARY_COLUMNS = [
    "status",
    "target_sparsity",
    "achieved_sparsity",
    "predicted_sparsity",
    "alpha",
    "kv_heads_removed",
    "ffn_keep_per_layer",
    "ppl_before",
    "ppl_after",
]

ABLATION_COLUMNS = ["variant", "sparsity", "seed", "achieved", "ppl"]


def format_float(value: float) -> float | str:
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return float(f"{value:.6g}")


def _canonical(value: typing.Any) -> typing.Any:
    if isinstance(value, PerplexityResult):
        return {
            "value": format_float(value.value),
            "token_count": value.token_count,
            "nll_sum": format_float(value.nll_sum),
        }
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _canonical(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, bool) or value is None or isinstance(value, (int, str)):
        return value
    if isinstance(value, float):
        return format_float(value)
    if isinstance(value, dict):
        return {str(k): _canonical(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_canonical(v) for v in value]
    raise TypeError(f"Cannot encode {type(value).__name__} in a report")


def report_to_dict(report: PruneReport, include_timing: bool = False) -> dict:
    """
    Args:
        report: Report to encode
        include_timing: Keep wall_clock_seconds, which differs between identical runs

    Returns:
        JSON-ready dictionary
    """
    result = _canonical(report)
    if not include_timing:
        del result["wall_clock_seconds"]
    return result


def canonical_json(report: PruneReport, include_timing: bool = False) -> str:
    return json.dumps(
        report_to_dict(report, include_timing),
        sort_keys=True,
        separators=(",", ":"),
        allow_nan=False,
    )


def format_ppl(result: PerplexityResult | None) -> str:
    """6 significant digits, "inf" for infinite and "nan" for unavailable."""
    if result is None:
        return "nan"
    return str(result)


def _first_ppl(report: PruneReport, key: str) -> PerplexityResult | None:
    for values in report.perplexity.values():
        return values[key]
    return None


def summary_row(report: PruneReport) -> dict[str, str]:
    allocation = report.allocation

    def num(value: float | None) -> str:
        return "nan" if value is None else f"{value:.6g}"

    return {
        "status": report.status,
        "target_sparsity": num(report.config.target_sparsity),
        "achieved_sparsity": num(report.achieved_sparsity),
        "predicted_sparsity": num(
            allocation.predicted_achieved_sparsity if allocation else None
        ),
        "alpha": num(report.config.alpha),
        "kv_heads_removed": str(allocation.n_kv_heads_to_remove) if allocation else "nan",
        "ffn_keep_per_layer": str(allocation.keep_per_layer) if allocation else "nan",
        "ppl_before": format_ppl(_first_ppl(report, "before")),
        "ppl_after": format_ppl(_first_ppl(report, "after")),
    }


def summary_csv(report: PruneReport) -> str:
    """
    Returns:
        Header line and one data row
    """
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerow(summary_row(report))
    return out.getvalue()


def ablation_csv(rows: typing.Iterable[AblationRow]) -> str:
    """
    Returns:
        "variant,sparsity,seed,achieved,ppl" header followed by one line per row. Failed
        runs carry "nan" in the achieved and ppl columns.
    """
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(ABLATION_COLUMNS)
    for row in rows:
        writer.writerow(
            [
                row.variant,
                f"{row.sparsity:g}",
                row.seed,
                "nan" if row.achieved is None else f"{row.achieved:.6g}",
                format_ppl(row.ppl),
            ]
        )
    return out.getvalue()
