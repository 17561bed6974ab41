"""Render comparison tables from a results store.

Two shapes are emitted, each as CSV (full precision, machine-readable) and
markdown (display cells):

* a heatmap-style table of metric differences against the baseline - one
  row per single-layer strategy and scope with one column per layer, plus
  a block for the strategies that use every layer;
* a pruning trade-off table - one row per model depth with mean epoch
  time, speed-up factor, and the accuracy/F1 deltas.

Display conventions: differences are percentage points with one decimal, a
trailing ``*`` in the heatmap marks statistical significance (p < 0.05),
bold marks significant improvements in the pruning table where ``*`` marks
statistically insignificant losses instead, and a bracketed letter tags a
non-negligible A12 effect size. Emission is deterministic: an unchanged
store always produces byte-identical files.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .combiner import CombinationSpec
from .errors import ReportError
from .grid import ResultsStore
from .stats import ComparisonResult, compare_to_baseline, speedup
from .trainer import RunResult

METRICS = ("accuracy", "f1w")

_SINGLE_LAYER_ORDER = ("ii", "v", "ix")
_MULTI_LAYER_ORDER = ("iii", "iv", "vi", "vii", "viii", "x", "xi")
_SCOPE_ORDER = ("all", "code")
_MAGNITUDE_TAG = {"large": "L", "medium": "M", "small": "S"}


def format_mmss(seconds: float) -> str:
    total = int(round(seconds))
    return f"{total // 60}:{total % 60:02d}"


def format_speedup(factor: float) -> str:
    return f"{factor:.1f}x"


def metric_value(result: RunResult, metric: str) -> float:
    if metric == "accuracy":
        return result.test_accuracy
    if metric == "f1w":
        return result.test_f1w
    raise ReportError(f"unknown metric {metric!r} (use one of {METRICS})")


def _diff_display(diff: float, significant: bool, magnitude: str) -> str:
    cell = f"{diff * 100:+.1f}"
    if significant:
        cell += "*"
    tag = _MAGNITUDE_TAG.get(magnitude)
    if tag:
        cell += f" [{tag}]"
    return cell


@dataclass
class ReportTable:
    """One emitted table in both serialisations."""

    csv_text: str
    md_text: str

    def write(self, csv_path: str | Path, md_path: str | Path) -> None:
        Path(csv_path).write_text(self.csv_text, encoding="utf-8")
        Path(md_path).write_text(self.md_text, encoding="utf-8")


class _StoreView:
    """Grouped results plus the baseline metric vectors."""

    def __init__(self, store: ResultsStore):
        self.config = store.config()
        self.seeds = self.config.train.seeds
        self.by_spec: dict[str, dict[int, RunResult]] = {}
        for spec in self.config.specs:
            runs = {}
            for seed in self.seeds:
                result = store.try_load(spec, seed)
                if result is not None:
                    runs[seed] = result
            self.by_spec[str(spec)] = runs
        baseline = self.by_spec.get("i", {})
        missing = [s for s in self.seeds if s not in baseline]
        if missing:
            raise ReportError(
                f"baseline (i) runs missing for seeds {missing}; cannot compare"
            )
        self.baseline = baseline

    def complete(self, spec_text: str) -> bool:
        return set(self.by_spec.get(spec_text, {})) == set(self.seeds)

    def compare(self, spec_text: str, metric: str) -> ComparisonResult:
        base = {s: metric_value(r, metric) for s, r in self.baseline.items()}
        cand = {s: metric_value(r, metric) for s, r in self.by_spec[spec_text].items()}
        return compare_to_baseline(base, cand)

    def mean_epoch_seconds(self, spec_text: str) -> float:
        runs = self.by_spec[spec_text].values()
        return float(np.mean([r.mean_epoch_seconds() for r in runs]))


def _csv_line(*fields) -> str:
    return ",".join(str(f) for f in fields)


def _comparison_csv_fields(cmp: ComparisonResult | None):
    if cmp is None:
        return ("", "", "", "", "")
    return (
        f"{cmp.mean_diff:.12g}",
        f"{cmp.p_value:.12g}",
        str(cmp.significant).lower(),
        f"{cmp.a12:.12g}",
        cmp.magnitude,
    )


def emit_heatmap_report(store: ResultsStore, metric: str) -> ReportTable:
    """Differences vs the baseline for strategies (i)-(xi), Figure-style."""
    if metric not in METRICS:
        raise ReportError(f"unknown metric {metric!r} (use one of {METRICS})")
    view = _StoreView(store)
    num_layers = view.config.model.num_layers
    configured = {str(s) for s in view.config.specs}

    # rows: (label, list of (column label, spec text or None))
    single_rows: list[tuple[str, list[tuple[str, str | None]]]] = []
    for strategy in _SINGLE_LAYER_ORDER:
        scopes = [None] if strategy == "ii" else list(_SCOPE_ORDER)
        for scope in scopes:
            cells = []
            found = False
            for layer in range(1, num_layers + 1):
                spec = CombinationSpec(
                    strategy, layer=layer,
                    scope=scope if scope is not None else "all",
                )
                text = str(spec)
                if text in configured:
                    cells.append((f"l={layer}", text))
                    found = True
                elif strategy == "ii" and layer == num_layers:
                    cells.append((f"l={layer}", "i"))  # the baseline position
                else:
                    cells.append((f"l={layer}", None))
            if found:
                label = strategy if scope is None else f"{strategy}:{scope}"
                single_rows.append((label, cells))

    multi_rows: list[tuple[str, str]] = []
    for strategy in _MULTI_LAYER_ORDER:
        for scope in _SCOPE_ORDER:
            try:
                spec = CombinationSpec(strategy, scope=scope)
            except Exception:
                continue
            text = str(spec)
            if text in configured:
                multi_rows.append((str(spec), text))

    csv_lines = [_csv_line(
        "block", "row", "column", "spec", "status", "mean_diff",
        "p_value", "significant", "a12", "magnitude", "display",
    )]
    md = [f"# Metric difference vs baseline ({metric})", ""]
    md.append("Cells are candidate-minus-baseline in percentage points; `*` marks")
    md.append("p < 0.05 (Wilcoxon signed-rank); `[L]/[M]/[S]` tag the A12 effect size.")
    md.append("")

    def cell_for(text: str | None, row: str, column: str, block: str) -> str:
        if text is None:
            csv_lines.append(_csv_line(block, row, column, "", "absent",
                                       *_comparison_csv_fields(None), ""))
            return ""
        if text == "i":
            csv_lines.append(_csv_line(block, row, column, "i", "baseline",
                                       *_comparison_csv_fields(None), "bsln"))
            return "bsln"
        if not view.complete(text):
            csv_lines.append(_csv_line(block, row, column, text, "missing",
                                       *_comparison_csv_fields(None), "—"))
            return "—"
        cmp = view.compare(text, metric)
        display = _diff_display(cmp.mean_diff, cmp.significant, cmp.magnitude)
        csv_lines.append(_csv_line(block, row, column, text, "ok",
                                   *_comparison_csv_fields(cmp), display))
        return display

    if single_rows:
        md.append("## Single-layer strategies")
        md.append("")
        header = ["strategy"] + [f"l={l}" for l in range(1, num_layers + 1)]
        md.append("| " + " | ".join(header) + " |")
        md.append("|" + "---|" * len(header))
        for label, cells in single_rows:
            rendered = [cell_for(text, label, column, "single_layer")
                        for column, text in cells]
            md.append("| " + " | ".join([label] + rendered) + " |")
        md.append("")

    if multi_rows:
        md.append("## Strategies over all layers")
        md.append("")
        md.append("| strategy | vs baseline |")
        md.append("|---|---|")
        for label, text in multi_rows:
            md.append(f"| {label} | {cell_for(text, label, 'value', 'multi_layer')} |")
        md.append("")

    return ReportTable(csv_text="\n".join(csv_lines) + "\n",
                       md_text="\n".join(md) + "\n")


def emit_pruning_table(store: ResultsStore) -> ReportTable:
    """Depth vs time/speed-up/metric-delta table for the pruned models.

    Significant improvements come out bold; statistically insignificant
    losses are marked with ``*``; bracketed letters tag the A12 magnitude.
    Missing depths stay in the table flagged as gaps.
    """
    view = _StoreView(store)
    num_layers = view.config.model.num_layers
    pruned = {
        s.layer: str(s) for s in view.config.specs if s.strategy == "xii"
    }
    if not pruned:
        raise ReportError("no (xii) pruned-model specs in this store's config")

    base_time = view.mean_epoch_seconds("i")

    csv_lines = [_csv_line(
        "layers", "status", "mean_epoch_seconds", "time", "speedup",
        "acc_mean_diff", "acc_p_value", "acc_significant", "acc_a12", "acc_magnitude",
        "f1w_mean_diff", "f1w_p_value", "f1w_significant", "f1w_a12", "f1w_magnitude",
        "acc_display", "f1w_display",
    )]
    md = [
        "# Pruned models vs the full-depth baseline",
        "",
        "Time is the mean one-epoch fine-tuning wall clock. Deltas are",
        "percentage points; **bold** marks statistically significant",
        "improvements, `*` marks statistically insignificant losses, and",
        "`[L]/[M]/[S]` tag the A12 effect size.",
        "",
        "| l | Time | Speed-up | ΔAcc | ΔF1(w) |",
        "|---|---|---|---|---|",
    ]

    def pruning_cell(cmp: ComparisonResult) -> str:
        cell = f"{cmp.mean_diff * 100:+.1f}"
        if cmp.significant and cmp.mean_diff > 0:
            cell = f"**{cell}**"
        elif cmp.mean_diff < 0 and not cmp.significant:
            cell += "*"
        tag = _MAGNITUDE_TAG.get(cmp.magnitude)
        if tag:
            cell += f" [{tag}]"
        return cell

    for layers in range(num_layers, 0, -1):
        if layers == num_layers:
            time_str = format_mmss(base_time)
            csv_lines.append(_csv_line(
                layers, "baseline", f"{base_time:.12g}", time_str, "1.0x",
                *(["0", "1", "false", "0.5", "negligible"] * 2),
                "+0.0", "+0.0",
            ))
            md.append(f"| {layers} | {time_str} | 1.0x | +0.0 | +0.0 |")
            continue
        spec_text = pruned.get(layers)
        if spec_text is None or not view.complete(spec_text):
            status = "absent" if spec_text is None else "missing"
            csv_lines.append(_csv_line(
                layers, status, "", "", "",
                *(["", "", "", "", ""] * 2), "—", "—",
            ))
            md.append(f"| {layers} | — | — | — | — |")
            continue
        t = view.mean_epoch_seconds(spec_text)
        factor = speedup(base_time, t)
        acc_cmp = view.compare(spec_text, "accuracy")
        f1_cmp = view.compare(spec_text, "f1w")
        acc_cell = pruning_cell(acc_cmp)
        f1_cell = pruning_cell(f1_cmp)
        csv_lines.append(_csv_line(
            layers, "ok", f"{t:.12g}", format_mmss(t), format_speedup(factor),
            *_comparison_csv_fields(acc_cmp), *_comparison_csv_fields(f1_cmp),
            acc_cell, f1_cell,
        ))
        md.append(
            f"| {layers} | {format_mmss(t)} | {format_speedup(factor)} | "
            f"{acc_cell} | {f1_cell} |"
        )
    md.append("")
    return ReportTable(csv_text="\n".join(csv_lines) + "\n",
                       md_text="\n".join(md) + "\n")


def write_reports(store: ResultsStore, metric: str, out_prefix: str | Path) -> list[Path]:
    """Emit ``<prefix>_heatmap.csv/.md`` and ``<prefix>_pruning.csv/.md``."""
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    heatmap = emit_heatmap_report(store, metric)
    paths = [
        prefix.with_name(prefix.name + "_heatmap.csv"),
        prefix.with_name(prefix.name + "_heatmap.md"),
        prefix.with_name(prefix.name + "_pruning.csv"),
        prefix.with_name(prefix.name + "_pruning.md"),
    ]
    heatmap.write(paths[0], paths[1])
    pruning = emit_pruning_table(store)
    pruning.write(paths[2], paths[3])
    return paths
