"""Paper-style tables and curves rendered from a results store.

CSV is the normative output; markdown mirrors it and ``svg-plot`` adds
matplotlib figures next to the delimited files. Report bytes are a pure
function of the store contents: rows are sorted, floats use a fixed format,
and figures carry no timestamps or salted ids.
"""

from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import ConfigError, EmptyReportError
from .grid import ResultsStore, aggregate
from .metrics import ProbeCurve

plt.rcParams["svg.hashsalt"] = "shiftbench"

REPORT_KINDS = (
    "arch-robustness-table",
    "fraction-curves",
    "probe-curve",
    "pretrain-table",
    "source-vs-target-curves",
)
OUTPUT_FORMATS = ("csv", "markdown", "svg-plot")


@dataclass
class ReportSpec:
    store_path: str
    kind: str
    output_format: str = "csv"
    out_dir: str = "."
    probe_csv: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in REPORT_KINDS:
            raise ConfigError(f"unknown report kind {self.kind!r}; known: {REPORT_KINDS}")
        if self.output_format not in OUTPUT_FORMATS:
            raise ConfigError(
                f"unknown output format {self.output_format!r}; known: {OUTPUT_FORMATS}"
            )


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(row[h]) for h in header))
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def _write_markdown(path, header, rows, title):
    lines = [f"# {title}", "", "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for row in rows:
        lines.append("| " + " | ".join(_fmt(row[h]) for h in header) + " |")
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def _save_figure(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)


def _completed_with_axes(store_path):
    records = ResultsStore(store_path).load()
    return [r for r in records if r.get("status") == "completed" and "axes" in r]


def _group_mean(records, keys, metric_fields=("lambda_t", "lambda_s", "sigma_st")):
    groups = {}
    for rec in records:
        key = tuple(rec["axes"].get(k) for k in keys)
        groups.setdefault(key, []).append(rec["metrics"])
    rows = []
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        metrics = groups[key]
        row = dict(zip(keys, key))
        row["n_runs"] = len(metrics)
        for name in metric_fields:
            values = [m[name] for m in metrics if m.get(name) is not None]
            row[f"{name}_mean"] = sum(values) / len(values) if values else None
            if len(values) > 1:
                mean = row[f"{name}_mean"]
                row[f"{name}_std"] = (sum((v - mean) ** 2 for v in values) / (len(values) - 1)) ** 0.5
            else:
                row[f"{name}_std"] = 0.0 if values else None
        rows.append(row)
    return rows


def _arch_table_rows(records):
    rows = _group_mean(records, ("arch", "method"))
    out = []
    for row in rows:
        lam_s, lam_t = row["lambda_s_mean"], row["lambda_t_mean"]
        sigma = 100.0 * (lam_s - lam_t) / lam_s if lam_s else None
        entry = {
            "arch": row["arch"],
            "method": row["method"],
            "lambda_s": lam_s,
            "lambda_t": lam_t,
            "sigma_st": sigma,
            "abs_drop": lam_s - lam_t,
            "n_runs": row["n_runs"],
        }
        # self-consistency: the sigma column must satisfy the metric formula
        # against this table's own lambda columns
        if sigma is not None:
            assert abs(sigma - 100.0 * (entry["lambda_s"] - entry["lambda_t"]) / entry["lambda_s"]) < 1e-9
        out.append(entry)
    return out


def _fraction_rows(records):
    rows = _group_mean(records, ("method", "target_fraction"))
    return [
        {
            "method": r["method"],
            "fraction": r["target_fraction"],
            "lambda_t_mean": r["lambda_t_mean"],
            "lambda_t_std": r["lambda_t_std"],
            "lambda_s_mean": r["lambda_s_mean"],
            "n_runs": r["n_runs"],
        }
        for r in rows
    ]


def saturation_statistic(fraction_rows, low=0.25, high=1.0):
    """Per-method accuracy delta between the high- and low-fraction points:
    lambda_t(high) - lambda_t(low)."""
    by_method = {}
    for row in fraction_rows:
        by_method.setdefault(row["method"], {})[row["fraction"]] = row["lambda_t_mean"]
    out = []
    for method in sorted(by_method):
        points = by_method[method]
        if low in points and high in points:
            out.append(
                {
                    "method": method,
                    f"lambda_t_at_{_fmt(low)}": points[low],
                    f"lambda_t_at_{_fmt(high)}": points[high],
                    "saturation_delta": points[high] - points[low],
                }
            )
    return out


def _fraction_figure(rows):
    fig, ax = plt.subplots(figsize=(5.5, 4))
    methods = sorted({r["method"] for r in rows})
    for method in methods:
        pts = sorted((r["fraction"], r["lambda_t_mean"], r["lambda_t_std"]) for r in rows if r["method"] == method)
        ax.errorbar(
            [p[0] for p in pts],
            [p[1] for p in pts],
            yerr=[p[2] or 0.0 for p in pts],
            marker="o",
            capsize=3,
            label=method,
        )
    ax.set_xlabel("target data fraction")
    ax.set_ylabel("target accuracy (%)")
    ax.set_xscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def _arch_figure(rows):
    fig, ax = plt.subplots(figsize=(5.5, 4))
    archs = sorted({r["arch"] for r in rows})
    methods = sorted({r["method"] for r in rows})
    width = 0.8 / max(1, len(methods))
    for j, method in enumerate(methods):
        xs, heights = [], []
        for i, arch in enumerate(archs):
            match = [r for r in rows if r["arch"] == arch and r["method"] == method]
            if match:
                xs.append(i + j * width)
                heights.append(match[0]["sigma_st"] or 0.0)
        ax.bar(xs, heights, width=width, label=method)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(archs))])
    ax.set_xticklabels(archs, fontsize=8)
    ax.set_ylabel("relative drop (%)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def _probe_figure(curves):
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for curve in curves:
        ax.plot(curve.fractions, curve.discriminator_accuracy, marker="o", label=f"seed {curve.seed}")
    ax.set_xlabel("target data fraction")
    ax.set_ylabel("domain classifier accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def _source_target_rows(records):
    rows = []
    source_side = [r for r in records if r["axes"].get("target_fraction") == 1.0]
    target_side = [r for r in records if r["axes"].get("source_fraction") == 1.0]
    for axis, subset, frac_key in (
        ("source", source_side, "source_fraction"),
        ("target", target_side, "target_fraction"),
    ):
        for row in _group_mean(subset, ("method", frac_key)):
            rows.append(
                {
                    "axis": axis,
                    "method": row["method"],
                    "fraction": row[frac_key],
                    "lambda_t_mean": row["lambda_t_mean"],
                    "lambda_t_std": row["lambda_t_std"],
                    "n_runs": row["n_runs"],
                }
            )
    rows.sort(key=lambda r: (r["axis"], r["method"], r["fraction"]))
    return rows


def _source_target_figure(rows):
    fig, axes = plt.subplots(1, 2, figsize=(9, 4), sharey=True)
    for ax, axis_name in zip(axes, ("source", "target")):
        side = [r for r in rows if r["axis"] == axis_name]
        for method in sorted({r["method"] for r in side}):
            pts = sorted((r["fraction"], r["lambda_t_mean"]) for r in side if r["method"] == method)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=method)
        ax.set_title(f"varying {axis_name} data")
        ax.set_xlabel(f"{axis_name} fraction")
        ax.set_xscale("log")
        ax.grid(True, alpha=0.3)
    axes[0].set_ylabel("target accuracy (%)")
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    return fig


def emit_report(spec):
    """Render one report kind; returns the list of written paths."""
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    want_md = spec.output_format == "markdown"
    want_svg = spec.output_format == "svg-plot"
    written = []

    if spec.kind == "probe-curve":
        paths = spec.probe_csv or []
        if not paths:
            raise EmptyReportError("probe-curve needs at least one probe CSV")
        curves = [ProbeCurve.from_csv(p) for p in paths]
        rows = [
            {"seed": c.seed, "fraction": f, "accuracy": a}
            for c in sorted(curves, key=lambda c: c.seed)
            for f, a in zip(c.fractions, c.discriminator_accuracy)
        ]
        header = ["seed", "fraction", "accuracy"]
        written.append(_write_csv(out_dir / "probe_curve.csv", header, rows))
        if want_md:
            written.append(_write_markdown(out_dir / "probe_curve.md", header, rows, "Domain probe"))
        if want_svg:
            written.append(_save_figure(_probe_figure(curves), out_dir / "probe_curve.svg"))
        return written

    records = _completed_with_axes(spec.store_path)
    if not records:
        raise EmptyReportError(f"no completed records with axes in {spec.store_path}")

    if spec.kind == "arch-robustness-table":
        rows = _arch_table_rows(records)
        header = ["arch", "method", "lambda_s", "lambda_t", "sigma_st", "abs_drop", "n_runs"]
        written.append(_write_csv(out_dir / "arch_robustness.csv", header, rows))
        if want_md:
            written.append(
                _write_markdown(out_dir / "arch_robustness.md", header, rows, "Cross-domain robustness by architecture")
            )
        if want_svg:
            written.append(_save_figure(_arch_figure(rows), out_dir / "arch_robustness.svg"))
    elif spec.kind == "fraction-curves":
        rows = _fraction_rows(records)
        if not rows:
            raise EmptyReportError("no fraction-grouped records")
        header = ["method", "fraction", "lambda_t_mean", "lambda_t_std", "lambda_s_mean", "n_runs"]
        written.append(_write_csv(out_dir / "fraction_curves.csv", header, rows))
        sat = saturation_statistic(rows)
        if sat:
            sat_header = list(sat[0].keys())
            written.append(_write_csv(out_dir / "fraction_saturation.csv", sat_header, sat))
        if want_md:
            written.append(
                _write_markdown(out_dir / "fraction_curves.md", header, rows, "Target accuracy vs unlabeled data fraction")
            )
        if want_svg:
            written.append(_save_figure(_fraction_figure(rows), out_dir / "fraction_curves.svg"))
    elif spec.kind == "pretrain-table":
        rows = _group_mean(records, ("pretrain", "method"))
        table = [
            {
                "pretrain": r["pretrain"],
                "method": r["method"],
                "lambda_t_mean": r["lambda_t_mean"],
                "lambda_t_std": r["lambda_t_std"],
                "n_runs": r["n_runs"],
            }
            for r in rows
        ]
        header = ["pretrain", "method", "lambda_t_mean", "lambda_t_std", "n_runs"]
        written.append(_write_csv(out_dir / "pretrain_table.csv", header, table))
        if want_md:
            written.append(
                _write_markdown(out_dir / "pretrain_table.md", header, table, "Pretraining data vs downstream accuracy")
            )
    elif spec.kind == "source-vs-target-curves":
        rows = _source_target_rows(records)
        if not rows:
            raise EmptyReportError("no records on the source/target fraction axes")
        header = ["axis", "method", "fraction", "lambda_t_mean", "lambda_t_std", "n_runs"]
        written.append(_write_csv(out_dir / "source_vs_target.csv", header, rows))
        if want_md:
            written.append(
                _write_markdown(out_dir / "source_vs_target.md", header, rows, "Source labels vs target unlabeled data")
            )
        if want_svg:
            written.append(_save_figure(_source_target_figure(rows), out_dir / "source_vs_target.svg"))
    return written
