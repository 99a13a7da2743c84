"""Report files: history CSVs, report JSON validation, and score/accuracy figures.

Figures are written as SVG through matplotlib's Agg backend with fixed ids and
no timestamps, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .world import GROUPS  # noqa: E402

REPORT_SCHEMA = "loce.report/1"

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "loce",
    "svg.fonttype": "path",
}
GROUP_COLORS = {"rare": "#c0392b", "common": "#e67e22", "frequent": "#2471a3"}


class ReportError(ValueError):
    pass


def provenance_line(provenance: dict) -> str:
    return "# " + " ".join(f"{k}={provenance[k]}" for k in sorted(provenance)) + "\n"


def write_csv(path, header, rows, provenance: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if provenance:
            fh.write(provenance_line(provenance))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_history(history, directory, provenance: dict) -> None:
    directory = Path(directory)
    if history.rows:
        header = list(history.rows[0])
        write_csv(directory / "history.csv", header, [[r[k] for k in header] for r in history.rows], provenance)
    else:
        write_csv(directory / "history.csv", ["stage", "epoch"], [], provenance)
    header = ["stage", "epoch", "class", "val_score", "val_accuracy", "tracked_score"]
    write_csv(
        directory / "history_per_class.csv", header,
        [[r[k] for k in header] for r in history.per_class], provenance,
    )


# --- report JSON ---------------------------------------------------------------------------


def load_report(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ReportError(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ReportError(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from exc
    validate_report(data, str(path))
    return data


def validate_report(data, where: str = "report") -> None:
    if not isinstance(data, dict) or data.get("schema") != REPORT_SCHEMA:
        raise ReportError(f"{where}: expected schema {REPORT_SCHEMA!r}")
    for key in ("provenance", "scalars", "per_group", "per_class"):
        if key not in data:
            raise ReportError(f"{where}: missing {key!r}")
    for i, row in enumerate(data["per_class"]):
        for key in ("class", "train_count", "group", "mean_score", "accuracy"):
            if key not in row:
                raise ReportError(f"{where}: per_class[{i}] missing {key!r}")
        if not (0.0 <= row["mean_score"] <= 1.0 and 0.0 <= row["accuracy"] <= 1.0):
            raise ReportError(f"{where}: per_class[{i}] values outside [0, 1]")
        if row["group"] not in GROUPS:
            raise ReportError(f"{where}: per_class[{i}] unknown group {row['group']!r}")
    for i, row in enumerate(data["per_group"]):
        if row.get("group") not in GROUPS or "accuracy" not in row:
            raise ReportError(f"{where}: per_group[{i}] malformed")


def sorted_per_class(report: dict) -> list[dict]:
    """Per-class rows from most to fewest train instances (ties by class id)."""
    return sorted(report["per_class"], key=lambda r: (-r["train_count"], r["class"]))


def report_label(report: dict, path, taken: set[str]) -> str:
    base = report["provenance"].get("variant") or Path(path).parent.name or Path(path).stem
    label, n = base, 2
    while label in taken:
        label = f"{base}-{n}"
        n += 1
    taken.add(label)
    return label


# --- figures -------------------------------------------------------------------------------


def _save(fig, path, provenance: dict) -> None:
    desc = " ".join(f"{k}={provenance[k]}" for k in sorted(provenance))
    fig.savefig(path, format="svg", metadata={"Date": None, "Description": desc})
    plt.close(fig)


def plot_score_rank(report: dict, path, title: str = "") -> None:
    """Mean score and accuracy per class, classes ordered by train count."""
    rows = sorted_per_class(report)
    ranks = range(1, len(rows) + 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.4, 3.2))
        colors = [GROUP_COLORS[r["group"]] for r in rows]
        ax.bar(ranks, [r["mean_score"] for r in rows], color=colors, alpha=0.55, width=0.8, label="mean score")
        ax.plot(ranks, [r["accuracy"] for r in rows], "k.-", lw=0.8, ms=3, label="accuracy")
        ax.set_xlabel("class rank by train count")
        ax.set_ylabel("val score / accuracy")
        ax.set_ylim(0, 1.02)
        ax.set_xlim(0.3, len(rows) + 0.7)
        for g in GROUPS:
            ax.bar([], [], color=GROUP_COLORS[g], alpha=0.55, label=g)
        ax.legend(loc="upper right", ncol=2, frameon=False)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        _save(fig, path, report["provenance"])


def plot_comparison(reports: list[tuple[str, dict]], path) -> None:
    """Per-class mean score of each run against class rank, plus per-group accuracy bars."""
    with plt.rc_context(STYLE):
        fig, (left, right) = plt.subplots(1, 2, figsize=(8.0, 3.0), gridspec_kw={"width_ratios": [2, 1]})
        for label, rep in reports:
            rows = sorted_per_class(rep)
            left.plot(range(1, len(rows) + 1), [r["mean_score"] for r in rows], lw=1.0, label=label)
        left.set_xlabel("class rank by train count")
        left.set_ylabel("val mean score")
        left.set_ylim(0, 1.02)
        left.legend(frameon=False)
        width = 0.8 / len(reports)
        for i, (label, rep) in enumerate(reports):
            acc = {row["group"]: row["accuracy"] for row in rep["per_group"]}
            xs = [j + i * width for j in range(len(GROUPS))]
            right.bar(xs, [acc.get(g, 0.0) for g in GROUPS], width=width, label=label)
        right.set_xticks([j + 0.4 - width / 2 for j in range(len(GROUPS))], GROUPS)
        right.set_ylabel("val accuracy")
        right.set_ylim(0, 1.02)
        fig.tight_layout()
        prov = {f"{label}.config_digest": rep["provenance"].get("config_digest", "") for label, rep in reports}
        _save(fig, path, prov)


# --- report command body -------------------------------------------------------------------


def render_reports(paths, out_dir) -> list[Path]:
    """Write per-report curves and figures, a per-group table and a cross-run comparison."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    taken: set[str] = set()
    loaded = []
    for p in paths:
        rep = load_report(p)
        loaded.append((report_label(rep, p, taken), rep))
    n_classes = {len(rep["per_class"]) for _, rep in loaded}
    if len(n_classes) > 1:
        raise ReportError(f"reports disagree on class count: {sorted(n_classes)}")
    written = []
    group_rows = []
    for label, rep in loaded:
        prov = rep["provenance"]
        rows = sorted_per_class(rep)
        curve = out_dir / f"{label}_per_class.csv"
        write_csv(
            curve, ["rank", "class", "train_count", "group", "mean_score", "accuracy"],
            [[i + 1, r["class"], r["train_count"], r["group"], r["mean_score"], r["accuracy"]]
             for i, r in enumerate(rows)],
            prov,
        )
        fig = out_dir / f"{label}_score_rank.svg"
        plot_score_rank(rep, fig, title=label)
        written += [curve, fig]
        for g in rep["per_group"]:
            group_rows.append([label, g["group"], g["accuracy"], g.get("mean_score", float("nan"))])
        s = rep["scalars"]
        group_rows.append([label, "balanced", s["balanced_accuracy"], float("nan")])
    groups_csv = out_dir / "groups.csv"
    write_csv(groups_csv, ["run", "group", "accuracy", "mean_score"], group_rows)
    written.append(groups_csv)
    if len(loaded) >= 2:
        base_label, base = loaded[0]
        base_acc = {g["group"]: g["accuracy"] for g in base["per_group"]}
        base_acc["balanced"] = base["scalars"]["balanced_accuracy"]
        comp = []
        for label, rep in loaded[1:]:
            acc = {g["group"]: g["accuracy"] for g in rep["per_group"]}
            acc["balanced"] = rep["scalars"]["balanced_accuracy"]
            for g in list(GROUPS) + ["balanced"]:
                if g in acc and g in base_acc:
                    comp.append([base_label, label, g, base_acc[g], acc[g], acc[g] - base_acc[g]])
            comp.append([
                base_label, label, "score_dispersion",
                base["scalars"]["score_dispersion"], rep["scalars"]["score_dispersion"],
                rep["scalars"]["score_dispersion"] - base["scalars"]["score_dispersion"],
            ])
        comparison = out_dir / "comparison.csv"
        write_csv(comparison, ["baseline", "run", "metric", "baseline_value", "run_value", "delta"], comp)
        fig = out_dir / "comparison.svg"
        plot_comparison(loaded, fig)
        written += [comparison, fig]
    return written
