"""Grouped mean and spread of test accuracy over seeds."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .runner import REPORT

KEY_FIELDS = ("run_mode", "norm", "ood_kind", "ood_ratio")
METRICS = ("test_acc", "best_val_test_acc")


def load_reports(output_dir: str | Path) -> list[dict]:
    """Every ``report.json`` one level below ``output_dir``, in path order."""
    out = []
    for path in sorted(Path(output_dir).glob(f"*/{REPORT}")):
        try:
            rep = json.loads(path.read_text())
        except json.JSONDecodeError:
            continue
        rep["_dir"] = str(path.parent)
        out.append(rep)
    return out


def group_key(report: dict) -> tuple:
    cfg = report.get("config", {})
    data = cfg.get("data", {})
    key = (cfg.get("run_mode"), cfg.get("model", {}).get("norm_mode"),
           data.get("ood_kind"), data.get("ood_ratio"))
    extra = tuple(sorted((k, json.dumps(v)) for k, v in report.get("sweep", {}).items()
                         if k not in ("data.ood_kind", "data.ood_ratio", "model.norm_mode")))
    return key + (extra,)


def mean_std(values) -> tuple[float, float | None]:
    """Mean and population std; the std is None below two values."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return float("nan"), None
    return float(arr.mean()), (float(arr.std()) if arr.size >= 2 else None)


@dataclass
class SummaryRow:
    key: tuple
    n: int
    failed: int
    stats: dict = field(default_factory=dict)  # metric -> (mean, std)
    seeds: list = field(default_factory=list)

    @property
    def extra(self) -> str:
        return " ".join(f"{k}={json.loads(v)}" for k, v in self.key[-1])


def summarize(reports: list[dict]) -> list[SummaryRow]:
    groups: dict[tuple, list[dict]] = {}
    for rep in reports:
        groups.setdefault(group_key(rep), []).append(rep)
    rows = []
    for key in sorted(groups, key=lambda k: json.dumps(k, default=str)):
        reps = groups[key]
        done = [r for r in reps if r.get("status") == "completed"]
        row = SummaryRow(key, len(done), len(reps) - len(done),
                         seeds=sorted(r["config"].get("seed") for r in done))
        for m in METRICS:
            vals = [r["final"][m] for r in done if r["final"].get(m) is not None]
            row.stats[m] = mean_std(vals)
        rows.append(row)
    return rows


def _pct(mean: float, std: float | None) -> str:
    if not np.isfinite(mean):
        return "n/a"
    s = "n/a" if std is None else f"{100 * std:.1f}"
    return f"{100 * mean:.1f} ± {s}"


def to_markdown(rows: list[SummaryRow]) -> str:
    head = ["run_mode", "norm", "ood_kind", "ood_ratio", "extra", "seeds", "failed",
            "test_acc (%)", "best_val_test_acc (%)"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in rows:
        cells = [str(v) for v in r.key[:4]] + [r.extra or "-", str(r.n), str(r.failed)]
        cells += [_pct(*r.stats[m]) for m in METRICS]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def to_csv(rows: list[SummaryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*KEY_FIELDS, "extra", "n_seeds", "n_failed",
                *[f"{m}_{s}" for m in METRICS for s in ("mean", "std")]])
    for r in rows:
        vals = []
        for m in METRICS:
            mean, std = r.stats[m]
            vals += [repr(mean) if np.isfinite(mean) else "n/a",
                     "n/a" if std is None else repr(std)]
        w.writerow([*r.key[:4], r.extra, r.n, r.failed, *vals])
    return buf.getvalue()


def write_summary(output_dir: str | Path) -> list[SummaryRow]:
    """Write ``summary.md`` and ``summary.csv`` into ``output_dir`` and return the rows."""
    rows = summarize(load_reports(output_dir))
    out = Path(output_dir)
    (out / "summary.md").write_text(to_markdown(rows))
    (out / "summary.csv").write_text(to_csv(rows))
    return rows


__all__ = ["load_reports", "summarize", "mean_std", "to_markdown", "to_csv", "write_summary",
           "SummaryRow", "group_key"]
