"""Plain-text SVG figures built from the files a sweep leaves behind."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from ..nn import ModelSpec, Model, load_checkpoint
from .runner import load_data_from_report
from .summary import group_key, load_reports, mean_std

PLOT_KINDS = ("accuracy-vs-ratio", "weight-trajectory", "decision-boundary")
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2",
           "#7f7f7f")


class PlotError(ValueError):
    pass


class _Canvas:
    """Maps data coordinates into a fixed plot area and collects SVG elements."""

    def __init__(self, xlim, ylim, width=640, height=420, margin=(60, 20, 30, 50)):
        self.w, self.h = width, height
        self.left, self.right, self.top, self.bottom = margin
        self.xlim, self.ylim = xlim, ylim
        self.items: list[str] = []

    def sx(self, x) -> float:
        lo, hi = self.xlim
        span = (hi - lo) or 1.0
        return self.left + (x - lo) / span * (self.w - self.left - self.right)

    def sy(self, y) -> float:
        lo, hi = self.ylim
        span = (hi - lo) or 1.0
        return self.h - self.bottom - (y - lo) / span * (self.h - self.top - self.bottom)

    def add(self, element: str) -> None:
        self.items.append(element)

    def polyline(self, xs, ys, color, width=1.5, dash=None) -> None:
        pts = " ".join(f"{self.sx(x):.2f},{self.sy(y):.2f}" for x, y in zip(xs, ys)
                       if np.isfinite(y))
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.add(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                 f'stroke-width="{width}"{extra}/>')

    def band(self, xs, lo, hi, color, opacity=0.2) -> None:
        pts = [f"{self.sx(x):.2f},{self.sy(y):.2f}" for x, y in zip(xs, hi)]
        pts += [f"{self.sx(x):.2f},{self.sy(y):.2f}" for x, y in zip(xs[::-1], lo[::-1])]
        self.add(f'<polygon points="{" ".join(pts)}" fill="{color}" '
                 f'fill-opacity="{opacity}" stroke="none"/>')

    def text(self, x, y, s, size=12, anchor="start", rotate=None) -> None:
        tr = f' transform="rotate({rotate} {x:.1f} {y:.1f})"' if rotate else ""
        self.add(f'<text x="{x:.1f}" y="{y:.1f}" font-size="{size}" '
                 f'font-family="sans-serif" text-anchor="{anchor}"{tr}>{escape(str(s))}</text>')

    def axes(self, title, xlabel, ylabel, nticks=5) -> None:
        x0, x1 = self.sx(self.xlim[0]), self.sx(self.xlim[1])
        y0, y1 = self.sy(self.ylim[0]), self.sy(self.ylim[1])
        self.add(f'<rect x="{x0:.1f}" y="{y1:.1f}" width="{x1 - x0:.1f}" '
                 f'height="{y0 - y1:.1f}" fill="none" stroke="#333"/>')
        for t in np.linspace(*self.xlim, nticks):
            self.text(self.sx(t), y0 + 16, f"{t:.3g}", 11, "middle")
        for t in np.linspace(*self.ylim, nticks):
            self.text(x0 - 6, self.sy(t) + 4, f"{t:.3g}", 11, "end")
        self.text(self.w / 2, 18, title, 14, "middle")
        self.text((x0 + x1) / 2, self.h - 10, xlabel, 12, "middle")
        self.text(16, (y0 + y1) / 2, ylabel, 12, "middle", rotate=-90)

    def legend(self, entries) -> None:
        for i, (label, color) in enumerate(entries):
            y = self.top + 14 + 16 * i
            x = self.w - self.right - 200
            self.add(f'<rect x="{x:.1f}" y="{y - 9:.1f}" width="12" height="10" fill="{color}"/>')
            self.text(x + 18, y, label, 11)

    def render(self) -> str:
        body = "\n".join(self.items)
        return (f'<?xml version="1.0" encoding="UTF-8"?>\n'
                f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.w}" height="{self.h}" '
                f'viewBox="0 0 {self.w} {self.h}">\n'
                f'<rect width="100%" height="100%" fill="white"/>\n{body}\n</svg>\n')


def _completed(reports: list[dict]) -> list[dict]:
    done = [r for r in reports if r.get("status") == "completed"]
    if not done:
        raise PlotError("no completed reports to plot")
    return done


def _label(key: tuple) -> str:
    mode, norm = key[0], key[1]
    extra = " ".join(f"{k}={json.loads(v)}" for k, v in key[-1])
    return f"{mode} ({norm})" + (f" {extra}" if extra else "")


def accuracy_vs_ratio(reports: list[dict], metric: str = "test_acc") -> str:
    """One curve per run mode over OOD ratio, with a mean ± std band."""
    curves: dict[tuple, dict[float, list[float]]] = {}
    for rep in _completed(reports):
        ratio = rep["config"].get("data", {}).get("ood_ratio")
        if ratio is None:
            raise PlotError("reports lack the column 'ood_ratio'")
        value = rep.get("final", {}).get(metric)
        if value is None:
            raise PlotError(f"reports lack the column {metric!r}")
        key = group_key(rep)
        curve_key = key[:2] + key[4:]
        curves.setdefault(curve_key, {}).setdefault(float(ratio), []).append(float(value))
    all_ratios = sorted({r for c in curves.values() for r in c})
    xlim = (min(all_ratios), max(all_ratios)) if len(all_ratios) > 1 else (0.0, 1.0)
    cv = _Canvas(xlim, (0.0, 1.0))
    cv.axes(f"{metric} vs OOD ratio", "OOD ratio", metric)
    legend = []
    for i, (key, pts) in enumerate(sorted(curves.items(), key=lambda kv: str(kv[0]))):
        color = PALETTE[i % len(PALETTE)]
        xs = np.array(sorted(pts))
        stats = [mean_std(pts[x]) for x in xs]
        mean = np.array([m for m, _ in stats])
        std = np.array([s or 0.0 for _, s in stats])
        cv.band(xs, np.clip(mean - std, 0, 1), np.clip(mean + std, 0, 1), color)
        cv.polyline(xs, mean, color, 2.0)
        for x, m in zip(xs, mean):
            cv.add(f'<circle cx="{cv.sx(x):.2f}" cy="{cv.sy(m):.2f}" r="3" fill="{color}"/>')
        legend.append((_label(key), color))
    cv.legend(legend)
    return cv.render()


def read_metrics(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise PlotError(f"{path}: no metric rows")
    out = {}
    for col in rows[0]:
        out[col] = np.array([float(r[col]) if r[col] not in ("", "nan") else np.nan
                             for r in rows])
    return out


def weight_trajectory(metrics: dict[str, np.ndarray], title: str = "weights") -> str:
    """Mean ID and mean OOD weight against iteration."""
    for col in ("iteration", "mean_id_weight", "mean_ood_weight"):
        if col not in metrics or not np.isfinite(metrics[col]).any():
            raise PlotError(f"metrics lack the column {col!r}")
    it = metrics["iteration"]
    cv = _Canvas((float(it.min()), float(max(it.max(), it.min() + 1))), (0.0, 1.05))
    cv.axes(title, "iteration", "mean weight")
    cv.polyline(it, metrics["mean_id_weight"], PALETTE[0], 2.0)
    cv.polyline(it, metrics["mean_ood_weight"], PALETTE[1], 2.0)
    cv.legend([("mean ID weight", PALETTE[0]), ("mean OOD weight", PALETTE[1])])
    return cv.render()


def _spec_from_config(model_cfg: dict) -> ModelSpec:
    return ModelSpec(tuple(model_cfg["layer_widths"]), model_cfg["norm_mode"],
                     model_cfg["activation"], model_cfg["seed"], model_cfg["momentum"],
                     model_cfg["epsilon"])


def decision_boundary(report: dict, cell_dir: str | Path, resolution: int = 60) -> str:
    """Eval-mode argmax over a grid, drawn beneath the training points."""
    ds = load_data_from_report(report)
    if ds.dim != 2:
        raise PlotError(f"decision-boundary plots need 2-D data, got {ds.dim}-D")
    ckpt = Path(cell_dir) / "model.json"
    if not ckpt.is_file():
        raise PlotError(f"{cell_dir}: missing model.json")
    spec = _spec_from_config(report["config"]["model"])
    params = load_checkpoint(spec, ckpt)
    model = Model(spec, params.norms)
    pts = np.vstack([ds.x_labeled, ds.x_unlabeled, ds.x_test])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    gx, gy = np.linspace(lo[0], hi[0], resolution), np.linspace(lo[1], hi[1], resolution)
    grid = np.array([[x, y] for y in gy for x in gx])
    pred = model.predict(params.theta, grid).reshape(resolution, resolution)
    cv = _Canvas((lo[0], hi[0]), (lo[1], hi[1]), 560, 560)
    dx, dy = (hi[0] - lo[0]) / (resolution - 1), (hi[1] - lo[1]) / (resolution - 1)
    wpx, hpx = abs(cv.sx(dx) - cv.sx(0)), abs(cv.sy(0) - cv.sy(dy))
    for j, y in enumerate(gy):
        for i, x in enumerate(gx):
            color = PALETTE[int(pred[j, i]) % len(PALETTE)]
            cv.add(f'<rect x="{cv.sx(x) - wpx / 2:.2f}" y="{cv.sy(y) - hpx / 2:.2f}" '
                   f'width="{wpx + 0.3:.2f}" height="{hpx + 0.3:.2f}" fill="{color}" '
                   f'fill-opacity="0.18"/>')
    ood = ds.ood_mask
    for x in ds.x_unlabeled[~ood]:
        cv.add(f'<circle cx="{cv.sx(x[0]):.2f}" cy="{cv.sy(x[1]):.2f}" r="1.6" fill="#555"/>')
    for x in ds.x_unlabeled[ood]:
        cv.add(f'<circle cx="{cv.sx(x[0]):.2f}" cy="{cv.sy(x[1]):.2f}" r="1.6" fill="#000" '
               f'fill-opacity="0.6"/>')
    for x, y in zip(ds.x_labeled, ds.y_labeled):
        cv.add(f'<circle cx="{cv.sx(x[0]):.2f}" cy="{cv.sy(x[1]):.2f}" r="5" '
               f'fill="{PALETTE[int(y) % len(PALETTE)]}" stroke="black"/>')
    cfg = report["config"]
    acc = report.get("final", {}).get("test_acc")
    acc_s = f" acc {acc:.3f}" if acc is not None else ""
    cv.axes(f"{cfg['run_mode']} seed {cfg['seed']}{acc_s}", "x0", "x1")
    return cv.render()


def _slug(key: tuple) -> str:
    parts = [str(p) for p in key[:4]] + [f"{k}-{json.loads(v)}" for k, v in key[-1]]
    return "_".join(parts).replace("/", "-").replace(" ", "").replace(",", "-")


def make_plots(output_dir: str | Path, kind: str) -> list[Path]:
    """Write the SVG files for ``kind`` under ``<output_dir>/plots`` and return their paths."""
    if kind not in PLOT_KINDS:
        raise PlotError(f"unknown plot kind {kind!r} (choose from {', '.join(PLOT_KINDS)})")
    out_dir = Path(output_dir)
    reports = _completed(load_reports(out_dir))
    plot_dir = out_dir / "plots"
    plot_dir.mkdir(exist_ok=True)
    written = []
    if kind == "accuracy-vs-ratio":
        path = plot_dir / "accuracy-vs-ratio.svg"
        path.write_text(accuracy_vs_ratio(reports))
        return [path]
    groups: dict[tuple, list[dict]] = {}
    for rep in reports:
        groups.setdefault(group_key(rep), []).append(rep)
    for key, reps in sorted(groups.items(), key=lambda kv: str(kv[0])):
        reps = sorted(reps, key=lambda r: r["config"]["seed"])
        if kind == "weight-trajectory":
            series = [read_metrics(Path(r["_dir"]) / "metrics.csv") for r in reps]
            missing = [c for c in ("mean_id_weight", "mean_ood_weight")
                       if not all(np.isfinite(s.get(c, np.array([np.nan]))).any()
                                  for s in series)]
            if missing:
                continue
            n = min(len(s["iteration"]) for s in series)
            merged = {"iteration": series[0]["iteration"][:n]}
            for c in ("mean_id_weight", "mean_ood_weight"):
                merged[c] = np.mean([s[c][:n] for s in series], axis=0)
            svg = weight_trajectory(merged, f"{_label(key)} ratio {key[3]} ({len(reps)} seeds)")
        else:
            svg = decision_boundary(reps[0], reps[0]["_dir"])
        path = plot_dir / f"{kind}_{_slug(key)}.svg"
        path.write_text(svg)
        written.append(path)
    if not written:
        raise PlotError("no report has the columns 'mean_id_weight' and 'mean_ood_weight'")
    return written


__all__ = ["PLOT_KINDS", "PlotError", "accuracy_vs_ratio", "weight_trajectory",
           "decision_boundary", "make_plots", "read_metrics"]
