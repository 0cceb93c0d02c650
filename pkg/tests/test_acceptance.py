"""Acceptance criteria, one test per criterion.

The training experiments run through the sweep harness, so cells shared
between criteria (the IFT runs at P=10, ratio 0.5) train once per session.
Set ROBUST_SSL_ACCEPTANCE_DIR to keep the run directories and resume an
interrupted session; otherwise they live in a pytest temp directory.
Runtime figures are the summed per-cell wall times, so they stay
meaningful when cells are resumed.

The full suite takes roughly half an hour on one CPU core.
"""
import os
from pathlib import Path

import numpy as np
import pytest

from robust_ssl.harness.config import parse_config
from robust_ssl.harness.runner import run_experiment
from robust_ssl.harness.summary import load_reports
from robust_ssl.oracles import (check_gradients, check_neumann, check_wbn, meta_ift_gap, neumann_error,
                                quadratic_bilevel_trace)

pytestmark = pytest.mark.acceptance

ROBUST_SEEDS = [0, 1]
BOUNDARY_ROBUST_SEEDS = [0]

BASE = {
    "eval_every": 50,
    "model": {"hidden": [32, 32], "norm_mode": "BN"},
    "loss": {"method": "vat", "vat_epsilon": 0.2},
    "bilevel": {"iterations": 1000, "alpha": 0.5, "beta": 0.1, "batch_unlabeled": 256},
}
META = {"run_modes": ["robust-meta"]}
IFT = {"run_modes": ["robust-ift"],
       "bilevel": {"inner_steps": 3, "neumann_order": 10, "neumann_scale": 0.02,
                   "divergence": "skip"}}


def _merge(*parts: dict) -> dict:
    out: dict = {}
    for part in parts:
        for key, val in part.items():
            if isinstance(val, dict):
                out[key] = {**out.get(key, {}), **val}
            else:
                out[key] = val
    return out


@pytest.fixture(scope="session")
def runs_root(tmp_path_factory) -> Path:
    env = os.environ.get("ROBUST_SSL_ACCEPTANCE_DIR")
    return Path(env) if env else tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def experiment(runs_root):
    """Run one config and return its completed reports (all in one shared directory)."""
    def _run(raw: dict) -> list[dict]:
        raw = _merge(raw, {"output_dir": str(runs_root), "workers": 0})
        cfg = parse_config(raw)
        outcomes = run_experiment(cfg)
        wanted = {o.fingerprint for o in outcomes}
        reports = [r for r in load_reports(runs_root) if r["fingerprint"] in wanted]
        failed = [r for r in reports if r["status"] != "completed"]
        assert not failed, failed[0]["error"]
        return reports
    return _run


def _acc(reports, **match) -> float:
    def ok(r):
        c = r["config"]
        flat = {"run_mode": c["run_mode"], "ood_ratio": c["data"]["ood_ratio"],
                "ood_kind": c["data"]["ood_kind"], "neumann_order": c["bilevel"]["neumann_order"]}
        return all(flat[k] == v for k, v in match.items())
    vals = [r["final"]["test_acc"] for r in reports if ok(r)]
    assert vals, f"no reports for {match}"
    return float(np.mean(vals))


def _minutes(reports) -> float:
    return sum(r["final"]["wall_time_seconds"] for r in reports) / 60


def test_c01_ssl_bn_collapses_under_faraway_ood(experiment, record):
    reports = experiment(_merge(BASE, {"name": "c1", "run_modes": ["baseline-ssl"],
                                       "seeds": list(range(10)),
                                       "sweep": {"data.ood_ratio": [0.5, 0.75]}}))
    a50, a75 = _acc(reports, ood_ratio=0.5), _acc(reports, ood_ratio=0.75)
    minutes = _minutes(reports)
    ok = a50 <= 0.70 and a75 <= 0.70 and minutes <= 5
    record("C1", ok, f"SSL-BN faraway: {100*a50:.1f}% @50%, {100*a75:.1f}% @75% "
                     f"(<= 70%), {minutes:.1f} min (<= 5)")
    assert ok


def test_c02_robust_runs_recover_under_faraway_ood(experiment, record):
    ratios = [0.25, 0.5, 0.75]
    common = _merge(BASE, {"model": {"norm_mode": "WBN"}, "seeds": ROBUST_SEEDS,
                           "sweep": {"data.ood_ratio": ratios}})
    meta = experiment(_merge(common, META, {"name": "c2-meta"}))
    ift = experiment(_merge(common, IFT, {"name": "c2-ift"}))
    accs = {(m, r): _acc(reps, ood_ratio=r) for m, reps in (("meta", meta), ("ift", ift))
            for r in ratios}
    minutes = _minutes(meta + ift)
    ok = min(accs.values()) >= 0.99 and minutes <= 15
    cells = ", ".join(f"{m}@{int(100*r)}%={100*a:.1f}" for (m, r), a in accs.items())
    record("C2", ok, f"robust faraway (>= 99%): {cells}; {minutes:.1f} min (<= 15)")
    assert ok


def test_c03_boundary_ood(experiment, record):
    ssl = experiment(_merge(BASE, {"name": "c3-ssl", "run_modes": ["baseline-ssl"],
                                   "model": {"norm_mode": "NBN"}, "seeds": list(range(10)),
                                   "data": {"ood_kind": "boundary"},
                                   "sweep": {"data.ood_ratio": [0.0, 0.75]}}))
    drop = _acc(ssl, ood_ratio=0.0) - _acc(ssl, ood_ratio=0.75)
    ratios = [0.0, 0.25, 0.5, 0.75]
    common = _merge(BASE, {"model": {"norm_mode": "WBN"}, "seeds": BOUNDARY_ROBUST_SEEDS,
                           "data": {"ood_kind": "boundary"},
                           "sweep": {"data.ood_ratio": ratios}})
    robust = (experiment(_merge(common, META, {"name": "c3-meta"}))
              + experiment(_merge(common, IFT, {"name": "c3-ift"})))
    accs = {(m, r): _acc(robust, run_mode=m, ood_ratio=r)
            for m in ("robust-meta", "robust-ift") for r in ratios}
    ok = drop >= 0.02 and min(accs.values()) >= 0.99
    cells = ", ".join(f"{m.split('-')[1]}@{int(100*r)}%={100*a:.1f}" for (m, r), a in accs.items())
    record("C3", ok, f"SSL-NBN drop 0%->75%: {100*drop:.1f} pts (>= 2); robust (>= 99%): {cells}")
    assert ok


def test_c04_supervised_only(experiment, record):
    reports = experiment(_merge(BASE, {"name": "c4", "run_modes": ["supervised-only"],
                                       "model": {"norm_mode": "NBN"},
                                       "seeds": list(range(10))}))
    acc = _acc(reports)
    ok = 0.80 <= acc <= 0.90
    record("C4", ok, f"supervised-only, 6 labels: {100*acc:.1f}% (in [80, 90])")
    assert ok


def test_c05_neumann_order(experiment, record):
    reports = experiment(_merge(BASE, IFT, {
        "name": "c5", "model": {"norm_mode": "WBN"}, "seeds": ROBUST_SEEDS,
        "data": {"ood_ratio": 0.5}, "sweep": {"bilevel.neumann_order": [1, 5, 10]}}))
    acc = {p: _acc(reports, neumann_order=p) for p in (1, 5, 10)}
    gain = acc[10] - acc[1]
    monotone = acc[5] >= acc[1] - 0.02 and acc[10] >= acc[5] - 0.02
    ok = gain >= 0.10 and monotone
    record("C5", ok, "IFT faraway @50%: " + ", ".join(f"P={p} {100*a:.1f}%" for p, a in acc.items())
           + f"; P10-P1 = {100*gain:.1f} pts (>= 10); monotone within 2 pts: {monotone}")
    assert ok


def test_c06_meta_equals_ift_order_zero(record):
    gaps = [meta_ift_gap(seed, ("NBN", "WBN")[seed % 2]) for seed in range(20)]
    worst = max(gaps)
    ok = worst <= 1e-8
    record("C6", ok, f"max |meta - ift(P=0)| over 20 states: {worst:.2e} (<= 1e-8)")
    assert ok


def test_c07_wbn_identities(record):
    results = [r for seed in range(5) for r in check_wbn(seed)]
    perfect = max(r.value for r in results if r.name.startswith("WBN perfect"))
    uniform = max(r.value for r in results if r.name.startswith("WBN uniform"))
    others = [r for r in results if not r.name.startswith(("WBN perfect", "WBN uniform"))]
    ok = all(r.passed for r in results)
    record("C7", ok, f"perfect-weight WBN vs BN(I) {perfect:.1e} (<= 1e-10), uniform WBN vs BN "
                     f"{uniform:.1e} (<= 1e-12), contamination checks hold: "
                     f"{all(r.passed for r in others)}")
    assert ok


def test_c08_gradient_and_neumann_oracles(record):
    grads = check_gradients(0) + check_gradients(1)
    worst = max(r.value for r in grads)
    neumann = max(neumann_error(0.4, 50, seed) for seed in range(5))
    injected = check_neumann(10.0)
    ok = all(r.passed for r in grads) and neumann <= 1e-4 and not all(r.passed for r in injected)
    record("C8", ok, f"{len(grads)} gradient checks, worst rel err {worst:.1e} (< 1e-5); "
                     f"Neumann P=50 vs solve {neumann:.1e} (<= 1e-4); s=10 divergence caught")
    assert ok


def test_c09_convergence_trend(record):
    trace = quadratic_bilevel_trace(400)
    ratio = float(np.minimum.accumulate(trace)[-1] / trace[0])
    ok = ratio < 0.10
    record("C9", ok, f"running-min |grad_w L_V|^2 after T=400: {ratio:.1e} of initial (< 0.1)")
    assert ok


def test_c10_not_reproducible_at_desk_scale(record):
    record("C10", True, "image benchmarks and baseline comparisons are out of scope; "
                        "criteria 6-9 stand in for them")
