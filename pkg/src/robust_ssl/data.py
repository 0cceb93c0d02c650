"""Synthetic two-moons style datasets with injected out-of-distribution points."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

KINDS = ("two-moons", "blobs", "circles")
OOD_KINDS = ("faraway", "boundary", "noise", "none")
SPLITS = ("train", "val", "test")
PROVENANCES = ("id", "ood", "na")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "two-moons"
    n_labeled: int = 6
    n_unlabeled_id: int = 2000
    ood_kind: str = "faraway"
    ood_ratio: float = 0.5
    noise_sigma: float = 0.1
    seed: int = 0
    faraway_offset: tuple[float, float] = (8.0, 8.0)
    n_validation: int = 50
    n_test: int = 1000
    radius: float = 1.0
    labeled_placement: str = "spread"

    def __post_init__(self):
        object.__setattr__(self, "faraway_offset", tuple(float(v) for v in self.faraway_offset))
        if self.kind not in KINDS:
            raise DataError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.ood_kind not in OOD_KINDS:
            raise DataError(f"ood_kind must be one of {OOD_KINDS}, got {self.ood_kind!r}")
        if not 0.0 <= self.ood_ratio < 1.0:
            raise DataError(f"ood_ratio must lie in [0, 1), got {self.ood_ratio}")
        if self.n_labeled < 2 or self.n_labeled % 2:
            raise DataError("n_labeled must be a positive even number (balanced classes)")
        for name in ("n_unlabeled_id", "n_validation", "n_test"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be nonnegative")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be nonnegative")
        if self.labeled_placement not in ("spread", "random"):
            raise DataError("labeled_placement must be 'spread' or 'random'")

    @property
    def n_ood(self) -> int:
        if self.ood_kind == "none":
            return 0
        return int(round(self.ood_ratio / (1.0 - self.ood_ratio) * self.n_unlabeled_id))


@dataclass
class Dataset:
    """Labeled, unlabeled, validation and test splits.

    ``u_provenance`` (``"id"``/``"ood"``) and ``u_labels`` (hidden class of
    in-distribution unlabeled points, -1 otherwise) are for evaluation and
    data construction only; training code never reads them.
    """

    x_labeled: np.ndarray
    y_labeled: np.ndarray
    x_unlabeled: np.ndarray
    u_provenance: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    u_labels: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.u_labels is None:
            self.u_labels = np.full(len(self.x_unlabeled), -1, dtype=np.int64)

    @property
    def dim(self) -> int:
        return self.x_labeled.shape[1]

    @property
    def n_classes(self) -> int:
        return int(max(self.y_labeled.max(), self.y_test.max() if len(self.y_test) else 0)) + 1

    @property
    def ood_mask(self) -> np.ndarray:
        return self.u_provenance == "ood"

    def summary(self) -> dict:
        return {
            "n_labeled": int(len(self.x_labeled)),
            "n_unlabeled": int(len(self.x_unlabeled)),
            "n_unlabeled_ood": int(self.ood_mask.sum()),
            "n_validation": int(len(self.x_val)),
            "n_test": int(len(self.x_test)),
            "dim": int(self.dim),
            "ood_ratio": float(self.ood_mask.mean()) if len(self.x_unlabeled) else 0.0,
        }

    def equals(self, other: "Dataset") -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in (
            "x_labeled", "y_labeled", "x_unlabeled", "u_provenance",
            "x_val", "y_val", "x_test", "y_test"))


# base generators ----------------------------------------------------------


def moons_points(n_per_class: int, rng: np.random.Generator, sigma: float,
                 radius: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Two interleaving half circles; class 0 is the upper arc."""
    t0 = rng.uniform(0.0, np.pi, n_per_class)
    t1 = rng.uniform(0.0, np.pi, n_per_class)
    upper = np.column_stack([np.cos(t0), np.sin(t0)]) * radius
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)]) * radius
    x = np.vstack([upper, lower])
    y = np.repeat([0, 1], n_per_class)
    if sigma > 0:
        x = x + sigma * rng.standard_normal(x.shape)
    return x, y


def blobs_points(n_per_class, rng, sigma, radius=1.0):
    centers = np.array([[-1.0, 0.0], [1.0, 0.0]]) * radius
    x = np.vstack([c + max(sigma, 1e-12) * 3 * rng.standard_normal((n_per_class, 2))
                   for c in centers])
    return x, np.repeat([0, 1], n_per_class)


def circles_points(n_per_class, rng, sigma, radius=1.0):
    t0 = rng.uniform(0, 2 * np.pi, n_per_class)
    t1 = rng.uniform(0, 2 * np.pi, n_per_class)
    outer = np.column_stack([np.cos(t0), np.sin(t0)]) * radius
    inner = np.column_stack([np.cos(t1), np.sin(t1)]) * radius * 0.5
    x = np.vstack([outer, inner])
    if sigma > 0:
        x = x + sigma * rng.standard_normal(x.shape)
    return x, np.repeat([0, 1], n_per_class)


_GENERATORS = {"two-moons": moons_points, "blobs": blobs_points, "circles": circles_points}


def _draw(kind, n, rng, sigma, radius):
    """``n`` points with balanced classes (an odd extra goes to class 0)."""
    half = (n + 1) // 2
    x, y = _GENERATORS[kind](half, rng, sigma, radius)
    if 2 * half != n:
        keep = np.r_[np.arange(half), np.arange(half + 1, 2 * half)]
        x, y = x[keep], y[keep]
    return x, y


def spread_labeled(kind: str, n_per_class: int, radius: float = 1.0):
    """Noise-free labeled points evenly spaced along each class's shape."""
    q = (np.arange(n_per_class) + 0.5) / n_per_class
    if kind == "two-moons":
        t = np.pi * q
        a = np.column_stack([np.cos(t), np.sin(t)])
        b = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
    elif kind == "circles":
        t = 2 * np.pi * q
        a = np.column_stack([np.cos(t), np.sin(t)])
        b = 0.5 * a
    else:
        t = 2 * np.pi * q
        ring = 0.3 * np.column_stack([np.cos(t), np.sin(t)])
        a, b = ring + [-1.0, 0.0], ring + [1.0, 0.0]
    return np.vstack([a, b]) * radius, np.repeat([0, 1], n_per_class)


def make_base(spec: SyntheticSpec) -> Dataset:
    """The in-distribution splits, before any OOD injection."""
    rng = np.random.default_rng(spec.seed)
    draw = lambda n: _draw(spec.kind, n, rng, spec.noise_sigma, spec.radius)  # noqa: E731
    xl, yl = draw(spec.n_labeled)
    if spec.labeled_placement == "spread":
        xl, yl = spread_labeled(spec.kind, spec.n_labeled // 2, spec.radius)
    xu, yu = draw(spec.n_unlabeled_id)
    xv, yv = draw(spec.n_validation)
    xt, yt = draw(spec.n_test)
    perm = rng.permutation(len(xu))
    return Dataset(xl, yl, xu[perm], np.full(len(xu), "id", dtype=object), xv, yv, xt, yt,
                   u_labels=yu[perm].astype(np.int64))


def make_two_moons(spec: SyntheticSpec) -> Dataset:
    if spec.kind != "two-moons":
        spec = replace(spec, kind="two-moons")
    return make_dataset(spec)


# OOD injection ------------------------------------------------------------


def _ood_rng(spec: SyntheticSpec) -> np.random.Generator:
    return np.random.default_rng([spec.seed, 7919])


def _append(ds: Dataset, x_ood: np.ndarray, rng: np.random.Generator) -> Dataset:
    x = np.vstack([ds.x_unlabeled, x_ood])
    prov = np.concatenate([ds.u_provenance, np.full(len(x_ood), "ood", dtype=object)])
    ul = np.concatenate([ds.u_labels, np.full(len(x_ood), -1, dtype=np.int64)])
    perm = rng.permutation(len(x))
    return replace(ds, x_unlabeled=x[perm], u_provenance=prov[perm], u_labels=ul[perm])


def _id_points(ds: Dataset) -> np.ndarray:
    return ds.x_unlabeled[ds.u_provenance == "id"]


def inject_faraway_ood(ds: Dataset, spec: SyntheticSpec) -> Dataset:
    """A Gaussian blob (sigma 0.1) displaced by ``faraway_offset`` from the ID centroid."""
    xid = _id_points(ds)
    centroid = xid.mean(axis=0)
    offset = np.asarray(spec.faraway_offset, dtype=np.float64)
    if np.linalg.norm(offset) < 3.0 * spec.radius:
        raise DataError(f"faraway offset {tuple(offset)} lies within 3x the data radius "
                        f"({3.0 * spec.radius}) of the data centroid")
    rng = _ood_rng(spec)
    x_ood = centroid + offset + 0.1 * rng.standard_normal((spec.n_ood, xid.shape[1]))
    return _append(ds, x_ood, rng)


def inject_boundary_ood(ds: Dataset, spec: SyntheticSpec) -> Dataset:
    """Midpoints of uniformly drawn cross-class pairs of ID unlabeled points."""
    id_mask = ds.u_provenance == "id"
    labels = ds.u_labels[id_mask]
    xid = ds.x_unlabeled[id_mask]
    classes = np.unique(labels[labels >= 0])
    if len(classes) < 2:
        raise DataError("boundary OOD needs at least two classes among ID unlabeled points")
    rng = _ood_rng(spec)
    n = spec.n_ood
    c1 = rng.choice(classes, n)
    shift = rng.integers(1, len(classes), n)
    c2 = classes[(np.searchsorted(classes, c1) + shift) % len(classes)]
    pools = {c: xid[labels == c] for c in classes}
    a = np.array([pools[c][rng.integers(len(pools[c]))] for c in c1]).reshape(n, -1)
    b = np.array([pools[c][rng.integers(len(pools[c]))] for c in c2]).reshape(n, -1)
    return _append(ds, mixup_midpoints(a, b), rng)


def mixup_midpoints(a, b) -> np.ndarray:
    return 0.5 * (np.asarray(a, dtype=np.float64) + np.asarray(b, dtype=np.float64))


def noise_box(xid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """ID bounding box widened by 50% about its center."""
    lo, hi = xid.min(axis=0), xid.max(axis=0)
    center, half = (lo + hi) / 2, (hi - lo) / 2 * 1.5
    return center - half, center + half


def inject_noise_ood(ds: Dataset, spec: SyntheticSpec) -> Dataset:
    lo, hi = noise_box(_id_points(ds))
    rng = _ood_rng(spec)
    return _append(ds, rng.uniform(lo, hi, size=(spec.n_ood, len(lo))), rng)


_INJECTORS = {"faraway": inject_faraway_ood, "boundary": inject_boundary_ood,
              "noise": inject_noise_ood}


def make_dataset(spec: SyntheticSpec) -> Dataset:
    ds = make_base(spec)
    if spec.ood_kind == "none" or spec.n_ood == 0:
        return ds
    return _INJECTORS[spec.ood_kind](ds, spec)


# CSV ----------------------------------------------------------------------


def save_csv(ds: Dataset, path) -> None:
    """Rows ``x0..x{d-1},label,split,provenance``; label -1 marks unlabeled rows."""
    d = ds.dim
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(d)] + ["label", "split", "provenance"])

        def rows(x, labels, split, prov):
            for xi, li, pi in zip(x, labels, prov):
                w.writerow([repr(float(v)) for v in xi] + [int(li), split, pi])

        rows(ds.x_labeled, ds.y_labeled, "train", ["id"] * len(ds.x_labeled))
        rows(ds.x_unlabeled, [-1] * len(ds.x_unlabeled), "train", ds.u_provenance)
        rows(ds.x_val, ds.y_val, "val", ["na"] * len(ds.x_val))
        rows(ds.x_test, ds.y_test, "test", ["na"] * len(ds.x_test))


def load_csv(path) -> Dataset:
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        for col in ("label", "split", "provenance"):
            if col not in header:
                raise DataError(f"{path}: missing column {col!r}")
        feat_cols = [i for i, h in enumerate(header) if h.startswith("x")]
        if not feat_cols:
            raise DataError(f"{path}: missing column 'x0'")
        for j in range(len(feat_cols)):
            if f"x{j}" not in header:
                raise DataError(f"{path}: missing column 'x{j}'")
        fi = [header.index(f"x{j}") for j in range(len(feat_cols))]
        li, si, pi = header.index("label"), header.index("split"), header.index("provenance")
        buckets = {k: ([], [], []) for k in ("D", "U", "V", "T")}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                x = [float(row[i]) for i in fi]
                label = int(row[li])
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: malformed row ({e})") from None
            split, prov = row[si], row[pi]
            if split not in SPLITS:
                raise DataError(f"{path}:{lineno}: unknown split {split!r}")
            if prov not in PROVENANCES:
                raise DataError(f"{path}:{lineno}: unknown provenance {prov!r}")
            if split == "train":
                key = "U" if label == -1 else "D"
            else:
                key = "V" if split == "val" else "T"
                if label < 0:
                    raise DataError(f"{path}:{lineno}: {split} rows need a label")
            b = buckets[key]
            b[0].append(x)
            b[1].append(label)
            b[2].append(prov)
    d = len(fi)

    def arr(key):
        xs, ys, ps = buckets[key]
        return (np.array(xs, dtype=np.float64).reshape(-1, d), np.array(ys, dtype=np.int64),
                np.array(ps, dtype=object))

    xl, yl, _ = arr("D")
    xu, _, pu = arr("U")
    xv, yv, _ = arr("V")
    xt, yt, _ = arr("T")
    return Dataset(xl, yl, xu, pu, xv, yv, xt, yt)
