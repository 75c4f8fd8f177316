"""Grid epsilon-nets over boxes and random pair batches drawn from them."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

DEFAULT_POINT_BUDGET = 5_000_000


class CoverBudgetExceeded(RuntimeError):
    def __init__(self, required: int, budget: int):
        super().__init__(f"cover needs {required} points, budget is {budget}")
        self.required = required
        self.budget = budget


@dataclass(frozen=True)
class BoxDomain:
    lo: np.ndarray
    hi: np.ndarray

    def __init__(self, lo, hi):
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be vectors of equal length")
        if np.any(lo >= hi):
            raise ValueError(f"box needs lo < hi componentwise, got {lo} / {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, x, tol: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lo - tol) & (x <= self.hi + tol), axis=-1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(n, self.dim))


@dataclass(frozen=True)
class SampleCover:
    points: np.ndarray
    eps: float
    domain: BoxDomain

    def __len__(self):
        return self.points.shape[0]

    def digest(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.points).tobytes())
        h.update(np.float64(self.eps).tobytes())
        return h.hexdigest()[:16]


def axis_counts(domain: BoxDomain, eps: float) -> list[int]:
    """Grid points per axis: ``ceil(span / h) + 1`` with ``h = 2 eps / sqrt(dim)``;
    an axis shorter than ``h`` gets its midpoint only."""
    h = 2.0 * eps / np.sqrt(domain.dim)
    spans = domain.hi - domain.lo
    return [1 if s < h else int(np.ceil(s / h)) + 1 for s in spans]


def build_cover(domain: BoxDomain, eps: float, budget: int = DEFAULT_POINT_BUDGET) -> SampleCover:
    if eps <= 0:
        raise ValueError("cover radius must be positive")
    counts = axis_counts(domain, eps)
    required = int(np.prod(counts, dtype=np.int64))
    if required > budget:
        raise CoverBudgetExceeded(required, budget)
    axes = [
        np.array([0.5 * (lo + hi)]) if c == 1 else np.linspace(lo, hi, c)
        for lo, hi, c in zip(domain.lo, domain.hi, counts)
    ]
    grid = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grid], axis=1)
    return SampleCover(pts, float(eps), domain)


@dataclass
class CoverVerdict:
    passed: bool
    worst_distance: float
    n_probe: int


def verify_cover(cover: SampleCover, n_probe: int, seed: int = 0) -> CoverVerdict:
    """Monte-Carlo probe of the covering property via nearest-neighbour search."""
    if n_probe <= 0:
        return CoverVerdict(True, 0.0, 0)
    rng = np.random.default_rng(seed)
    probes = cover.domain.sample(n_probe, rng)
    dist, _ = cKDTree(cover.points).query(probes)
    worst = float(dist.max())
    return CoverVerdict(worst <= cover.eps, worst, n_probe)


@dataclass
class PairBatch:
    """Index tuples into the covers plus the separation flag; ``separated``
    marks pairs whose pair conditions are evaluated."""

    iq: np.ndarray
    ir: np.ndarray
    jq: np.ndarray
    jr: np.ndarray
    separated: np.ndarray
    xq: np.ndarray
    xr: np.ndarray
    wq: np.ndarray
    wr: np.ndarray

    def __len__(self):
        return self.iq.size


def make_pair_batches(
    xs: SampleCover,
    ws: SampleCover,
    batch_size: int,
    n_batches: int,
    d_min: float | None = None,
    seed: int = 0,
) -> list[PairBatch]:
    """Uniform tuples from X x X x W x W. ``d_min`` defaults to ``2 * eps``."""
    if d_min is None:
        d_min = 2.0 * xs.eps
    if d_min < 0:
        raise ValueError("d_min must be nonnegative")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_batches):
        iq = rng.integers(0, len(xs), batch_size)
        ir = rng.integers(0, len(xs), batch_size)
        jq = rng.integers(0, len(ws), batch_size)
        jr = rng.integers(0, len(ws), batch_size)
        xq, xr = xs.points[iq], xs.points[ir]
        sep = np.linalg.norm(xq - xr, axis=1) >= d_min
        out.append(PairBatch(iq, ir, jq, jr, sep, xq, xr, ws.points[jq], ws.points[jr]))
    return out


def export_cover(cover: SampleCover, path) -> None:
    """CSV of points plus a ``.meta.json`` sidecar."""
    path = Path(path)
    dim = cover.domain.dim
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"c{i + 1}" for i in range(dim)])
        for p in cover.points:
            wr.writerow([repr(float(v)) for v in p])
    meta = {
        "lo": cover.domain.lo.tolist(),
        "hi": cover.domain.hi.tolist(),
        "eps": cover.eps,
        "count": len(cover),
        "digest": cover.digest(),
    }
    path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=1))


def import_cover(path) -> SampleCover:
    path = Path(path)
    meta = json.loads(path.with_suffix(".meta.json").read_text())
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    pts = np.array([[float(v) for v in r] for r in rows], dtype=float)
    if pts.shape[0] != meta["count"]:
        raise ValueError(f"{path}: expected {meta['count']} points, found {pts.shape[0]}")
    return SampleCover(pts.reshape(meta["count"], -1), float(meta["eps"]), BoxDomain(meta["lo"], meta["hi"]))
