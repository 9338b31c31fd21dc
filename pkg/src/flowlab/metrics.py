"""Sample-set distances and image-quality metrics, plus the report container."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from . import kernels
from .datasets import kde_band_mass


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# distribution distances


@dataclass(frozen=True)
class KernelSpec:
    """Sum of RBF kernels ``exp(-|x - y|^2 / (2 s^2))`` over ``bandwidths``."""

    bandwidths: tuple
    kind: str = "rbf"

    def __post_init__(self):
        bw = tuple(float(b) for b in self.bandwidths)
        if self.kind != "rbf":
            raise MetricError(f"unsupported kernel {self.kind!r}")
        if not bw or any(not b > 0 for b in bw):
            raise MetricError("bandwidths must be a non-empty list of positive numbers")
        object.__setattr__(self, "bandwidths", bw)

    @classmethod
    def median_heuristic(cls, samples, scales=(0.25, 0.5, 1.0, 2.0, 4.0), max_points: int = 1000):
        """Multi-scale kernel around the median pairwise distance of ``samples``."""
        x = _flatten(samples)
        if x.shape[0] > max_points:
            x = x[np.linspace(0, x.shape[0] - 1, max_points).astype(np.int64)]
        d2 = (x * x).sum(1)[:, None] + (x * x).sum(1)[None, :] - 2 * x @ x.T
        iu = np.triu_indices(x.shape[0], k=1)
        med = float(np.sqrt(np.median(np.maximum(d2[iu], 0.0))))
        if med == 0:
            med = 1.0
        return cls(tuple(s * med for s in scales))


def _flatten(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x.reshape(x.shape[0], int(np.prod(x.shape[1:])))


def mmd2(X, Y, kernel: KernelSpec | None = None) -> float:
    """Unbiased squared MMD (U-statistic; diagonal terms left out).

    Can come out slightly negative when the two sets match; the value is
    returned as is. Without an explicit kernel the median heuristic on the
    pooled sample is used.
    """
    X, Y = _flatten(X), _flatten(Y)
    if X.shape[1] != Y.shape[1]:
        raise MetricError(f"dimension mismatch {X.shape[1]} vs {Y.shape[1]}")
    m, n = X.shape[0], Y.shape[0]
    if m < 2 or n < 2:
        raise MetricError("mmd2 needs at least two samples per set")
    if kernel is None:
        kernel = KernelSpec.median_heuristic(np.concatenate([X, Y]))
    bw = kernel.bandwidths
    kxx = kernels.rbf_pair_sums(X, X, bw, exclude_diagonal=True) / (m * (m - 1))
    kyy = kernels.rbf_pair_sums(Y, Y, bw, exclude_diagonal=True) / (n * (n - 1))
    kxy = kernels.rbf_pair_sums(X, Y, bw) / (m * n)
    return float(kxx + kyy - 2.0 * kxy)


def _w1_1d(a: np.ndarray, b: np.ndarray) -> float:
    """Exact W1 between two 1-D empirical measures: integral of |F_a - F_b|."""
    a, b = np.sort(a), np.sort(b)
    allv = np.concatenate([a, b])
    allv.sort()
    deltas = np.diff(allv)
    fa = np.searchsorted(a, allv[:-1], side="right") / a.size
    fb = np.searchsorted(b, allv[:-1], side="right") / b.size
    return float(np.sum(np.abs(fa - fb) * deltas))


def sliced_wasserstein(X, Y, num_projections: int = 128, seed: int = 0) -> float:
    """Mean 1-D Wasserstein-1 distance over random unit directions."""
    X, Y = _flatten(X), _flatten(Y)
    if X.shape[0] == 0 or Y.shape[0] == 0:
        raise MetricError("sliced_wasserstein needs non-empty sets")
    if X.shape[1] != Y.shape[1]:
        raise MetricError(f"dimension mismatch {X.shape[1]} vs {Y.shape[1]}")
    if num_projections < 1:
        raise MetricError("num_projections must be >= 1")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((num_projections, X.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    px, py = X @ dirs.T, Y @ dirs.T
    return float(np.mean([_w1_1d(px[:, k], py[:, k]) for k in range(num_projections)]))


# ---------------------------------------------------------------------------
# image quality


def _image(a) -> np.ndarray:
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    while a.ndim > 2 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise MetricError(f"expected a single-channel 2-D image, got shape {a.shape}")
    return a


def ssim(a, b, window: int = 7) -> float:
    """Mean SSIM over uniform ``window`` x ``window`` neighbourhoods.

    Unit dynamic range, ``C1 = 0.01^2``, ``C2 = 0.03^2``, sample covariances,
    and border pixels whose windows would leave the image are excluded.
    """
    a, b = _image(a), _image(b)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    if window % 2 == 0 or min(a.shape) < window:
        raise MetricError(f"window must be odd and no larger than the image ({a.shape})")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    npix = window * window
    cov_norm = npix / (npix - 1)
    ux, uy = uniform_filter(a, window), uniform_filter(b, window)
    uxx, uyy, uxy = uniform_filter(a * a, window), uniform_filter(b * b, window), uniform_filter(a * b, window)
    vx, vy, vxy = cov_norm * (uxx - ux * ux), cov_norm * (uyy - uy * uy), cov_norm * (uxy - ux * uy)
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    pad = (window - 1) // 2
    return float(s[pad:-pad, pad:-pad].mean()) if pad else float(s.mean())


def psnr(a, b) -> float:
    """PSNR in dB for unit dynamic range; ``inf`` for identical images."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0 else -10.0 * math.log10(mse)


def snr(signal, noisy) -> float:
    signal, noisy = np.asarray(signal, dtype=np.float64), np.asarray(noisy, dtype=np.float64)
    if signal.shape != noisy.shape:
        raise MetricError(f"shape mismatch {signal.shape} vs {noisy.shape}")
    err = float(np.sum((signal - noisy) ** 2))
    return math.inf if err == 0 else 10.0 * math.log10(float(np.sum(signal ** 2)) / err)


def intensity_shift(real, generated, band=(0.6, 1.0), bandwidth: float = 0.02) -> float:
    """KDE mass of ``generated`` in ``band`` minus that of ``real``; positive = brighter."""
    lo, hi = band
    if not 0 <= lo < hi <= 1:
        raise MetricError(f"band {band} must lie inside [0, 1]")
    if len(real) == 0 or len(generated) == 0:
        raise MetricError("intensity_shift needs non-empty image sets")
    return kde_band_mass(generated, band, bandwidth) - kde_band_mass(real, band, bandwidth)


def mask_ssim(generated, masks, threshold: float, window: int = 7) -> float:
    """Mean SSIM between each generated image binarised at ``threshold`` and its mask."""
    vals = [ssim((np.asarray(g) > threshold).astype(np.float64), m, window) for g, m in zip(generated, masks)]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# reports


def config_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EvalEntry:
    metric: str
    value: float
    n_generated: int
    n_reference: int
    config_digest: str
    model: str = ""
    sampler: str = ""
    steps: int = 0


CSV_FIELDS = ["metric", "value", "n_generated", "n_reference", "config_digest", "model", "sampler", "steps"]


@dataclass
class EvalReport:
    entries: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def add(self, **kwargs) -> EvalEntry:
        e = EvalEntry(**kwargs)
        self.entries.append(e)
        return e

    def value(self, metric: str, **where) -> float:
        hits = [e for e in self.entries if e.metric == metric and all(getattr(e, k) == v for k, v in where.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} entries match {metric} {where}")
        return hits[0].value

    def to_json(self) -> str:
        return json.dumps(
            {"entries": [asdict(e) for e in self.entries], "provenance": self.provenance}, indent=2, sort_keys=True
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls([EvalEntry(**e) for e in d["entries"]], d.get("provenance", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for e in self.entries:
            w.writerow([repr(e.value) if f == "value" else getattr(e, f) for f in CSV_FIELDS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, provenance: dict | None = None) -> "EvalReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        entries = [
            EvalEntry(
                r["metric"], float(r["value"]), int(r["n_generated"]), int(r["n_reference"]),
                r["config_digest"], r["model"], r["sampler"], int(r["steps"]),
            )
            for r in rows
        ]
        return cls(entries, provenance or {})
