"""Simulated domain shifts and the histogram-matching baseline.

Each ``apply_*`` function samples its concrete parameter from the magnitude
``x`` with its own seeded generator and returns a :class:`ShiftedSample`.
Geometric shifts resample intensities trilinearly and labels by nearest
neighbour; out-of-field voxels become 0 / background.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError, DimensionError

SHIFT_KINDS = ("rotation", "scaling", "smoothing", "gamma")


@dataclass
class ShiftedSample:
    volume: np.ndarray
    labels: np.ndarray
    applied_params: dict = field(default_factory=dict)


@dataclass
class ShiftSpec:
    """A shift kind with magnitude ``x``.

    ``mode="range"`` draws the parameter as described for each kind;
    ``mode="exact"`` uses ``x`` itself (every axis for geometric kinds).
    ``kind="compose"`` applies ``children`` in order, each with a seed
    derived from this spec's seed.
    """

    kind: str
    magnitude: float = 0.0
    mode: str = "range"
    seed: int = 0
    children: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS + ("compose",):
            raise ConfigError(f"unknown shift kind {self.kind!r}")
        if self.mode not in ("range", "exact"):
            raise ConfigError(f"unknown shift mode {self.mode!r}")
        if self.magnitude < 0:
            raise ConfigError(f"shift magnitude must be >= 0, got {self.magnitude}")

    def to_dict(self):
        d = {"kind": self.kind, "magnitude": self.magnitude, "mode": self.mode, "seed": self.seed}
        if self.children:
            d["children"] = [c.to_dict() for c in self.children]
        return d

    @classmethod
    def from_dict(cls, d):
        children = [cls.from_dict(c) for c in d.get("children", [])]
        return cls(d["kind"], float(d.get("magnitude", 0.0)), d.get("mode", "range"),
                   int(d.get("seed", 0)), children)

    def apply(self, volume, labels=None, seed=None):
        seed = self.seed if seed is None else seed
        if labels is None:
            labels = np.zeros(np.shape(volume), dtype=np.uint8)
        if self.kind == "compose":
            applied = []
            out = ShiftedSample(np.asarray(volume), np.asarray(labels), {})
            for i, child in enumerate(self.children):
                out = child.apply(out.volume, out.labels, seed=_child_seed(seed, i))
                applied.append({child.kind: out.applied_params})
            return ShiftedSample(out.volume, out.labels, {"steps": applied})
        fn = _APPLY[self.kind]
        return fn(volume, labels, self.magnitude, seed, exact=self.mode == "exact")


def _child_seed(seed, i):
    return int(np.random.default_rng([seed, i]).integers(2 ** 31))


def _check_pair(volume, labels):
    volume = np.asarray(volume)
    labels = np.asarray(labels)
    if volume.ndim != 3:
        raise DimensionError(f"expected a (D, H, W) volume, got shape {volume.shape}")
    if labels.shape != volume.shape:
        raise DimensionError(f"labels {labels.shape} do not match volume {volume.shape}")
    return volume, labels


def _check_magnitude(x):
    if x < 0:
        raise ConfigError(f"shift magnitude must be >= 0, got {x}")


def _axis_rotation(axis, theta):
    c, s = np.cos(theta), np.sin(theta)
    j, k = [q for q in range(3) if q != axis]
    R = np.eye(3)
    R[j, j], R[j, k], R[k, j], R[k, k] = c, -s, s, c
    return R


def rotation_matrix(angles_deg):
    """Intrinsic rotations about depth, then height, then width."""
    t = np.deg2rad(np.asarray(angles_deg, dtype=float))
    return _axis_rotation(0, t[0]) @ _axis_rotation(1, t[1]) @ _axis_rotation(2, t[2])


def _resample(volume, labels, forward_matrix):
    """Apply ``forward_matrix`` about the volume centre: output(A (x - c) + c) = input(x)."""
    inv = np.linalg.inv(forward_matrix)
    center = (np.asarray(volume.shape, dtype=float) - 1.0) / 2.0
    offset = center - inv @ center
    vol = ndimage.affine_transform(volume.astype(np.float64), inv, offset, order=1,
                                   mode="constant", cval=0.0)
    lab = ndimage.affine_transform(labels, inv, offset, order=0, mode="constant", cval=0)
    return vol.astype(volume.dtype), lab.astype(labels.dtype)


def rotate(volume, labels, angles_deg):
    volume, labels = _check_pair(volume, labels)
    if not np.any(angles_deg):
        return volume.copy(), labels.copy()
    return _resample(volume, labels, rotation_matrix(angles_deg))


def scale(volume, labels, factors):
    volume, labels = _check_pair(volume, labels)
    factors = np.broadcast_to(np.asarray(factors, dtype=float), (3,))
    if np.any(factors <= 0):
        raise ConfigError("scale factors must be positive")
    if np.all(factors == 1.0):
        return volume.copy(), labels.copy()
    return _resample(volume, labels, np.diag(factors))


def _gaussian_kernel(sigma):
    radius = int(np.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(volume, sigma):
    """Separable Gaussian with radius ceil(3 sigma), renormalised where it meets the border."""
    volume = np.asarray(volume)
    if sigma < 0:
        raise ConfigError("sigma must be >= 0")
    if sigma == 0:
        return volume.copy()
    k = _gaussian_kernel(sigma)
    num = volume.astype(np.float64)
    den = np.ones_like(num)
    for axis in range(volume.ndim):
        num = ndimage.correlate1d(num, k, axis=axis, mode="constant", cval=0.0)
        den = ndimage.correlate1d(den, k, axis=axis, mode="constant", cval=0.0)
    return (num / den).astype(volume.dtype)


def gamma_correct(volume, gamma):
    """Min-max normalise, raise to ``gamma``, map back to the original range."""
    volume = np.asarray(volume)
    if gamma <= 0:
        raise ConfigError("gamma must be positive")
    if gamma == 1.0:
        return volume.copy()
    lo = float(volume.min())
    hi = float(volume.max())
    if hi <= lo:
        raise ConfigError("cannot gamma-correct a constant volume")
    v = (volume.astype(np.float64) - lo) / (hi - lo)
    return (v ** gamma * (hi - lo) + lo).astype(volume.dtype)


def apply_rotation(volume, labels, x, seed, *, exact=False):
    """Rotate by per-axis angles drawn from U[-x, x] degrees."""
    _check_magnitude(x)
    volume, labels = _check_pair(volume, labels)
    rng = np.random.default_rng(seed)
    angles = np.full(3, float(x)) if exact else rng.uniform(-x, x, 3)
    vol, lab = rotate(volume, labels, angles)
    return ShiftedSample(vol, lab, {"angles_deg": angles.tolist()})


def apply_scaling(volume, labels, x, seed, *, exact=False):
    """Scale each axis by exp(u), u ~ U[-x, x]."""
    _check_magnitude(x)
    volume, labels = _check_pair(volume, labels)
    rng = np.random.default_rng(seed)
    logs = np.full(3, float(x)) if exact else rng.uniform(-x, x, 3)
    factors = np.exp(logs)
    vol, lab = scale(volume, labels, factors)
    return ShiftedSample(vol, lab, {"scale_factors": factors.tolist()})


def apply_gaussian_smooth(volume, labels, x, seed, *, exact=False):
    """Blur with sigma ~ U[0, x] voxels; labels untouched."""
    _check_magnitude(x)
    volume, labels = _check_pair(volume, labels)
    rng = np.random.default_rng(seed)
    sigma = float(x) if exact else float(rng.uniform(0.0, x))
    return ShiftedSample(gaussian_smooth(volume, sigma), labels.copy(), {"sigma": sigma})


def apply_gamma(volume, labels, x, seed, *, exact=False):
    """Gamma-correct with log(gamma) ~ U[-x, x]; labels untouched."""
    _check_magnitude(x)
    volume, labels = _check_pair(volume, labels)
    rng = np.random.default_rng(seed)
    log_gamma = float(x) if exact else float(rng.uniform(-x, x))
    return ShiftedSample(gamma_correct(volume, float(np.exp(log_gamma))), labels.copy(),
                         {"log_gamma": log_gamma})


_APPLY = {
    "rotation": apply_rotation,
    "scaling": apply_scaling,
    "smoothing": apply_gaussian_smooth,
    "gamma": apply_gamma,
}


def histogram_match(target, reference, n_bins=256):
    """Map ``target`` intensities so their CDF follows ``reference``'s.

    Both CDFs are piecewise linear over ``n_bins`` equal-width bins, so the
    output lies inside the reference's [min, max].
    """
    target = np.asarray(target)
    if target.size == 0:
        raise DimensionError("histogram matching needs non-empty volumes")
    if n_bins < 2:
        raise ConfigError("n_bins must be >= 2")
    return HistogramMatcher(n_bins).fit(reference)._match_one(target)


def _cdf(volume, n_bins):
    lo = float(volume.min())
    hi = float(volume.max())
    if hi <= lo:
        return None, None
    hist, edges = np.histogram(volume, bins=n_bins, range=(lo, hi))
    cdf = np.concatenate([[0.0], np.cumsum(hist, dtype=np.float64)]) / volume.size
    return edges, cdf


def _inverse_cdf(q, edges, cdf):
    # first bin whose upper CDF reaches q; for q > 0 that bin holds mass,
    # so empty bins never stretch the mapping across gaps
    mass = np.diff(cdf)
    k = np.clip(np.searchsorted(cdf[1:], q, side="left"), 0, len(mass) - 1)
    frac = np.divide(q - cdf[k], mass[k], out=np.zeros_like(q), where=mass[k] > 0)
    return edges[k] + np.clip(frac, 0.0, 1.0) * (edges[k + 1] - edges[k])


class HistogramMatcher(TransformerMixin, BaseEstimator):
    """Histogram-matching preprocessor: ``fit`` on a reference volume, then
    ``transform`` maps each volume of a batch onto the reference histogram."""

    def __init__(self, n_bins=256):
        self.n_bins = n_bins

    def fit(self, X, y=None):
        ref = np.asarray(X)
        if ref.size == 0:
            raise DimensionError("empty reference")
        edges, cdf = _cdf(ref, self.n_bins)
        if edges is None:
            raise ConfigError("reference volume is constant; the intensity mapping is degenerate")
        self.reference_edges_ = edges
        self.reference_cdf_ = cdf
        return self

    def transform(self, X):
        check_is_fitted(self, "reference_cdf_")
        X = np.asarray(X)
        if X.ndim == 3:
            return self._match_one(X)
        return np.stack([self._match_one(v) for v in X])

    def _match_one(self, v):
        t_edges, t_cdf = _cdf(v, self.n_bins)
        if t_edges is None:
            return np.full(v.shape, np.interp(0.5, self.reference_cdf_, self.reference_edges_), dtype=v.dtype)
        q = np.interp(v.astype(np.float64).ravel(), t_edges, t_cdf)
        return _inverse_cdf(q, self.reference_edges_, self.reference_cdf_).reshape(v.shape).astype(v.dtype)
