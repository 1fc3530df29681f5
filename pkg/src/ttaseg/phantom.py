"""Synthetic labelled phantoms and the class-ratio atlas built from them.

A phantom is a tissue-filled volume holding four non-overlapping structures
(labels 1..4; 0 is background). Structure size grows smoothly with the growth
parameter ``g`` in [0, 1], which stands in for gestational age.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .exceptions import ConfigError, DimensionError
from .losses import PRIOR_FLOOR

NUM_CLASSES = 5
STRUCTURE_NAMES = ("CP", "LPVH", "CB", "CSPV")
BACKGROUND_LEVEL = 0.45

# Normalised coordinates span [-1, 1] on each axis (depth, height, width).
# bend shears height by bend * width**2; power 2 is an ellipsoid, 4 is box-like.
_LAYOUT = (
    dict(center=(0.00, -0.48, 0.48), axes=(0.44, 0.36, 0.34), level=0.85, bend=0.3, power=2),
    dict(center=(0.00, 0.48, 0.48), axes=(0.42, 0.34, 0.32), level=0.12, bend=-0.3, power=2),
    dict(center=(0.00, 0.00, -0.48), axes=(0.55, 0.60, 0.36), level=0.65, bend=0.0, power=2),
    dict(center=(0.72, 0.00, 0.45), axes=(0.18, 0.24, 0.22), level=0.25, bend=0.0, power=4),
)
_CENTER_JITTER = 0.03
_AXIS_JITTER = 0.06


def growth_scale(g):
    """Linear size factor applied to every structure's semi-axes."""
    return 0.85 + 0.3 * g


def growth_to_week(g):
    """Cosmetic mapping of growth onto an 18-26 week axis for plot labels."""
    return 18.0 + 8.0 * np.asarray(g, dtype=float)


@dataclass
class PhantomSpec:
    size: int = 64
    voxel_size: float = 0.6
    growth: float = 0.5
    noise: float = 0.3
    bias: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.size % 2 or self.size < 8:
            raise ConfigError(f"grid size must be even and >= 8, got {self.size}")
        if not 0.0 <= self.growth <= 1.0:
            raise ConfigError(f"growth must lie in [0, 1], got {self.growth}")
        if self.noise < 0 or self.bias < 0:
            raise ConfigError("noise and bias must be non-negative")


def _grid(size):
    ax = ((np.arange(size) + 0.5) / size * 2.0 - 1.0).astype(np.float64)
    return np.meshgrid(ax, ax, ax, indexing="ij", sparse=True)


def _structure_shapes(spec):
    """Per-structure (center, semi-axes) after growth scaling and per-seed jitter.

    Jitter is drawn independently of ``growth`` so that the same seed yields
    the same anatomy at every growth value, only scaled.
    """
    rng = np.random.default_rng(spec.seed)
    s = growth_scale(spec.growth)
    shapes = []
    for st in _LAYOUT:
        c = np.asarray(st["center"]) + rng.uniform(-_CENTER_JITTER, _CENTER_JITTER, 3)
        a = np.asarray(st["axes"]) * s * rng.uniform(1 - _AXIS_JITTER, 1 + _AXIS_JITTER, 3)
        shapes.append((c, a))
    return shapes, rng


def generate_phantom(spec=None, **kwargs):
    """Return ``(volume float32 (D,H,W), labels uint8 (D,H,W))`` for ``spec``.

    Deterministic per seed. Raises ``ConfigError`` when structures would
    overlap or leave the field of view at the requested grid size.
    """
    if spec is None:
        spec = PhantomSpec(**kwargs)
    elif kwargs:
        raise TypeError("pass either a PhantomSpec or keyword arguments, not both")
    n = spec.size
    D, H, W = _grid(n)
    shapes, rng = _structure_shapes(spec)
    labels = np.zeros((n, n, n), dtype=np.uint8)
    image = np.full((n, n, n), BACKGROUND_LEVEL, dtype=np.float64)
    for k, (st, (c, a)) in enumerate(zip(_LAYOUT, shapes), start=1):
        if np.any(np.abs(c) + a > 1.0 + 1e-9):
            raise ConfigError(f"structure {STRUCTURE_NAMES[k - 1]} leaves the field of view")
        d = D - c[0]
        w = W - c[2]
        h = H - c[1] - st["bend"] * w ** 2
        p = st["power"]
        mask = (np.abs(d / a[0]) ** p + np.abs(h / a[1]) ** p + np.abs(w / a[2]) ** p) <= 1.0
        if not mask.any():
            raise ConfigError(f"structure {STRUCTURE_NAMES[k - 1]} vanishes at grid size {n}")
        if np.any(labels[mask]):
            raise ConfigError(f"structure {STRUCTURE_NAMES[k - 1]} overlaps another structure")
        labels[mask] = k
        image[mask] = st["level"]

    noise_rng = np.random.default_rng([spec.seed, 1])
    if spec.noise > 0:
        # blurred uniform field, rescaled to [-1, 1]: a cheap speckle texture
        u = ndimage.gaussian_filter(noise_rng.uniform(-1.0, 1.0, image.shape), 0.7)
        u /= np.abs(u).max()
        image *= 1.0 + spec.noise * u
    if spec.bias > 0:
        v = noise_rng.normal(size=3)
        v /= np.linalg.norm(v)
        image *= 1.0 + spec.bias * (v[0] * D + v[1] * H + v[2] * W)
    return image.astype(np.float32), labels


def generate_cohort(n, *, size=64, growth=0.5, noise=0.3, bias=0.1, seed=0):
    """``n`` phantoms with seeds ``seed .. seed+n-1``.

    ``growth`` is a scalar or a length-``n`` sequence.
    """
    gs = np.broadcast_to(np.asarray(growth, dtype=float), (n,))
    return [generate_phantom(PhantomSpec(size=size, growth=float(g), noise=noise, bias=bias, seed=seed + i))
            for i, g in enumerate(gs)]


@dataclass
class Atlas:
    """Cohort average: mean intensity, per-voxel label frequencies and
    per-growth-bin class ratios (rows of ``ratios`` follow ``bin_edges``)."""

    mean_intensity: np.ndarray
    label_frequency: np.ndarray
    bin_edges: np.ndarray
    ratios: np.ndarray
    bin_counts: np.ndarray = field(default=None)

    @property
    def num_classes(self):
        return self.label_frequency.shape[0]

    @property
    def num_bins(self):
        return len(self.bin_edges) - 1

    def bin_of(self, g):
        """Index of the growth bin containing ``g`` (right edge inclusive for the last bin)."""
        idx = int(np.searchsorted(self.bin_edges, g, side="right")) - 1
        return min(max(idx, 0), self.num_bins - 1)


def _argmax_ratio(freq):
    lab = freq.argmax(axis=0)
    counts = np.bincount(lab.ravel(), minlength=freq.shape[0])
    return counts / lab.size


def build_atlas(cohort, growth=None, bin_edges=(0.0, 1.0), num_classes=NUM_CLASSES):
    """Voxelwise average of a pre-aligned cohort.

    ``cohort`` is a list of ``(volume, labels)`` pairs; ``growth`` gives each
    member's growth value (defaults to 0.5) and ``bin_edges`` splits them into
    bins with their own class ratios. A bin with no members falls back to the
    whole-cohort ratio.
    """
    if not cohort:
        raise ValueError("cohort is empty")
    shape = np.shape(cohort[0][0])
    for vol, lab in cohort:
        if np.shape(vol) != shape or np.shape(lab) != shape:
            raise DimensionError(f"cohort member shape {np.shape(vol)}/{np.shape(lab)} != {shape}")
    growth = np.full(len(cohort), 0.5) if growth is None else np.asarray(growth, dtype=float)
    if growth.shape != (len(cohort),):
        raise DimensionError("need one growth value per cohort member")
    edges = np.asarray(bin_edges, dtype=float)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ConfigError("bin_edges must be strictly increasing with at least two entries")

    # integer accumulation keeps the average independent of cohort order
    counts = np.zeros((num_classes,) + shape, dtype=np.int64)
    total = np.zeros(shape, dtype=np.float64)
    bin_counts_lab = {}
    nbins = len(edges) - 1
    member_bin = np.clip(np.searchsorted(edges, growth, side="right") - 1, 0, nbins - 1)
    for (vol, lab), b in zip(cohort, member_bin):
        onehot = np.stack([lab == k for k in range(num_classes)])
        counts += onehot
        bin_counts_lab.setdefault(int(b), np.zeros_like(counts))
        bin_counts_lab[int(b)] += onehot
    vols = sorted((np.asarray(v, dtype=np.float64) for v, _ in cohort), key=lambda a: a.tobytes())
    for v in vols:
        total += v
    freq = counts / len(cohort)
    overall = _argmax_ratio(counts)
    ratios = np.empty((nbins, num_classes))
    members = np.bincount(member_bin, minlength=nbins)
    for b in range(nbins):
        ratios[b] = _argmax_ratio(bin_counts_lab[b]) if b in bin_counts_lab else overall
    return Atlas(total / len(cohort), freq, edges, ratios, members)


def class_ratio_prior(atlas, growth_bin=0, floor=PRIOR_FLOOR):
    """Class ratios of one growth bin, floored at ``floor`` and renormalised."""
    if not 0 <= growth_bin < atlas.num_bins:
        raise IndexError(f"growth bin {growth_bin} outside 0..{atlas.num_bins - 1}")
    return floor_prior(atlas.ratios[growth_bin], floor)


def floor_prior(tau, floor=PRIOR_FLOOR):
    """Raise entries to at least ``floor`` and rescale the rest so the vector sums to 1."""
    tau = np.asarray(tau, dtype=np.float64)
    if tau.ndim != 1 or floor * len(tau) >= 1.0 or np.any(tau < 0) or tau.sum() <= 0:
        raise ConfigError("class ratios must be a non-negative vector with positive sum")
    low = np.zeros(len(tau), dtype=bool)
    while True:
        free = ~low
        out = np.full(len(tau), floor)
        out[free] = tau[free] / tau[free].sum() * (1.0 - floor * low.sum())
        new_low = free & (out < floor)
        if not new_low.any():
            return out
        low |= new_low
