"""Result rows, CSV I/O and the paired comparison."""

import csv
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import stats

from ..exceptions import ConfigError

NUM_FOREGROUND = 4


@dataclass
class ResultRow:
    method: str
    mode: str
    shift_kind: str
    magnitude: float
    sample_id: int
    dice_1: float
    dice_2: float
    dice_3: float
    dice_4: float
    mean_dice: float
    entropy_pre: float
    entropy_post: float
    param: str = ""

    def sort_key(self):
        return (self.method, self.mode, self.shift_kind, self.param, self.magnitude, self.sample_id)


COLUMNS = tuple(f.name for f in fields(ResultRow))
_FLOAT_COLUMNS = {"magnitude", "dice_1", "dice_2", "dice_3", "dice_4", "mean_dice", "entropy_pre", "entropy_post"}
_INT_COLUMNS = {"sample_id"}


def _fmt(value):
    if isinstance(value, float):
        return repr(round(value, 10)) if math.isfinite(value) else str(value)
    return str(value)


def write_rows(path, rows):
    """Write rows sorted on their key, so the bytes never depend on the order
    in which cells finished."""
    rows = sorted(rows, key=ResultRow.sort_key)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow([_fmt(v) for v in asdict(r).values()])
    return rows


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ConfigError(f"{path} is empty")
        if tuple(reader.fieldnames) != COLUMNS:
            raise ConfigError(f"{path} does not have the result-row header")
        rows = []
        for rec in reader:
            vals = {}
            for k, v in rec.items():
                if k in _FLOAT_COLUMNS:
                    vals[k] = float(v)
                elif k in _INT_COLUMNS:
                    vals[k] = int(v)
                else:
                    vals[k] = v
            rows.append(ResultRow(**vals))
    return rows


@dataclass
class Comparison:
    n: int
    mean_difference: float
    t_statistic: float
    p_value: float
    zero_variance: bool
    significant: bool

    def report(self):
        lines = [
            f"pairs: {self.n}",
            f"mean difference (b - a): {self.mean_difference:.6f}",
            f"t: {self.t_statistic:.6g}",
            f"p (two-sided): {self.p_value:.6g}",
        ]
        if self.zero_variance:
            lines.append("zero variance of differences: t-test degenerate")
        lines.append(f"significant at 0.05: {'yes' if self.significant else 'no'}")
        return "\n".join(lines)


def paired_t_test(a, b, alpha=0.05):
    """Two-sided paired t-test of ``b - a``.

    When every difference is equal (up to float rounding) the statistic is
    undefined. Identical samples then give t=0, p=1; a constant nonzero
    offset gives t=+-inf, p=0 and the zero-variance flag.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ConfigError("paired test needs two equal-length 1-D samples")
    if len(a) < 2:
        raise ConfigError("paired test needs at least two pairs")
    d = b - a
    mean = float(d.mean())
    if np.ptp(d) <= 1e-12 * max(1.0, abs(mean)):
        if np.all(d == 0.0):
            return Comparison(len(d), 0.0, 0.0, 1.0, True, False)
        return Comparison(len(d), mean, math.copysign(math.inf, mean), 0.0, True, True)
    res = stats.ttest_rel(b, a)
    p = float(res.pvalue)
    return Comparison(len(d), mean, float(res.statistic), p, False, p < alpha)


def per_sample_dice(rows):
    """``{sample_id: mean_dice}``; the rows must hold one entry per sample."""
    out = {}
    for r in rows:
        if r.sample_id in out:
            raise ConfigError(f"sample {r.sample_id} appears more than once; filter the rows first")
        out[r.sample_id] = r.mean_dice
    return out


def compare_rows(rows_a, rows_b, alpha=0.05):
    da = per_sample_dice(rows_a)
    db = per_sample_dice(rows_b)
    if set(da) != set(db):
        raise ConfigError("the two result sets do not cover the same sample ids")
    ids = sorted(da)
    return paired_t_test([da[i] for i in ids], [db[i] for i in ids], alpha)


def filter_rows(rows, **criteria):
    return [r for r in rows if all(getattr(r, k) == v for k, v in criteria.items())]
