"""``run-acceptance``: train, evaluate, run the growth curve and compare,
then check the end-to-end criteria and write a summary CSV."""

import csv
import os

import numpy as np

from ..adaptation import adapt_layer_inspect, adapt_tent
from .commands import (
    cmd_adapt_eval,
    cmd_growth_curve,
    cmd_train_source,
    make_cohort,
    shift_cohort,
)
from .config import adaptation_config
from .results import compare_rows, filter_rows

DICE_GATE = 0.85


def _mean(rows):
    return float(np.mean([r.mean_dice for r in rows])) if rows else float("nan")


def _mask_audit(cfg, net):
    """True when adaptation leaves every parameter outside the mask bit-identical."""
    vols, labs, _ = make_cohort(cfg, "test")
    sv, _ = shift_cohort(cfg, vols[:1], labs[:1], "rotation", cfg["acceptance"]["compare_magnitude"])
    ok = True
    for model in (adapt_tent(net, sv, adaptation_config(cfg, "tent", "single_sample")),
                  adapt_layer_inspect(net, sv, adaptation_config(cfg, "layer_inspect", "single_sample", m=1))):
        src = net.parameters()
        new = model.network.parameters()
        mask = set(model.mask)
        for name in src:
            if name not in mask and not np.array_equal(src[name], new[name]):
                ok = False
    return ok


def run_acceptance(cfg, out_dir):
    """Returns the summary rows ``(check, value, threshold, passed)``."""
    os.makedirs(out_dir, exist_ok=True)
    net, dice = cmd_train_source(cfg, out_dir)
    acc = cfg["acceptance"]
    rows = []
    for kind in ("rotation", "gamma"):
        rows += cmd_adapt_eval(cfg, out_dir, kinds=[kind], grids={kind: acc[kind]["magnitudes"]},
                               methods=acc[kind]["methods"], modes=cfg["adaptation"]["modes"],
                               name=f"acceptance_{kind}")
    growth = cmd_growth_curve(cfg, out_dir)

    summary = [("in_distribution_dice", dice, DICE_GATE, dice >= DICE_GATE)]

    x = float(acc["compare_magnitude"])
    rot = filter_rows(rows, shift_kind="rotation", mode="single_sample")
    base = filter_rows(filter_rows(rot, method="none"), magnitude=x)
    tent = filter_rows(filter_rows(rot, method="tent"), magnitude=x)
    if base and tent:
        cmp = compare_rows(base, tent)
        summary.append(("tent_minus_base_dice_rotation", cmp.mean_difference, 0.0, cmp.mean_difference > 0))
        summary.append(("tent_vs_base_p_value", cmp.p_value, 0.05, cmp.p_value < 0.05))

    mags = sorted({r.magnitude for r in filter_rows(rows, shift_kind="rotation", method="tent")})
    for m in mags:
        single = _mean(filter_rows(rows, shift_kind="rotation", method="tent", mode="single_sample", magnitude=m))
        full = _mean(filter_rows(rows, shift_kind="rotation", method="tent", mode="full_dataset", magnitude=m))
        if np.isnan(full):
            continue
        if m == mags[-1]:
            summary.append((f"single_minus_full_rotation_{m:g}", single - full, 0.0, single > full))
        else:
            summary.append((f"single_minus_full_rotation_{m:g}", single - full, -0.02, single >= full - 0.02))

    gam = filter_rows(rows, shift_kind="gamma", mode="single_sample")
    g_max = max((r.magnitude for r in gam), default=None)
    if g_max is not None:
        clean = _mean(filter_rows(gam, method="none", magnitude=0.0))
        matched = _mean(filter_rows(gam, method="histogram_match", magnitude=g_max))
        if not np.isnan(matched):
            summary.append((f"histogram_match_gap_gamma_{g_max:g}", clean - matched, 0.05, clean - matched <= 0.05))

    centers = sorted({r.magnitude for r in growth})
    base_curve = [_mean(filter_rows(growth, method="none", magnitude=c)) for c in centers]
    mid = len(centers) // 2
    summary.append(("growth_first_bin_minus_centre", base_curve[0] - base_curve[mid], 0.0,
                    base_curve[0] < base_curve[mid]))
    summary.append(("growth_last_bin_minus_centre", base_curve[-1] - base_curve[mid], 0.0,
                    base_curve[-1] < base_curve[mid]))
    for method in sorted({r.method for r in growth} - {"none"}):
        worst = min(_mean(filter_rows(growth, method=method, magnitude=c)) - b for c, b in zip(centers, base_curve))
        summary.append((f"growth_{method}_worst_minus_base", worst, -0.02, worst >= -0.02))

    audit = _mask_audit(cfg, net)
    summary.append(("mask_discipline", float(audit), 1.0, audit))

    with open(os.path.join(out_dir, "acceptance_summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check", "value", "threshold", "passed"])
        for name, value, threshold, passed in summary:
            w.writerow([name, repr(round(float(value), 10)), repr(float(threshold)), "yes" if passed else "no"])
    return summary
