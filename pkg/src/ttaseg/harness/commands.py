"""Experiment drivers behind the command-line subcommands.

Everything is derived from the configuration and its top-level seed, so
repeated runs write byte-identical CSV and SVG files. Wall-clock timings
go to a separate ``*_timings.csv`` for that reason.
"""

import csv
import json
import logging
import os
import time

import numpy as np

from ..adaptation import cache_source_importance, predict_proba, run_adaptation
from ..exceptions import ConfigError
from ..losses import mean_dice, per_class_dice, shannon_entropy
from ..nn import build_reference_net, load_checkpoint, save_checkpoint
from ..phantom import NUM_CLASSES, build_atlas, class_ratio_prior, generate_phantom, PhantomSpec
from ..shifts import SHIFT_KINDS, HistogramMatcher, ShiftSpec
from ..training import recalibrate_batchnorm, train_source
from .config import adaptation_config, training_settings
from .plot import render_svg, series_from_rows, write_svg
from .results import ResultRow, compare_rows, filter_rows, write_rows

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "source.ttck"
_KIND_INDEX = {k: i for i, k in enumerate(SHIFT_KINDS + ("growth",))}


def derive_seed(*parts):
    """A 31-bit seed determined by ``parts`` (the top-level seed first)."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0] >> 1)


# ---------------------------------------------------------------- cohorts

def _growth_values(spec, n, seed):
    g = spec["growth"]
    if isinstance(g, (list, tuple)):
        lo, hi = float(g[0]), float(g[1])
        return np.random.default_rng(seed).uniform(lo, hi, n)
    return np.full(n, float(g))


def make_cohort(cfg, key):
    """``(volumes (N, D, H, W), labels, growth)`` for ``phantoms.<key>``."""
    ph = cfg["phantoms"]
    spec = ph[key]
    n = int(spec["count"])
    base = derive_seed(cfg["seed"], spec["seed"])
    growth = _growth_values(spec, n, derive_seed(cfg["seed"], spec["seed"], 1))
    vols, labs = [], []
    for i, g in enumerate(growth):
        v, lab = generate_phantom(PhantomSpec(size=int(ph["size"]), growth=float(g), noise=float(ph["noise"]),
                                              bias=float(ph["bias"]), seed=base + i))
        vols.append(v)
        labs.append(lab)
    return np.stack(vols), np.stack(labs), growth


def make_atlas(cfg):
    vols, labs, growth = make_cohort(cfg, "atlas")
    return build_atlas(list(zip(vols, labs)), growth, cfg["phantoms"]["atlas"]["bins"], NUM_CLASSES)


def shift_seed(cfg, kind, sample_id):
    # independent of the magnitude: along a sweep each sample keeps its
    # direction and only the size of the perturbation changes
    return derive_seed(cfg["seed"], 7, _KIND_INDEX[kind], sample_id)


def shift_cohort(cfg, vols, labs, kind, magnitude):
    out_v, out_l = [], []
    for i, (v, lab) in enumerate(zip(vols, labs)):
        s = ShiftSpec(kind, float(magnitude)).apply(v, lab, seed=shift_seed(cfg, kind, i))
        out_v.append(s.volume)
        out_l.append(s.labels)
    return np.stack(out_v), np.stack(out_l)


# ---------------------------------------------------------------- train

def cmd_train_source(cfg, out_dir):
    """Train, recalibrate, cache the source importance and save the checkpoint.

    Returns ``(network, in-distribution mean Dice)``.
    """
    os.makedirs(out_dir, exist_ok=True)
    vols, labs, _ = make_cohort(cfg, "train")
    settings = training_settings(cfg)
    net = build_reference_net(NUM_CLASSES, seed=derive_seed(cfg["seed"], 11))
    t0 = time.perf_counter()
    report = train_source(net, vols, labs, settings)
    n_recal = min(int(cfg["training"]["recalibration_count"]), len(vols))
    recalibrate_batchnorm(net, vols[:n_recal])
    cache_source_importance(net, vols[:n_recal])
    save_checkpoint(net, os.path.join(out_dir, CHECKPOINT_NAME))

    test_v, test_l, _ = make_cohort(cfg, "test")
    preds = predict_proba(net, test_v, batch_size=1).argmax(axis=1)
    dice = np.array([mean_dice(p, t, NUM_CLASSES) for p, t in zip(preds, test_l)])
    per_class = np.mean([per_class_dice(p, t, NUM_CLASSES) for p, t in zip(preds, test_l)], axis=0)
    with open(os.path.join(out_dir, "train_report.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity", "value"])
        w.writerow(["steps", settings.steps])
        w.writerow(["final_loss_mean_last_100", repr(round(float(np.mean(report.losses[-100:])), 10))
                    if report.losses else "nan"])
        for k, d in enumerate(per_class, start=1):
            w.writerow([f"dice_class_{k}", repr(round(float(d), 10))])
        w.writerow(["mean_dice", repr(round(float(dice.mean()), 10))])
    log.info("training took %.1f s; in-distribution mean Dice %.4f", time.perf_counter() - t0, dice.mean())
    return net, float(dice.mean())


def load_source(out_dir, checkpoint=None):
    path = checkpoint or os.path.join(out_dir, CHECKPOINT_NAME)
    if not os.path.exists(path):
        raise ConfigError(f"no checkpoint at {path}; run train-source first")
    return load_checkpoint(path)


# ---------------------------------------------------------------- evaluation

def _row(method, mode, kind, magnitude, sid, pred, truth, ent_pre, ent_post, param=""):
    pc = per_class_dice(pred, truth, NUM_CLASSES)
    return ResultRow(method, mode, kind, float(magnitude), int(sid), *map(float, pc), float(pc.mean()),
                     float(ent_pre), float(ent_post), param)


class _Timer:
    def __init__(self):
        self.rows = []

    def add(self, method, mode, kind, magnitude, param, total_s, n):
        per = 1000.0 * total_s / max(n, 1)
        for sid in range(n):
            self.rows.append((method, mode, kind, float(magnitude), sid, param, round(per, 3)))

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "mode", "shift_kind", "magnitude", "sample_id", "param", "wall_time_ms"])
            w.writerows(sorted(self.rows))


def _base_rows(net, method, modes, kind, magnitude, vols, labs, matcher=None):
    X = vols if matcher is None else matcher.transform(vols)
    probs = predict_proba(net, X, batch_size=1)
    rows = []
    for sid, (p, t) in enumerate(zip(probs, labs)):
        e = shannon_entropy(p[None]).total
        pred = p.argmax(axis=0)
        for mode in modes:
            rows.append(_row(method, mode, kind, magnitude, sid, pred, t, e, e))
    return rows


def _pre_entropies(result, n, batch_size, mode):
    if mode == "single_sample":
        return [lg[0]["sample_entropy"][0] for lg in result.logs]
    first = [e for entry in result.logs[0] if entry["pass"] == 0 for e in entry["sample_entropy"]]
    return first[:n]


def _adapt_rows(net, strategy, config, kind, magnitude, vols, labs, prior, param=""):
    result = run_adaptation(net, vols, config, prior=prior)
    pre = _pre_entropies(result, len(vols), config.batch_size, config.batch_mode)
    rows = [_row(strategy, config.batch_mode, kind, magnitude, sid, p, t, e0, e1, param)
            for sid, (p, t, e0, e1) in enumerate(zip(result.predictions, labs, pre, result.entropy))]
    return rows, result


def _prior_for(atlas, growth):
    """One prior per sample: the atlas bin containing that sample's growth."""
    return np.stack([class_ratio_prior(atlas, atlas.bin_of(g)) for g in growth])


def evaluate_methods(cfg, net, atlas, vols, labs, growth, kind, magnitude, methods, modes, timer,
                     param="", overrides=None):
    """Rows for every (method, mode) on one shifted cohort."""
    rows = []
    overrides = overrides or {}
    for method in methods:
        t0 = time.perf_counter()
        if method == "none":
            rows += _base_rows(net, "none", modes, kind, magnitude, vols, labs)
            timer.add(method, "-", kind, magnitude, param, time.perf_counter() - t0, len(vols))
            continue
        if method == "histogram_match":
            matcher = HistogramMatcher(int(cfg["adaptation"]["histogram_bins"])).fit(atlas.mean_intensity)
            rows += _base_rows(net, "histogram_match", modes, kind, magnitude, vols, labs, matcher)
            timer.add(method, "-", kind, magnitude, param, time.perf_counter() - t0, len(vols))
            continue
        for mode in modes:
            t0 = time.perf_counter()
            config = adaptation_config(cfg, method, mode, **overrides.get(method, {}))
            prior = None
            if method == "entropy_kl":
                priors = _prior_for(atlas, growth)
                prior = priors if mode == "single_sample" else class_ratio_prior(atlas, atlas.bin_of(float(np.mean(growth))))
            r, _ = _adapt_rows(net, method, config, kind, magnitude, vols, labs, prior, param)
            rows += r
            timer.add(method, mode, kind, magnitude, param, time.perf_counter() - t0, len(vols))
    return rows


def cmd_adapt_eval(cfg, out_dir, *, kinds=None, grids=None, methods=None, modes=None, checkpoint=None,
                   name="adapt_eval"):
    """Every method and mode over each shift kind and magnitude; writes
    ``<name>.csv``, ``<name>_timings.csv`` and one SVG per (kind, mode)."""
    os.makedirs(out_dir, exist_ok=True)
    net = load_source(out_dir, checkpoint)
    atlas = make_atlas(cfg)
    vols, labs, growth = make_cohort(cfg, "test")
    kinds = kinds or list(SHIFT_KINDS)
    grids = grids or cfg["grids"]
    methods = methods or cfg["adaptation"]["methods"]
    modes = modes or cfg["adaptation"]["modes"]
    timer = _Timer()
    rows = []
    for kind in kinds:
        for magnitude in grids[kind]:
            sv, sl = shift_cohort(cfg, vols, labs, kind, magnitude)
            rows += evaluate_methods(cfg, net, atlas, sv, sl, growth, kind, magnitude, methods, modes, timer)
            log.info("%s %s done", kind, magnitude)
    rows = write_rows(os.path.join(out_dir, f"{name}.csv"), rows)
    timer.write(os.path.join(out_dir, f"{name}_timings.csv"))
    for kind in kinds:
        for mode in modes:
            sub = filter_rows(filter_rows(rows, shift_kind=kind), mode=mode)
            svg = render_svg(series_from_rows(sub), title=f"{kind} ({mode})", xlabel=f"{kind} magnitude")
            write_svg(os.path.join(out_dir, f"{name}_{kind}_{mode}.svg"), svg)
    return rows


# ---------------------------------------------------------------- sweeps

def cmd_sweep(cfg, out_dir, axis, *, checkpoint=None):
    """EntropyKL over the lambda grid, or LayerInspect over the m / lr grids,
    at the configured rotation magnitudes (single-sample mode)."""
    if axis not in ("lambda", "m", "lr"):
        raise ConfigError(f"unknown sweep axis {axis!r}")
    os.makedirs(out_dir, exist_ok=True)
    net = load_source(out_dir, checkpoint)
    atlas = make_atlas(cfg)
    vols, labs, growth = make_cohort(cfg, "test")
    n = min(int(cfg["sweeps"]["count"]), len(vols))
    vols, labs, growth = vols[:n], labs[:n], growth[:n]
    if axis == "lambda":
        method, key, grid = "entropy_kl", "lam", cfg["sweeps"]["lambda"]
    elif axis == "m":
        method, key = "layer_inspect", "m"
        grid = cfg["sweeps"]["m"] or list(range(1, len(net.parametric_layer_indices()) + 1))
    else:
        method, key, grid = "layer_inspect", "learning_rate", cfg["sweeps"]["lr"]
    label = {"lam": "lambda", "m": "m", "learning_rate": "lr"}[key]
    timer = _Timer()
    rows = []
    audit = []
    for magnitude in cfg["sweeps"]["rotations"]:
        sv, sl = shift_cohort(cfg, vols, labs, "rotation", magnitude)
        rows += evaluate_methods(cfg, net, atlas, sv, sl, growth, "rotation", magnitude,
                                 ["none", "tent"], ["single_sample"], timer)
        for value in grid:
            value = int(value) if key == "m" else float(value)
            t0 = time.perf_counter()
            config = adaptation_config(cfg, method, "single_sample", **{key: value})
            prior = _prior_for(atlas, growth) if method == "entropy_kl" else None
            param = f"{label}={value:g}"
            r, result = _adapt_rows(net, method, config, "rotation", magnitude, sv, sl, prior, param)
            rows += r
            timer.add(method, "single_sample", "rotation", magnitude, param, time.perf_counter() - t0, n)
            if method == "layer_inspect":
                for sid, sel in enumerate(result.selected_layers):
                    names = [net.layers[i].name for i in sorted(sel)]
                    audit.append({"magnitude": float(magnitude), "param": param, "sample_id": sid,
                                  "selected_layers": sorted(sel), "layer_names": names})
    name = f"sweep_{axis}"
    rows = write_rows(os.path.join(out_dir, f"{name}.csv"), rows)
    timer.write(os.path.join(out_dir, f"{name}_timings.csv"))
    if audit:
        with open(os.path.join(out_dir, f"{name}_mask_audit.json"), "w") as fh:
            json.dump(audit, fh, indent=1, sort_keys=True)
            fh.write("\n")
    svg = render_svg(series_from_rows(rows, x="param"), title=f"{method}: {label} sweep under rotation",
                     xlabel=label, log_x=axis == "lr")
    write_svg(os.path.join(out_dir, f"{name}.svg"), svg)
    return rows


# ---------------------------------------------------------------- growth

def growth_cohort(cfg):
    gc = cfg["growth_curve"]
    edges = np.asarray(gc["bins"], dtype=float)
    n = int(gc["count"])
    ph = cfg["phantoms"]
    vols, labs, growth, centers = [], [], [], []
    for b in range(len(edges) - 1):
        rng = np.random.default_rng(derive_seed(cfg["seed"], gc["seed"], b))
        base = derive_seed(cfg["seed"], gc["seed"], b, 1)
        for i in range(n):
            g = float(rng.uniform(edges[b], edges[b + 1]))
            v, lab = generate_phantom(PhantomSpec(size=int(ph["size"]), growth=g, noise=float(ph["noise"]),
                                                  bias=float(ph["bias"]), seed=base + i))
            vols.append(v)
            labs.append(lab)
            growth.append(g)
            centers.append(0.5 * (edges[b] + edges[b + 1]))
    return np.stack(vols), np.stack(labs), np.array(growth), np.array(centers)


def cmd_growth_curve(cfg, out_dir, *, checkpoint=None):
    """Base model and TTA methods on unshifted phantoms, per growth bin."""
    os.makedirs(out_dir, exist_ok=True)
    net = load_source(out_dir, checkpoint)
    atlas = make_atlas(cfg)
    vols, labs, growth, centers = growth_cohort(cfg)
    timer = _Timer()
    rows = []
    for c in np.unique(centers):
        idx = np.flatnonzero(centers == c)
        sub = evaluate_methods(cfg, net, atlas, vols[idx], labs[idx], growth[idx], "growth", c,
                               cfg["growth_curve"]["methods"], ["single_sample"], timer)
        offset = int(idx[0])
        for r in sub:
            r.sample_id += offset
        rows += sub
    rows = write_rows(os.path.join(out_dir, "growth_curve.csv"), rows)
    timer.write(os.path.join(out_dir, "growth_curve_timings.csv"))
    svg = render_svg(series_from_rows(rows), title="Dice across growth", week_axis=True)
    write_svg(os.path.join(out_dir, "growth_curve.svg"), svg)
    return rows


# ---------------------------------------------------------------- compare / plot

def cmd_compare(rows_a, rows_b, alpha=0.05):
    return compare_rows(rows_a, rows_b, alpha)


def cmd_plot(rows, out_path, *, x="magnitude", title="", week_axis=False):
    if not rows:
        raise ConfigError("CSV has no rows; nothing to plot")
    svg = render_svg(series_from_rows(rows, x=x), title=title, week_axis=week_axis,
                     xlabel="" if week_axis else x)
    write_svg(out_path, svg)
    return svg
