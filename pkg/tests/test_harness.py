import json
import math
import os

import numpy as np
import pytest
import yaml
from scipy import stats

from ttaseg.exceptions import ConfigError
from ttaseg.harness import load_config
from ttaseg.harness.cli import main
from ttaseg.harness.commands import derive_seed
from ttaseg.harness.plot import render_svg, series_from_rows
from ttaseg.harness.results import COLUMNS, ResultRow, paired_t_test, read_rows, write_rows
from ttaseg.nn import load_checkpoint

TINY = {
    "phantoms": {"size": 16, "train": {"count": 4}, "test": {"count": 3}, "atlas": {"count": 4}},
    "training": {"steps": 4, "volume_stat_steps": 2, "crop": 8, "recalibration_count": 2},
    "grids": {"rotation": [0, 30], "scaling": [0, 0.4], "smoothing": [0, 2], "gamma": [0, 1.2]},
    "sweeps": {"count": 2, "rotations": [30], "lambda": [0, 1], "lr": [1e-4, 1e-3]},
    "growth_curve": {"count": 2},
}


def _write_cfg(path, cfg):
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    """A trained tiny source model in its own output directory."""
    root = tmp_path_factory.mktemp("tiny")
    cfg = _write_cfg(root / "tiny.yaml", TINY)
    out = str(root / "out")
    assert main(["--config", cfg, "--out", out, "train-source"]) == 0
    return cfg, out


# config

def test_default_config_is_valid():
    cfg = load_config()
    assert cfg["adaptation"]["tent"]["learning_rate"] == 1e-3
    assert cfg["adaptation"]["layer_inspect"]["learning_rate"] == 1e-4
    assert {1e-3, 1e-4} <= set(cfg["sweeps"]["lr"])
    assert 0 in cfg["sweeps"]["lambda"]
    for kind, x in cfg["training"]["augmentation"].items():
        assert x <= 0.4 * max(cfg["grids"][kind])


@pytest.mark.parametrize("override", [
    {"nonsense": 1},
    {"training": {"stepz": 3}},
    {"grids": {"rotation": []}},
    {"grids": {"gamma": [0, -1]}},
    {"training": {"augmentation": {"rotation": 45}}},
    {"sweeps": {"lambda": []}},
    {"adaptation": {"methods": ["magic"]}},
    {"adaptation": {"tent": {"learning_rate": -1}}},
    {"growth_curve": {"bins": [0, 0.5, 1]}},
    {"phantoms": {"size": 15}},
])
def test_config_errors(tmp_path, override):
    with pytest.raises(ConfigError):
        load_config(_write_cfg(tmp_path / "c.yaml", override))


def test_config_seed_override(tmp_path):
    assert load_config(seed=42)["seed"] == 42


@pytest.mark.parametrize("text", ["a: [1, 2", "- 1\n- 2\n"])
def test_config_malformed_file(tmp_path, text):
    p = tmp_path / "bad.yaml"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(str(p))


def test_cli_config_error_exit_code(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "c.yaml", {"grids": {"rotation": []}})
    assert main(["--config", cfg, "--out", str(tmp_path), "train-source"]) == 2
    assert "rotation" in capsys.readouterr().err
    assert main(["--config", str(tmp_path / "missing.yaml"), "train-source"]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_numeric_failure_exit_code(tmp_path, capsys):
    cfg = dict(TINY, training={"steps": 3, "volume_stat_steps": 1, "crop": 8, "recalibration_count": 2, "learning_rate": 1e38})
    path = _write_cfg(tmp_path / "c.yaml", cfg)
    assert main(["--config", path, "--out", str(tmp_path / "o"), "train-source"]) == 3
    assert "non-finite" in capsys.readouterr().err


def test_cli_missing_checkpoint(tmp_path):
    cfg = _write_cfg(tmp_path / "c.yaml", TINY)
    assert main(["--config", cfg, "--out", str(tmp_path / "empty"), "adapt-eval"]) == 2


def test_derive_seed_is_stable():
    assert derive_seed(0, 7, 1, 3) == derive_seed(0, 7, 1, 3)
    assert derive_seed(0, 7, 1, 3) != derive_seed(0, 7, 1, 4)
    assert 0 <= derive_seed(123) < 2 ** 63


# training / checkpoint

def test_train_source_outputs(tiny, tmp_path):
    cfg, out = tiny
    net = load_checkpoint(os.path.join(out, "source.ttck"))
    assert net.source_importance is not None
    assert b"THTE" in open(os.path.join(out, "source.ttck"), "rb").read()
    again = str(tmp_path / "again")
    assert main(["--config", cfg, "--out", again, "train-source"]) == 0
    with open(os.path.join(out, "source.ttck"), "rb") as a, open(os.path.join(again, "source.ttck"), "rb") as b:
        assert a.read() == b.read()


# adapt-eval

def test_adapt_eval_rows_and_determinism(tiny, tmp_path):
    cfg, out = tiny
    ck = os.path.join(out, "source.ttck")
    runs = []
    for name in ("a", "b"):
        d = str(tmp_path / name)
        assert main(["--config", cfg, "--out", d, "adapt-eval", "--checkpoint", ck,
                     "--kinds", "rotation", "gamma"]) == 0
        runs.append(d)
    a = open(os.path.join(runs[0], "adapt_eval.csv"), "rb").read()
    assert a == open(os.path.join(runs[1], "adapt_eval.csv"), "rb").read()
    rows = read_rows(os.path.join(runs[0], "adapt_eval.csv"))
    # methods x modes x kinds x magnitudes x samples
    assert len(rows) == 5 * 2 * 2 * 2 * 3
    assert all(0 <= r.mean_dice <= 1 for r in rows)
    keys = {(r.method, r.mode, r.shift_kind, r.magnitude, r.sample_id) for r in rows}
    assert len(keys) == len(rows)
    timings = open(os.path.join(runs[0], "adapt_eval_timings.csv")).readline()
    assert "ms" in timings
    assert os.path.exists(os.path.join(runs[0], "adapt_eval_rotation_single_sample.svg"))


def test_unshifted_base_matches_in_distribution_dice(tiny, tmp_path):
    cfg, out = tiny
    d = str(tmp_path / "e")
    main(["--config", cfg, "--out", d, "adapt-eval", "--checkpoint", os.path.join(out, "source.ttck"),
          "--kinds", "rotation"])
    rows = [r for r in read_rows(os.path.join(d, "adapt_eval.csv"))
            if r.method == "none" and r.magnitude == 0 and r.mode == "single_sample"]
    report = dict(line.strip().split(",") for line in open(os.path.join(out, "train_report.csv")))
    assert np.mean([r.mean_dice for r in rows]) == pytest.approx(float(report["mean_dice"]), abs=1e-9)


# sweeps

def test_lambda_sweep_zero_matches_tent(tiny, tmp_path):
    cfg, out = tiny
    d = str(tmp_path / "s")
    assert main(["--config", cfg, "--out", d, "sweep", "--axis", "lambda",
                 "--checkpoint", os.path.join(out, "source.ttck")]) == 0
    rows = read_rows(os.path.join(d, "sweep_lambda.csv"))
    tent = {r.sample_id: r for r in rows if r.method == "tent"}
    zero = {r.sample_id: r for r in rows if r.param == "lambda=0"}
    assert tent and set(tent) == set(zero)
    for sid in tent:
        assert tent[sid].mean_dice == zero[sid].mean_dice
        assert tent[sid].entropy_post == zero[sid].entropy_post
    svg = open(os.path.join(d, "sweep_lambda.svg")).read()
    assert svg.startswith("<svg")


def test_m_sweep_full_m_updates_every_layer(tiny, tmp_path):
    cfg, out = tiny
    d = str(tmp_path / "m")
    assert main(["--config", cfg, "--out", d, "sweep", "--axis", "m",
                 "--checkpoint", os.path.join(out, "source.ttck")]) == 0
    audit = json.load(open(os.path.join(d, "sweep_m_mask_audit.json")))
    full = [a for a in audit if a["param"] == "m=7"]
    assert full and all(a["selected_layers"] == [0, 1, 4, 5, 9, 10, 12] for a in full)


# growth curve

def test_growth_curve_outputs(tiny, tmp_path):
    cfg, out = tiny
    d = str(tmp_path / "g")
    assert main(["--config", cfg, "--out", d, "growth-curve",
                 "--checkpoint", os.path.join(out, "source.ttck")]) == 0
    rows = read_rows(os.path.join(d, "growth_curve.csv"))
    assert sorted({r.magnitude for r in rows}) == pytest.approx([0.1, 0.3, 0.5, 0.7, 0.9])
    svg = open(os.path.join(d, "growth_curve.svg")).read()
    assert "18.8" in svg and "25.2" in svg and "gestational week" in svg


# compare

def _rows(dice, method="none"):
    return [ResultRow(method, "single_sample", "rotation", 30.0, i, d, d, d, d, d, 0.1, 0.1)
            for i, d in enumerate(dice)]


def test_compare_identical():
    c = paired_t_test([0.5, 0.6, 0.7], [0.5, 0.6, 0.7])
    assert (c.t_statistic, c.p_value, c.significant) == (0.0, 1.0, False)


def test_compare_constant_offset():
    a = np.linspace(0.3, 0.6, 30)
    c = paired_t_test(a, a + 0.1)
    assert c.zero_variance and c.p_value == 0.0 and c.t_statistic == math.inf and c.significant
    exact = paired_t_test(np.full(30, 0.25), np.full(30, 0.5))
    assert exact.zero_variance and exact.p_value == 0.0 and math.isinf(exact.t_statistic)
    assert "zero variance" in exact.report()


def test_compare_hand_computed_five_pairs():
    a = np.array([0.60, 0.55, 0.70, 0.40, 0.65])
    b = np.array([0.70, 0.75, 0.70, 0.70, 0.75])
    d = b - a  # 0.1, 0.2, 0.0, 0.3, 0.1
    # mean 0.14, sample variance 0.052 / 4
    t = 0.14 / math.sqrt(0.052 / 4 / 5)
    c = paired_t_test(a, b)
    assert c.t_statistic == pytest.approx(t, abs=1e-6)
    assert c.p_value == pytest.approx(2 * stats.t.sf(t, df=4), abs=1e-6)
    assert c.mean_difference == pytest.approx(d.mean())


def test_cli_compare(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_rows(a, _rows([0.5, 0.6, 0.7]))
    write_rows(b, _rows([0.5, 0.6, 0.7]))
    assert main(["compare", str(a), str(b)]) == 0
    out = capsys.readouterr().out
    assert "t: 0" in out and "p (two-sided): 1" in out


# CSV and plots

def test_csv_round_trip_and_header(tmp_path):
    p = tmp_path / "r.csv"
    rows = _rows([0.25, 0.375])
    write_rows(p, rows[::-1])
    assert open(p).readline().strip() == ",".join(COLUMNS)
    assert read_rows(p) == sorted(rows, key=ResultRow.sort_key)


def test_plot_deterministic(tmp_path):
    p = tmp_path / "r.csv"
    write_rows(p, _rows([0.4, 0.6]) + _rows([0.5, 0.7], method="tent"))
    outs = []
    for name in ("x.svg", "y.svg"):
        assert main(["plot", str(p), "--output", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]


def test_plot_single_method_one_line_one_band():
    svg = render_svg(series_from_rows(_rows([0.4, 0.6])))
    assert svg.count("<polyline") == 1 and svg.count("<polygon") == 1


def test_plot_empty_csv_errors_without_file(tmp_path):
    p = tmp_path / "empty.csv"
    write_rows(p, [])
    target = tmp_path / "out.svg"
    assert main(["plot", str(p), "--output", str(target)]) == 2
    assert not target.exists()
