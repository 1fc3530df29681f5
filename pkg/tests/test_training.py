import numpy as np
import pytest
from sklearn.base import clone

from ttaseg import SourceSegmenter, TestTimeAdapter
from ttaseg.exceptions import ConfigError, DimensionError
from ttaseg.nn import build_reference_net, forward
from ttaseg.phantom import generate_cohort
from ttaseg.training import (
    TrainingSettings,
    _set_volume_stats,
    class_weights,
    recalibrate_batchnorm,
    train_source,
)

NOAUG = {"rotation": 0.0, "scaling": 0.0, "smoothing": 0.0, "gamma": 0.0}


@pytest.fixture(scope="module")
def cohort():
    vols, labs = zip(*generate_cohort(3, size=16, seed=7))
    return np.stack(vols), np.stack(labs)


def test_class_weights_against_manual():
    y = np.array([0, 0, 0, 1, 1, 3])
    w = class_weights(y, 4, 0.5)
    freq = np.array([3, 2, 0, 1]) / 6
    raw = np.array([freq[0] ** -0.5, freq[1] ** -0.5, 0.0, freq[3] ** -0.5])
    np.testing.assert_allclose(w, raw / np.sum(raw * freq))
    assert np.isclose(np.sum(w * freq), 1.0)
    np.testing.assert_allclose(class_weights(y, 4, 0.0), [1, 1, 0, 1])


@pytest.mark.parametrize("kw", [
    {"steps": -1}, {"batch_size": 0}, {"learning_rate": 0.0},
    {"augmentation": {"blur": 1.0}}, {"augmentation": {"rotation": -1.0}},
    {"steps": 5, "volume_stat_steps": 6},
])
def test_settings_rejected(kw):
    with pytest.raises(ConfigError):
        TrainingSettings(**kw)


def test_crop_must_match_pooling(cohort):
    net = build_reference_net(5, seed=0, width=4)
    with pytest.raises(ConfigError):
        train_source(net, *cohort, TrainingSettings(steps=1, crop=7))


def test_volume_stats_reproduce_batch_statistics(cohort):
    # running buffers filled from one volume must give the same output as
    # batch-statistic inference on that volume
    net = build_reference_net(5, seed=3, width=4).astype(np.float64)
    x = cohort[0][0].astype(np.float64)
    _set_volume_stats(net, x)
    with_buffers = forward(net, x[None, None])
    with_batch = forward(net, x[None, None], batch_stats=True)
    np.testing.assert_allclose(with_buffers, with_batch, rtol=1e-10, atol=1e-12)


def test_recalibrate_single_volume_uses_unbiased_variance(cohort):
    net = build_reference_net(5, seed=3, width=4).astype(np.float64)
    x = cohort[0][:1].astype(np.float64)
    recalibrate_batchnorm(net, x)
    forward(net, x[:, None], batch_stats=True)
    bn = net.layers[1]
    a = net.activation_cache[bn.inputs[0]]
    np.testing.assert_allclose(bn.buffers["running_mean"], a.mean(axis=(0, 2, 3, 4)))
    np.testing.assert_allclose(bn.buffers["running_var"], a.var(axis=(0, 2, 3, 4), ddof=1))


@pytest.mark.parametrize("volume_stat_steps", [0, 10])
def test_training_lowers_loss_and_is_deterministic(cohort, volume_stat_steps):
    def run():
        net = build_reference_net(5, seed=0, width=4)
        s = TrainingSettings(steps=30, learning_rate=1e-2, crop=8, augmentation=dict(NOAUG),
                             volume_stat_steps=volume_stat_steps, seed=5)
        return net, train_source(net, *cohort, s)

    net_a, rep_a = run()
    net_b, rep_b = run()
    assert len(rep_a.losses) == 30
    assert np.mean(rep_a.losses[-5:]) < np.mean(rep_a.losses[:5])
    assert rep_a.losses == rep_b.losses
    for n, p in net_a.parameters().items():
        assert np.array_equal(p, net_b.parameters()[n])


# estimators

def test_source_segmenter_params_and_clone():
    est = SourceSegmenter(steps=3, width=4)
    params = est.get_params()
    assert params["steps"] == 3 and params["width"] == 4
    twin = clone(est).set_params(steps=5)
    assert twin.steps == 5 and est.steps == 3


def test_estimators_fit_predict(cohort):
    X, y = cohort
    seg = SourceSegmenter(steps=4, width=4, crop=8, augmentation=NOAUG, volume_stat_steps=2,
                          recalibration_count=2, random_state=1).fit(X, y)
    assert seg.network_.source_importance is not None
    np.testing.assert_array_equal(seg.classes_, np.arange(5))
    proba = seg.predict_proba(X[:2])
    assert proba.shape == (2, 5, 16, 16, 16)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-5)
    labels = seg.predict(X[:2])
    assert labels.dtype == np.uint8 and labels.shape == (2, 16, 16, 16)
    assert 0.0 <= seg.score(X, y) <= 1.0

    before = {n: p.copy() for n, p in seg.network_.parameters().items()}
    tta = TestTimeAdapter(seg, strategy="tent").fit()
    assert tta.get_params()["strategy"] == "tent"
    out = tta.predict(X[:2])
    assert out.shape == (2, 16, 16, 16)
    assert len(tta.result_.predictions) == 2
    assert 0.0 <= tta.score(X[:2], y[:2]) <= 1.0
    for n, p in seg.network_.parameters().items():
        assert np.array_equal(p, before[n])


def test_estimator_errors(cohort):
    X, y = cohort
    with pytest.raises(DimensionError):
        SourceSegmenter(steps=1, crop=8).fit(X, y[:, :8])
    with pytest.raises(TypeError):
        TestTimeAdapter(network="not a net").fit()
    with pytest.raises(ConfigError):
        TestTimeAdapter(build_reference_net(5, width=4), strategy="nope").fit()
