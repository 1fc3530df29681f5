"""scikit-learn style wrappers around source training and test-time adaptation.

Volumes go in as ``(N, D, H, W)`` or ``(N, 1, D, H, W)`` arrays, label maps
as ``(N, D, H, W)`` integers. ``predict`` returns label maps and
``predict_proba`` class probabilities ``(N, C, D, H, W)``.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .adaptation import AdaptationConfig, cache_source_importance, predict_proba, run_adaptation
from .losses import mean_dice
from .nn import Network, build_reference_net
from .training import TrainingSettings, recalibrate_batchnorm, train_source
from .validation import check_label_maps, check_volumes


class SourceSegmenter(BaseEstimator):
    """Train the reference network on labelled volumes.

    After training, BatchNorm statistics are recalibrated on whole volumes and
    the source importance vector is cached, so ``network_`` is ready for
    :class:`TestTimeAdapter` with any strategy.
    """

    def __init__(self, num_classes=5, width=8, steps=1400, learning_rate=3e-3, batch_size=2, crop=32,
                 class_weight_power=0.5, augmentation=None, volume_stat_steps=800, decay_at=0.85,
                 lr_decay=0.2, recalibration_count=20, random_state=0):
        self.num_classes = num_classes
        self.width = width
        self.steps = steps
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.crop = crop
        self.class_weight_power = class_weight_power
        self.augmentation = augmentation
        self.volume_stat_steps = volume_stat_steps
        self.decay_at = decay_at
        self.lr_decay = lr_decay
        self.recalibration_count = recalibration_count
        self.random_state = random_state

    def _settings(self):
        extra = {} if self.augmentation is None else {"augmentation": dict(self.augmentation)}
        return TrainingSettings(steps=self.steps, learning_rate=self.learning_rate, decay_at=self.decay_at,
                                lr_decay=self.lr_decay, batch_size=self.batch_size, crop=self.crop,
                                class_weight_power=self.class_weight_power,
                                volume_stat_steps=self.volume_stat_steps, seed=self.random_state, **extra)

    def fit(self, X, y):
        X = check_volumes(X)
        y = check_label_maps(y, X, self.num_classes)
        settings = self._settings()
        net = build_reference_net(self.num_classes, seed=self.random_state, width=self.width)
        self.training_report_ = train_source(net, X, y, settings)
        recal = X[:max(1, self.recalibration_count)]
        recalibrate_batchnorm(net, recal)
        cache_source_importance(net, recal)
        self.network_ = net
        self.classes_ = np.arange(self.num_classes)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        return predict_proba(self.network_, X, batch_size=1)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1).astype(np.uint8)

    def score(self, X, y):
        """Mean foreground Dice over the volumes of ``X``."""
        X = check_volumes(X)
        y = check_label_maps(y, X, self.num_classes)
        return float(np.mean([mean_dice(p, t, self.num_classes) for p, t in zip(self.predict(X), y)]))


def _source_network(network):
    if isinstance(network, SourceSegmenter):
        check_is_fitted(network, "network_")
        return network.network_
    if isinstance(network, Network):
        return network
    raise TypeError("network must be a Network or a fitted SourceSegmenter")


class TestTimeAdapter(BaseEstimator):
    """Adapt a source network to each batch passed to ``predict``.

    ``fit`` only validates the settings and binds the source network; there
    is nothing to learn before target data arrive. Every ``predict`` call
    starts again from the pristine source weights. ``prior`` is the class
    ratio vector EntropyKL pulls towards (one vector, or one per volume in
    single-sample mode).
    """

    __test__ = False  # keep pytest from collecting this class

    def __init__(self, network=None, strategy="tent", learning_rate=None, num_passes=1, lam=1.0, m=1,
                 batch_mode="single_sample", batch_size=2, bn_stats_mode="batch", prior=None):
        self.network = network
        self.strategy = strategy
        self.learning_rate = learning_rate
        self.num_passes = num_passes
        self.lam = lam
        self.m = m
        self.batch_mode = batch_mode
        self.batch_size = batch_size
        self.bn_stats_mode = bn_stats_mode
        self.prior = prior

    def fit(self, X=None, y=None):
        self.network_ = _source_network(self.network)
        self.config_ = AdaptationConfig(strategy=self.strategy, learning_rate=self.learning_rate,
                                        num_passes=self.num_passes, lam=self.lam, m=self.m,
                                        batch_mode=self.batch_mode, batch_size=self.batch_size,
                                        bn_stats_mode=self.bn_stats_mode)
        return self

    def _run(self, X, y=None):
        check_is_fitted(self, "config_")
        X = check_volumes(X, dtype=self.network_.dtype)
        self.result_ = run_adaptation(self.network_, X, self.config_, prior=self.prior, labels=y)
        return self.result_

    def predict(self, X):
        """Adapted label maps ``(N, D, H, W)``; details land in ``result_``."""
        return self._run(X).predictions

    def score(self, X, y):
        """Mean foreground Dice of the adapted predictions."""
        return float(self._run(X, y).dice.mean())
