import warnings

import numpy as np
import pytest

from knowledge_exposure.encoders import make_backend
from knowledge_exposure.errors import ConfigurationError, ValidationError
from knowledge_exposure.evaluation import auroc
from knowledge_exposure.scoring import ScorerConfig, decision_values, fit_scorer, raw_feature_baseline, score


def cluster(n=200, d=16, spread=0.1, seed=0):
    rng = np.random.default_rng(seed)
    u = np.zeros(d)
    u[0] = 1.0
    return u, u + spread * rng.normal(size=(n, d))


def test_defaults():
    cfg = ScorerConfig()
    assert (cfg.kernel, cfg.nu, cfg.gamma, cfg.coef0) == ("sigmoid", 0.1, None, 0.0)
    model = fit_scorer(cluster()[1])
    assert model.svm.gamma == pytest.approx(1 / 16)


@pytest.mark.parametrize("nu", [0.05, 0.1, 0.3])
def test_nu_bounds_the_training_outlier_fraction(nu):
    _, x = cluster(seed=1)
    model = fit_scorer(x, ScorerConfig(nu=nu))
    dv = decision_values(model, x)
    assert np.mean(dv < 0) <= nu + 0.02
    assert len(model.svm.support_) / len(x) >= nu - 0.02


def test_centroid_is_normal_and_opposite_direction_is_anomalous():
    u, x = cluster(seed=2)
    model = fit_scorer(x)
    out = score(model, np.stack([u, -100 * u]), ["centre", "far"])
    assert out[0].binary_label == 1 and out[1].binary_label == -1
    assert out[1].anomaly_score > out[0].anomaly_score
    assert out[0].anomaly_score == pytest.approx(-out[0].decision_value)


def test_scores_rise_as_points_rotate_away_from_the_cluster():
    u, x = cluster(seed=3)
    model = fit_scorer(x)
    v = np.zeros(16)
    v[1] = 1.0
    angles = np.linspace(0, np.pi, 7)
    pts = np.stack([np.cos(t) * u + np.sin(t) * v for t in angles])
    s = [a.anomaly_score for a in score(model, pts)]
    assert all(b > a for a, b in zip(s, s[1:]))


def test_unnormalized_mode_sees_scale():
    u, x = cluster(seed=4)
    model = fit_scorer(x, ScorerConfig(normalize=False, kernel="rbf", gamma=1.0))
    near, far = score(model, np.stack([u, 100 * u]))
    assert near.binary_label == 1 and far.binary_label == -1


def test_validation():
    _, x = cluster()
    model = fit_scorer(x)
    with pytest.raises(ValidationError):
        score(model, np.zeros((2, 8)))
    with pytest.raises(ValidationError):
        fit_scorer(x[:5])
    with pytest.raises(ValidationError):
        score(model, x[:2], ["only-one"])
    with pytest.raises(ConfigurationError):
        ScorerConfig(nu=0)
    with pytest.raises(ConfigurationError):
        ScorerConfig(feature_source="other")


def test_constant_features_warn_and_still_fit():
    x = np.ones((20, 4))
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        model = fit_scorer(x)
    assert any(issubclass(w.category, RuntimeWarning) for w in rec)
    assert np.isfinite(decision_values(model, x)).all()


def test_raw_baseline_separates_different_object_classes(tiny_dataset):
    from knowledge_exposure.transforms import ImageBatch

    train = tiny_dataset.class_images("car", "train")
    car, fruit = tiny_dataset.class_images("car", "test"), tiny_dataset.class_images("fruit", "test")
    test = ImageBatch(np.concatenate([car.pixels, fruit.pixels]), car.sample_ids + fruit.sample_ids)
    out = raw_feature_baseline(make_backend("pixels"), train, test)
    labels = [0] * len(car) + [1] * len(fruit)
    assert auroc([s.anomaly_score for s in out], labels) > 0.9
