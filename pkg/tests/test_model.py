import math

import numpy as np
import pytest
from scipy.integrate import quad, trapezoid
from scipy.stats import norm

from conftest import random_model, synthetic_dataset
from tabflow.data import Preprocessor, SchemaDeclaration
from tabflow.encoder import EncoderConfig
from tabflow.errors import ConfigurationError, NumericError, StructuralError
from tabflow.model import (DensityModel, FlowConfig, TrainConfig, gaussian_log_density, load, log_density, nll_loss,
                           predict_point, predictive_std, sample, save, train)
from tabflow.optim import finite_difference_check
from tabflow.rng import Rng

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def with_target(pre, mean, std):
    return Preprocessor(pre.declaration, pre.numeric_stats, pre.categories, mean, std, pre.fingerprint)


def identity_model(dataset, mean=0.0, std=1.0, head="spline"):
    pre = with_target(dataset.preprocessor, mean, std)
    return DensityModel.init(pre, EncoderConfig(embed_dim=4, n_blocks=1), FlowConfig(head=head), Rng(0)).eval()


def test_configs_validate():
    with pytest.raises(ConfigurationError):
        FlowConfig(head="mixture")
    with pytest.raises(ConfigurationError):
        FlowConfig(n_layers=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=1)
    with pytest.raises(ConfigurationError):
        TrainConfig(patience=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(val_fraction=1.0)
    assert FlowConfig(n_bins=8, n_layers=2).head_width == 46
    assert FlowConfig(head="gaussian").head_width == 2


def test_head_shape_and_scale_checked(dataset):
    m = identity_model(dataset)
    assert m.params["head.w"].shape == (m.encoder.width, 23)
    with pytest.raises(StructuralError):
        DensityModel(m.encoder, FlowConfig(n_bins=4), m.preprocessor, {"head.w": np.zeros((12, 23)),
                                                                       "head.b": np.zeros(23)})
    with pytest.raises(StructuralError):
        identity_model(dataset, std=0.0)


def test_identity_flow_density_is_standard_normal(dataset):
    m = identity_model(dataset)
    y = np.linspace(-5, 5, len(dataset))
    np.testing.assert_allclose(log_density(m, dataset, y), norm.logpdf(y), atol=1e-12)


def test_standardisation_identity(dataset):
    m = random_model(dataset, seed=3)
    dist = m.predictive(dataset)
    y = dataset.y_raw
    ys = (y - m.target_mean) / m.target_std
    z, lad = dist._to_base(y)
    standardised = -HALF_LOG_2PI - 0.5 * z * z + lad
    np.testing.assert_allclose(dist.log_density(y), standardised - math.log(m.target_std), atol=1e-12)
    assert np.allclose(-nll_loss(m, dataset), standardised.mean(), atol=1e-12)
    assert ys.shape == y.shape


@pytest.mark.parametrize("head", ["spline", "gaussian"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_density_integrates_to_one(dataset, head, seed):
    m = random_model(dataset, seed=seed, head=head, n_layers=2, scale=0.5)
    dist = m.predictive(dataset.subset(range(5)))
    grid = np.linspace(m.target_mean - 10 * m.target_std, m.target_mean + 10 * m.target_std, 20001)
    dens = np.exp(dist.log_density(np.tile(grid, (5, 1))))
    mass = trapezoid(dens, grid, axis=1)
    assert np.all(np.abs(mass - 1) < 1e-3), mass


def test_sharp_density_integrates_to_one_with_adaptive_quadrature(dataset):
    """Peaks narrower than a uniform grid can resolve; split quad at the knot images instead."""
    m = random_model(dataset, seed=0, n_layers=1, scale=2.0)
    dist = m.predictive(dataset.subset(range(3)))
    lo, hi = m.target_mean - 10 * m.target_std, m.target_mean + 10 * m.target_std
    for r in range(3):
        d = dist[r]
        knots = d.layers[0].knot_y[0] * m.target_std + m.target_mean
        edges = np.concatenate([[lo], knots, [hi]])
        f = lambda y: float(np.exp(d.log_density(np.array([y]))[0]))  # noqa: E731
        mass = sum(quad(f, a, b, limit=200, epsabs=1e-12)[0] for a, b in zip(edges[:-1], edges[1:]))
        assert abs(mass - 1) < 1e-6


def test_density_is_derivative_of_cdf(dataset):
    m = random_model(dataset, seed=4, n_layers=2)
    dist = m.predictive(dataset.subset(range(8)))
    y = dist.median() + 0.3 * m.target_std
    h = 1e-5 * m.target_std
    fd = (dist.cdf(y + h) - dist.cdf(y - h)) / (2 * h)
    np.testing.assert_allclose(np.exp(dist.log_density(y)), fd, rtol=1e-4)


def test_nll_loss_examples(dataset):
    m = identity_model(dataset)
    assert nll_loss(m, dataset, np.zeros(len(dataset))) == pytest.approx(HALF_LOG_2PI, abs=1e-14)
    m = random_model(dataset, seed=5)
    sub = dataset.subset(range(10))
    doubled = dataset.subset(list(range(10)) * 2)
    assert nll_loss(m, sub) == pytest.approx(nll_loss(m, doubled), abs=1e-13)
    with pytest.raises(StructuralError):
        nll_loss(m, dataset.subset([0]), train=True)


def test_initial_loss_equals_mean_standard_normal_nll(dataset):
    m = identity_model(dataset, mean=dataset.preprocessor.target_mean, std=dataset.preprocessor.target_std)
    ref = np.mean(-norm.logpdf(dataset.y))
    assert abs(nll_loss(m, dataset) - ref) < 1e-10


@pytest.mark.parametrize("head", ["spline", "gaussian"])
def test_full_gradient_matches_finite_differences(dataset, head):
    m = random_model(dataset, seed=6, head=head, n_layers=2, embed_dim=3, dropout=0.2)
    batch = dataset.subset(range(4))

    def loss(g, p):
        return m.loss_graph(g, p, batch.x_num, batch.x_cat, batch.y, train=True, rng=Rng(11))

    assert finite_difference_check(loss, m.params) < 1e-4


def test_gaussian_head_density(dataset):
    m = identity_model(dataset, head="gaussian")
    assert gaussian_log_density(m, dataset.subset([0]), [0.0])[0] == pytest.approx(-HALF_LOG_2PI, abs=1e-15)
    m = identity_model(dataset, mean=2.0, std=3.0, head="gaussian")
    m.params["head.b"][:] = [0.5, math.log(0.25)]
    y = np.linspace(-3, 5, len(dataset))
    ref = norm.logpdf(y, 3.0 * 0.5 + 2.0, 3.0 * 0.5)
    np.testing.assert_allclose(gaussian_log_density(m, dataset, y), ref, atol=1e-12)
    with pytest.raises(StructuralError):
        gaussian_log_density(identity_model(dataset), dataset, y)


def test_sampling_moments_and_determinism(dataset):
    m = identity_model(dataset, mean=5.0, std=2.0)
    one = dataset.subset([0])
    s = sample(m, one, 100_000, Rng(0))[0]
    assert abs(s.mean() - 5) < 0.02 and abs(s.std() - 2) < 0.02
    assert sample(m, one, 0, Rng(0)).shape == (1, 0)
    np.testing.assert_array_equal(sample(m, one, 10, Rng(4)), sample(m, one, 10, Rng(4)))


def test_point_predictions(dataset):
    m = identity_model(dataset, mean=5.0, std=2.0)
    one = dataset.subset([0])
    assert predict_point(m, one, "median")[0] == 5.0
    assert abs(predict_point(m, one, "mean", 1000, Rng(1))[0] - 5.0) < 4 * 2 / math.sqrt(1000)
    assert abs(predictive_std(m, one, 1000, Rng(2))[0] - 2.0) < 0.1
    with pytest.raises(StructuralError):
        predictive_std(m, one, 1, Rng(2))
    with pytest.raises(StructuralError):
        predict_point(m, one, "mode")


def test_median_is_the_sample_median(dataset):
    m = random_model(dataset, seed=8, n_layers=2, scale=2.0)
    dist = m.predictive(dataset.subset([3]))
    s = dist.sample(100_000, Rng(9))[0]
    dens = math.exp(dist.log_density(dist.median())[0])
    se = math.sqrt(0.25 / len(s)) / dens
    assert abs(np.median(s) - dist.median()[0]) < 3 * se


def test_near_delta_spline_has_small_std(dataset):
    m = identity_model(dataset)
    k = m.flow.n_bins
    # One very wide input bin mapped onto one very narrow output bin.
    m.params["head.b"][:k] = 0.0
    m.params["head.b"][k // 2] = 8.0
    m.params["head.b"][k:2 * k] = 0.0
    m.params["head.b"][k + k // 2] = -8.0
    std = predictive_std(m, dataset.subset([0]), 1000, Rng(0))[0]
    assert 0 < std < 0.2


def test_eval_mode_is_bitwise_repeatable(dataset):
    m = random_model(dataset, seed=10)
    a = log_density(m, dataset, dataset.y_raw)
    b = log_density(m, dataset, dataset.y_raw)
    assert a.tobytes() == b.tobytes()
    with pytest.raises(NumericError):
        log_density(m, dataset.subset([0]), [np.inf])


def test_save_load_round_trip_is_bitwise(dataset, tmp_path):
    m = random_model(dataset, seed=12, n_layers=2)
    m.encoder.buffers["block0"]["mean"][:] = 0.3
    save(m, tmp_path / "model.bin")
    back = load(tmp_path / "model.bin")
    y = dataset.y_raw + np.random.default_rng(0).normal(size=len(dataset))
    assert log_density(m, dataset, y).tobytes() == log_density(back, dataset, y).tobytes()
    assert back.flow == m.flow and back.schema == m.schema and back.preprocessor == m.preprocessor
    (tmp_path / "junk.bin").write_bytes(b"not a model")
    with pytest.raises(StructuralError):
        load(tmp_path / "junk.bin")


def test_training_learns_a_location_shift():
    ds = synthetic_dataset(600, seed=1)
    cfg = TrainConfig(batch_size=128, max_epochs=40, patience=5, lr=3e-3, seed=0,
                      encoder=EncoderConfig(embed_dim=4, n_blocks=1, hidden_mult=1.0, dropout=0.0))
    model, history = train(ds, cfg)
    assert len(history) >= 2 and set(history[0]) == {"epoch", "train_nll", "val_nll"}
    assert min(r["val_nll"] for r in history) < history[0]["val_nll"] - 0.5
    best = min(history, key=lambda r: r["val_nll"])
    model2, history2 = train(ds, cfg)
    assert history == history2
    np.testing.assert_array_equal(model.params["head.w"], model2.params["head.w"])
    assert best["epoch"] <= len(history) - 1


def test_training_terminates_with_huge_learning_rate():
    ds = synthetic_dataset(100, seed=2)
    cfg = TrainConfig(batch_size=32, max_epochs=500, patience=1, lr=10.0,
                      encoder=EncoderConfig(embed_dim=2, n_blocks=1, hidden_mult=1.0))
    try:
        _, history = train(ds, cfg)
    except NumericError as err:
        assert "epoch" in str(err)
    else:
        assert len(history) < 500


def test_training_input_checks():
    ds = synthetic_dataset(50)
    with pytest.raises(StructuralError):
        train(ds.subset([]), TrainConfig())
    with pytest.raises(StructuralError):
        train(ds, TrainConfig(), validation=ds.subset([]))
