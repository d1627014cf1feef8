"""Tests for the Fréchet distance and the fixed feature networks."""

import numpy as np
import pytest

from worldplan.errors import CheckpointError
from worldplan.eval.frechet import (
    FeatureNets,
    feature_samples,
    fit_feature_nets,
    fit_gaussian,
    frechet_distance,
    frechet_feature_distance,
)


@pytest.fixture
def gaussian():
    """Return the fit of a well-conditioned random sample."""
    rng = np.random.default_rng(0)
    return fit_gaussian(rng.normal(size=(500, 4)) @ rng.normal(size=(4, 4)))


def test_identical_gaussians(gaussian):
    """A Gaussian is at distance zero from itself."""
    result = frechet_distance(*gaussian, *gaussian)
    assert result.distance == pytest.approx(0.0, abs=1e-6)
    assert result.regularization == 0.0


def test_shifted_mean(gaussian):
    """Equal covariances leave only the squared mean offset."""
    mu, sigma = gaussian
    shift = np.array([1.0, -2.0, 0.5, 0.0])
    result = frechet_distance(mu, sigma, mu + shift, sigma)
    assert result.distance == pytest.approx(float(shift @ shift), rel=1e-6)


def test_diagonal_closed_form():
    """For diagonal covariances the distance is a sum of root differences."""
    a, b = np.array([1.0, 4.0, 9.0]), np.array([4.0, 1.0, 9.0])
    result = frechet_distance(np.zeros(3), np.diag(a), np.ones(3), np.diag(b))
    expected = 3.0 + float(np.sum((np.sqrt(a) - np.sqrt(b)) ** 2))
    assert result.distance == pytest.approx(expected)


def test_symmetry(gaussian):
    """Swapping the arguments does not change the distance."""
    mu, sigma = gaussian
    other = (mu + 1.0, sigma * 2.0)
    forward = frechet_distance(*gaussian, *other).distance
    backward = frechet_distance(*other, *gaussian).distance
    assert forward == pytest.approx(backward, rel=1e-6)


def test_singular_covariance_is_regularized():
    """A rank-deficient covariance gets eps on the diagonal, reported back."""
    rng = np.random.default_rng(1)
    features = rng.normal(size=(3, 5))
    mu, sigma = fit_gaussian(features)
    result = frechet_distance(mu, sigma, mu, sigma, eps=1e-6)
    assert result.regularization == 1e-6
    assert result.distance == pytest.approx(0.0, abs=1e-6)


def test_mismatched_shapes():
    """Gaussians of different dimension cannot be compared."""
    with pytest.raises(ValueError):
        frechet_distance(np.zeros(2), np.eye(2), np.zeros(3), np.eye(3))
    with pytest.raises(ValueError):
        fit_gaussian(np.zeros((1, 4)))


@pytest.fixture
def nets():
    """Return feature networks fitted briefly on random rasters."""
    rng = np.random.default_rng(0)
    images = rng.uniform(size=(8, 16, 16, 3)).astype(np.float32)
    clips = rng.uniform(size=(8, 2, 16, 16, 3)).astype(np.float32)
    return fit_feature_nets(images, clips, iterations=2, batch_size=4)


def test_feature_nets_save_load(nets, tmp_path):
    """Saved networks reload with the same checksum; tampering is caught."""
    path = nets.save(tmp_path / "feature_nets.pt")
    loaded = FeatureNets.load(path)
    assert loaded.checksum == nets.checksum
    with pytest.raises(CheckpointError):
        FeatureNets.load(tmp_path / "absent.pt")


def test_feature_distance(nets):
    """Feature distances are zero on identical sets and positive otherwise."""
    rng = np.random.default_rng(2)
    real = rng.uniform(size=(6, 16, 16, 3)).astype(np.float32)
    same = frechet_feature_distance(real, real, "image", nets)
    assert same.distance == pytest.approx(0.0, abs=1e-4)
    assert same.samples == 6
    dark = frechet_feature_distance(real, real * 0.1, "image", nets)
    assert dark.distance > 0.0
    clips = rng.uniform(size=(4, 2, 16, 16, 3)).astype(np.float32)
    assert nets.features(clips, "video").shape == (4, 16)
    with pytest.raises(ValueError):
        frechet_feature_distance(real[:1], real, "image", nets)
    with pytest.raises(ValueError):
        nets.features(real, "audio")


def test_feature_samples():
    """Images and clips are drawn from single views of the episodes."""
    episode = np.zeros((10, 3, 16, 16, 3), dtype=np.uint8)
    episode[:, 1] = 255
    images, clips = feature_samples([episode], clip_frames=4, limit=5)
    assert images.shape == (5, 16, 16, 3)
    assert clips.shape == (5, 4, 16, 16, 3)
    assert images.max() <= 1.0
    with pytest.raises(ValueError):
        feature_samples([episode[:3]], clip_frames=4, limit=1)
