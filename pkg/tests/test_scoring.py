import numpy as np
import pytest
import torch

import oracles
from conftest import random_pyramid
from snl.errors import UsageError
from snl.losses import affinity_matrix, channel_distance_map
from snl.scoring import (
    affinity_anomaly_map,
    affinity_error,
    anomaly_map,
    feature_anomaly_map,
    image_score,
    upsample,
)

SHAPES = ((8, 8, 8), (8, 4, 4))


def test_feature_map_zero_for_identical(gen):
    pyr = random_pyramid(gen, 2, SHAPES)
    assert feature_anomaly_map(pyr, pyr, (16, 16)).abs().max() < 1e-6


def test_feature_map_single_full_resolution_block(gen):
    t, s = random_pyramid(gen, 2, ((3, 8, 8),)), random_pyramid(gen, 2, ((3, 8, 8),))
    assert torch.equal(feature_anomaly_map(t, s, (8, 8)), channel_distance_map(t[0], s[0]))


def test_feature_map_matches_oracle(gen):
    t, s = random_pyramid(gen, 2, SHAPES), random_pyramid(gen, 2, SHAPES)
    got = feature_anomaly_map(t, s, (16, 16)).numpy()
    np.testing.assert_allclose(got, oracles.feature_map(t, s, (16, 16)), atol=1e-5)


def test_out_hw_too_small(gen):
    pyr = random_pyramid(gen, 1, SHAPES)
    with pytest.raises(UsageError):
        feature_anomaly_map(pyr, pyr, (4, 4))
    with pytest.raises(UsageError):
        affinity_anomaly_map(pyr, pyr, (8, 4))


def test_upsample_bilinear_matches_oracle(gen):
    m = torch.randn(1, 3, 5, generator=gen, dtype=torch.float64)
    np.testing.assert_allclose(upsample(m, (7, 11))[0].numpy(), oracles.bilinear(m[0], 7, 11), atol=1e-12)


def test_affinity_error_arithmetic():
    a_s = torch.eye(2)
    a_t = torch.ones(2, 2)
    assert affinity_error(a_s, a_t).tolist() == [[0.0, 1.0], [1.0, 0.0]]
    assert torch.equal(affinity_error(a_t, a_t), torch.zeros(2, 2))


def test_affinity_error_symmetric(gen):
    t, s = random_pyramid(gen, 2, SHAPES), random_pyramid(gen, 2, SHAPES)
    e = affinity_error(affinity_matrix(s[0]), affinity_matrix(t[0]))
    assert torch.allclose(e, e.transpose(-1, -2), atol=1e-6)
    # row and column means therefore agree
    assert torch.allclose(e.mean(dim=-1), e.mean(dim=-2), atol=1e-6)


def test_affinity_map_two_location_case():
    # teacher: orthogonal locations; student: parallel -> E = [[0,1],[1,0]]
    t = torch.tensor([[1.0, 0.0], [0.0, 1.0]]).view(1, 2, 1, 2)
    s = torch.ones(1, 2, 1, 2)
    m = affinity_anomaly_map([t], [s], (1, 2))
    assert m.flatten().tolist() == pytest.approx([0.5, 0.5])


def test_affinity_map_zero_for_identical(gen):
    pyr = random_pyramid(gen, 2, SHAPES)
    assert affinity_anomaly_map(pyr, pyr, (16, 16)).abs().max() < 1e-6


@pytest.mark.parametrize("mode", ["abs", "squared"])
def test_affinity_map_matches_oracle(gen, mode):
    t, s = random_pyramid(gen, 2, SHAPES), random_pyramid(gen, 2, SHAPES)
    got = affinity_anomaly_map(t, s, (16, 16), mode).numpy()
    np.testing.assert_allclose(got, oracles.affinity_map(t, s, (16, 16), mode), atol=1e-5)


def test_anomaly_map_composition(gen):
    t, s = random_pyramid(gen, 2, SHAPES), random_pyramid(gen, 2, SHAPES)
    amap = anomaly_map(t, s, (16, 16))
    expected = oracles.feature_map(t, s, (16, 16)) + oracles.affinity_map(t, s, (16, 16))
    np.testing.assert_allclose(amap.s_al.numpy(), expected, atol=1e-5)
    assert torch.allclose(amap.s_al, amap.m_fea + amap.m_aff, atol=1e-6)
    assert (amap.s_al >= 0).all() and torch.isfinite(amap.s_al).all()


def test_additivity_with_separate_calls(gen):
    t, s = random_pyramid(gen, 2, SHAPES), random_pyramid(gen, 2, SHAPES)
    amap = anomaly_map(t, s, (16, 16))
    separate = feature_anomaly_map(t, s, (16, 16)) + affinity_anomaly_map(t, s, (16, 16))
    assert torch.allclose(amap.s_al, separate, atol=1e-6)


def test_smoothing_zero_equals_disabled(gen):
    t, s = random_pyramid(gen, 2, SHAPES), random_pyramid(gen, 2, SHAPES)
    a = anomaly_map(t, s, (16, 16), smoothing=None).s_al
    b = anomaly_map(t, s, (16, 16), smoothing=0.0).s_al
    assert torch.equal(a, b)


def test_smoothing_keeps_sum_and_mass(gen):
    t, s = random_pyramid(gen, 2, SHAPES), random_pyramid(gen, 2, SHAPES)
    amap = anomaly_map(t, s, (32, 32), smoothing=4.0)
    raw = anomaly_map(t, s, (32, 32))
    assert torch.allclose(amap.s_al, amap.m_fea + amap.m_aff, atol=1e-6)
    assert amap.s_al.max() <= raw.s_al.max() + 1e-9
    assert amap.s_al.std() < raw.s_al.std()


def test_feature_only_scoring(gen):
    t, s = random_pyramid(gen, 1, SHAPES), random_pyramid(gen, 1, SHAPES)
    amap = anomaly_map(t, s, (16, 16), use_affinity=False)
    assert torch.equal(amap.m_aff, torch.zeros_like(amap.m_aff))
    assert torch.equal(amap.s_al, amap.m_fea)


def test_zero_discrepancy_score(gen):
    pyr = random_pyramid(gen, 3, SHAPES)
    amap = anomaly_map(pyr, pyr, (16, 16))
    assert image_score(amap).abs().max() < 1e-6


def test_image_score_cases():
    m = torch.zeros(1, 5, 5)
    m[0, 2, 3] = 7.0
    assert image_score(m).item() == 7.0
    assert image_score(torch.full((2, 3, 3), 2.5)).tolist() == [2.5, 2.5]


def test_image_score_monotone(gen):
    m = torch.rand(4, 6, 6, generator=gen)
    bigger = m + torch.rand(4, 6, 6, generator=gen)
    assert (image_score(bigger) >= image_score(m)).all()


def test_resolution_covariance(gen):
    t, s = random_pyramid(gen, 2, SHAPES), random_pyramid(gen, 2, SHAPES)
    got = image_score(anomaly_map(t, s, (24, 24))).numpy()
    per_block = oracles.feature_map(t, s, (24, 24)) + oracles.affinity_map(t, s, (24, 24))
    np.testing.assert_allclose(got, per_block.reshape(2, -1).max(axis=1), atol=1e-5)
