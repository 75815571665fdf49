import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from afg_lab.afs import (afs_curve, channel_distribution, kl_divergence, layer_distance, noise_control_curve,
                         pair_metrics, read_curve_csv, successful, write_curve_csv)
from afg_lab.attacks import AttackConfig, attack_dataset
from afg_lab.classifier import batch_features
from afg_lab.errors import DegenerateError, FormatError, ValidationError

from helpers import kl_reference

nonneg = hnp.arrays(np.float64, (3, 3, 4), elements=st.one_of(st.just(0.0), st.floats(1e-3, 10)))


def test_distance_identity_and_scale():
    p = np.arange(1, 13, dtype=float).reshape(2, 2, 3)
    assert layer_distance(p, p) == 0
    assert layer_distance(p, 2 * p) == pytest.approx(1.0)
    assert layer_distance(p, np.zeros_like(p)) == pytest.approx(1.0)


def test_distance_zero_reference():
    with pytest.raises(DegenerateError):
        layer_distance(np.zeros((2, 2, 1)), np.ones((2, 2, 1)))


def test_kl_hand_value():
    # channel masses (0.75, 0.25) vs (0.5, 0.5)
    p = np.array([[[3.0, 1.0]]])
    q = np.array([[[1.0, 1.0]]])
    want = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
    assert want == pytest.approx(0.13081, abs=1e-5)
    assert kl_divergence(p, q, delta=0.0) == pytest.approx(want, rel=1e-12)
    assert kl_divergence(p, q) == pytest.approx(want, rel=1e-6)


def test_kl_identity_and_dead_channel():
    p = np.array([[[2.0, 0.0, 1.0]]])
    assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-12)
    # a channel dead only in p_hat stays finite thanks to delta
    assert np.isfinite(kl_divergence(p, np.array([[[2.0, 1.0, 0.0]]])))


def test_kl_rejects_negative_and_zero():
    with pytest.raises(ValidationError):
        kl_divergence(-np.ones((1, 1, 2)), np.ones((1, 1, 2)))
    with pytest.raises(DegenerateError):
        kl_divergence(np.zeros((1, 1, 2)), np.ones((1, 1, 2)))


@settings(max_examples=50, deadline=None)
@given(nonneg, nonneg)
def test_kl_matches_reference_and_is_nonnegative(p, q):
    if p.sum() == 0 or q.sum() == 0:
        return
    mu = channel_distribution(p, 1e-8).mass
    nu = channel_distribution(q, 1e-8).mass
    assert mu.sum() == pytest.approx(1.0)
    kl = kl_divergence(p, q)
    assert kl >= -1e-12
    assert kl == pytest.approx(kl_reference(mu, nu), rel=1e-9, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(nonneg, nonneg)
def test_batched_metrics_equal_scalar(p, q):
    if p.sum() == 0 or q.sum() == 0:
        return
    d, k = pair_metrics([p[None]], [q[None]])
    assert d[0][0] == pytest.approx(layer_distance(p, q), rel=1e-12)
    assert k[0][0] == pytest.approx(kl_divergence(p, q), rel=1e-9, abs=1e-12)


def test_curve_matches_per_pair_mean(toy_model, toy_split):
    recs = successful(attack_dataset(toy_model, toy_split.test, AttackConfig("FGSM", 0.1)))
    assert recs
    curve = afs_curve(toy_model, recs)
    assert curve.n_pairs == len(recs) and curve.layer_names == toy_model.layer_names
    fa = batch_features(toy_model, np.stack([r.original.pixels for r in recs]))
    fb = batch_features(toy_model, np.stack([r.adversarial for r in recs]))
    for li in range(toy_model.num_layers):
        want = np.mean([layer_distance(a, b) for a, b in zip(fa[li], fb[li])])
        assert curve.mean_distance[li] == pytest.approx(want, rel=1e-9)


def test_zero_perturbation_curve_is_flat(toy_model, toy_split):
    recs = attack_dataset(toy_model, toy_split.test[:6], AttackConfig("FGSM", 0.0))
    curve = afs_curve(toy_model, recs)
    assert curve.mean_distance == [0.0] * toy_model.num_layers
    noise = noise_control_curve(toy_model, recs)
    assert noise.mean_distance == [0.0] * toy_model.num_layers


def test_empty_records():
    with pytest.raises(ValidationError):
        afs_curve(None, [])


def test_csv_round_trip(toy_model, toy_split, tmp_path):
    recs = successful(attack_dataset(toy_model, toy_split.test, AttackConfig("FGSM", 0.1)))
    curve = afs_curve(toy_model, recs)
    back = read_curve_csv(write_curve_csv(curve, tmp_path / "c.csv"))
    assert back.mean_distance == curve.mean_distance and back.mean_kl == curve.mean_kl
    assert back.n_pairs == curve.n_pairs
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(FormatError):
        read_curve_csv(tmp_path / "bad.csv")
