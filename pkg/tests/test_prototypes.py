import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protomil.prototypes import (
    PrototypeBank,
    SoftLabelStore,
    init_prototypes,
    init_soft_labels,
    kl_instance_loss,
    momentum_update_label,
    prototype_ema_update,
    restricted_assign,
)
from protomil.synth import SynthConfig, generate_dataset


def test_init_unit_and_reproducible():
    a = init_prototypes(4, 16, seed=3)
    np.testing.assert_allclose(np.linalg.norm(a.mu, axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(a.mu, init_prototypes(4, 16, seed=3).mu)


def test_init_high_dim_near_orthogonal():
    mu = init_prototypes(5, 10_000, seed=0).mu
    gram = mu @ mu.T
    assert np.max(np.abs(gram[~np.eye(5, dtype=bool)])) < 0.1


def test_init_rejects_empty():
    with pytest.raises(ValueError):
        init_prototypes(0, 4)


def test_restricted_assign_self_similarity():
    bank = init_prototypes(3, 8, seed=1)
    assert restricted_assign(bank.mu[0], bank, 0, 2).tolist() == [1, 0, 0]
    assert restricted_assign(bank.mu[2], bank, 0, 2).tolist() == [0, 0, 1]


def test_restricted_assign_tie_goes_to_normal():
    mu = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    bank = PrototypeBank(mu)
    bisector = (mu[0] + mu[2]) / np.linalg.norm(mu[0] + mu[2])
    assert restricted_assign(bisector, bank, 0, 2).tolist() == [0, 0, 1]


def test_restricted_assign_never_picks_other_tumour_class():
    bank = init_prototypes(4, 6, seed=2)
    z = restricted_assign(np.tile(bank.mu[1], (5, 1)), bank, 0, 3)
    assert (z[:, 1] == 0).all() and (z.sum(axis=1) == 1).all()


def test_momentum_label_cases():
    s = np.array([0.3, 0.7])
    np.testing.assert_array_equal(momentum_update_label(s, s, 0.8), s)
    np.testing.assert_allclose(momentum_update_label([1.0, 0.0], [0.0, 1.0], 0.8), [0.8, 0.2], atol=1e-15)


def test_momentum_label_geometric_convergence():
    s, z = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    prev = np.abs(s - z).sum()
    for _ in range(20):
        s = momentum_update_label(s, z, 0.8)
        dist = np.abs(s - z).sum()
        assert dist / prev == pytest.approx(0.8, rel=1e-9)
        prev = dist


def test_prototype_update_fixed_point():
    bank = init_prototypes(3, 5, seed=0)
    before = bank.mu.copy()
    prototype_ema_update(bank, 1, before[1])
    np.testing.assert_allclose(bank.mu, before, atol=1e-12)


def test_prototype_update_example_and_locality():
    bank = PrototypeBank(np.array([[1.0, 0.0], [0.0, 1.0]]), momentum=0.9)
    prototype_ema_update(bank, 0, np.array([0.0, 1.0]))
    np.testing.assert_allclose(bank.mu[0], [0.99388, 0.11043], atol=5e-6)
    np.testing.assert_array_equal(bank.mu[1], [0.0, 1.0])


def test_prototype_update_antipodal_skipped(caplog):
    bank = PrototypeBank(np.array([[1.0, 0.0]]), momentum=0.5)
    with caplog.at_level(logging.WARNING):
        prototype_ema_update(bank, 0, np.array([-1.0, 0.0]))
    np.testing.assert_array_equal(bank.mu[0], [1.0, 0.0])
    assert "skipped" in caplog.text


def test_prototype_update_bad_class():
    with pytest.raises(ValueError):
        prototype_ema_update(init_prototypes(2, 3), 2, np.array([1.0, 0, 0]))


def test_kl_zero_when_matching():
    logits = np.array([0.3, -1.0, 2.0])
    p = np.exp(logits) / np.exp(logits).sum()
    assert abs(float(kl_instance_loss(logits, p).data)) <= 1e-12


def test_kl_one_hot_is_cross_entropy():
    logits = np.array([0.3, -1.0, 2.0])
    log_p = logits - np.log(np.exp(logits).sum())
    assert float(kl_instance_loss(logits, [0.0, 1.0, 0.0]).data) == pytest.approx(-log_p[1], abs=1e-12)


def test_kl_scalar_example():
    got = float(kl_instance_loss(np.zeros(2), [0.8, 0.2]).data)
    assert got == pytest.approx(0.8 * math.log(1.6) + 0.2 * math.log(0.4), abs=1e-12)
    assert abs(got - 0.19274) <= 5e-6


def test_kl_is_row_mean():
    logits = np.random.default_rng(0).standard_normal((4, 3))
    s = np.random.default_rng(1).dirichlet(np.ones(3), size=4)
    rows = [float(kl_instance_loss(logits[i], s[i]).data) for i in range(4)]
    assert float(kl_instance_loss(logits, s).data) == pytest.approx(np.mean(rows), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 200), st.floats(0.0, 1.0))
def test_prototypes_stay_unit_norm(seed, steps, momentum):
    rng = np.random.default_rng(seed)
    bank = init_prototypes(3, 6, seed=seed, momentum=momentum)
    for _ in range(steps):
        h = rng.standard_normal(6)
        prototype_ema_update(bank, int(rng.integers(0, 3)), h / np.linalg.norm(h))
    assert np.max(np.abs(np.linalg.norm(bank.mu, axis=1) - 1.0)) <= 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 100), st.floats(0.0, 1.0))
def test_soft_labels_stay_on_simplex(seed, steps, alpha):
    rng = np.random.default_rng(seed)
    s = rng.dirichlet(np.ones(4))
    for _ in range(steps):
        s = momentum_update_label(s, np.eye(4)[rng.integers(0, 4)], alpha)
    assert (s >= 0).all() and abs(s.sum() - 1.0) <= 1e-12


@pytest.fixture(scope="module")
def tiny_manifest(tmp_path_factory):
    cfg = SynthConfig(n_classes=3, dim=4, n_slides_per_class=2, instances_min=3, instances_max=5, seed=1)
    return generate_dataset(cfg, tmp_path_factory.mktemp("tiny"))


def test_init_soft_labels(tiny_manifest):
    store = init_soft_labels(tiny_manifest)
    for e in tiny_manifest.split("train"):
        s = store[e.slide_id]
        np.testing.assert_allclose(s.sum(axis=1), 1.0)
        if e.slide_label == 2:
            assert e.slide_id in store.fixed
            assert (s[:, 2] == 1).all()
        else:
            expect = np.zeros(3)
            expect[[e.slide_label, 2]] = 0.5
            np.testing.assert_array_equal(s, np.tile(expect, (len(s), 1)))


def test_store_fixed_ignores_updates_and_round_trips(tiny_manifest):
    store = init_soft_labels(tiny_manifest)
    normal_id = next(e.slide_id for e in tiny_manifest.entries if e.slide_label == 2)
    tumour = next(e for e in tiny_manifest.entries if e.slide_label == 0)
    n = len(store[normal_id])
    store.update(normal_id, np.tile([1.0, 0, 0], (n, 1)))
    assert (store[normal_id][:, 2] == 1).all()
    z = np.zeros_like(store[tumour.slide_id])
    z[:, 0] = 1
    store.update(tumour.slide_id, z)
    assert (store.hard_labels(tumour.slide_id, 0, 2) == 0).all()
    back = SoftLabelStore.from_state(store.state())
    assert back.fixed == store.fixed and back.alpha == store.alpha
    for sid in store.labels:
        np.testing.assert_array_equal(back[sid], store[sid])


def test_hard_labels_tie_goes_to_normal():
    store = SoftLabelStore({"a": np.array([[0.5, 0.0, 0.5]])})
    assert store.hard_labels("a", 0, 2).tolist() == [2]
