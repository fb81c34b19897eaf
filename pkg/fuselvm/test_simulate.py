import json

import numpy
import pytest

from .simulate import (
    SimConfig,
    load_preset,
    save_truth,
    simulate,
    simulate_classes,
    simulate_community,
    simulate_sweep,
)


def test_classes_defaults():
    ds, truth = simulate_classes(load_preset("classes"))
    assert ds.K == 3
    assert ds.replicates == [200, 200, 200]
    assert ds.dims == [25]
    for k in range(ds.K):
        numpy.testing.assert_array_equal(ds.totals(k, 0), 100)
    assert truth.labels.tolist() == [0] * 200 + [1] * 200 + [2] * 200


def test_classes_zero_variance():
    cfg = load_preset("classes", dict(class_variances=[0.0, 0.0, 0.0], replicates=10))
    _, truth = simulate_classes(cfg)
    for z, mean in zip(truth.z, cfg.class_means):
        numpy.testing.assert_array_equal(z, numpy.tile(mean, (10, 1)))


def test_classes_pooled():
    cfg = load_preset("classes", dict(replicates=20, shared_loadings=True, pooled=True))
    ds, truth = simulate_classes(cfg)
    assert ds.K == 1 and ds.replicates == [60]
    assert ds.condition_labels == ["pooled"]
    assert truth.z[0].shape == (60, 2)
    assert len(truth.labels) == 60
    separate, _ = simulate_classes(cfg.copy(update=dict(pooled=False)))
    numpy.testing.assert_array_equal(ds.block(0, 0), numpy.vstack([separate.block(k, 0) for k in range(3)]))


def test_community_defaults():
    ds, truth = simulate_community(load_preset("community"))
    assert (ds.K, ds.dims, ds.replicates) == (1, [20, 10], [200])
    assert ds.species_labels == ["s0", "s1"]
    assert truth.covariance[0].shape == (30, 30)
    assert numpy.linalg.matrix_rank(truth.covariance[0]) <= 5
    assert numpy.linalg.matrix_rank(truth.centred_covariance(0)) <= 5


def test_community_poisson_totals():
    ds, _ = simulate_community(load_preset("community", dict(replicates=2000, dims=[3], rate=50)))
    assert abs(ds.totals(0, 0).mean() - 50) < 1.0

    ds, _ = simulate_community(load_preset("community", dict(replicates=5, rate=0)))
    assert ds.stacked(0).sum() == 0


def test_same_seed_same_data():
    cfg = load_preset("community", dict(replicates=30, seed=4))
    a, _ = simulate_community(cfg)
    b, _ = simulate_community(cfg)
    numpy.testing.assert_array_equal(a.stacked(0), b.stacked(0))
    c, _ = simulate_community(cfg.copy(update=dict(seed=5)))
    assert not numpy.array_equal(a.stacked(0), c.stacked(0))


def test_sweep_grid():
    cfg = load_preset("sweep", dict(replicates=5))
    assert (cfg.rates, cfg.sweep_dims, cfg.rate) == ([10, 100, 1000], [32, 64, 128], 100)
    assert cfg.sweep_latent_dims == [2, 5, 10]
    points = simulate_sweep(cfg)
    assert len(points) == 9
    assert [ds.dims[0] for ds, _ in points[:3]] == [32, 64, 128]
    assert len(simulate_sweep(cfg, rates=[10], dims=[16])) == 1
    assert len(simulate(cfg)) == 9
    with pytest.raises(ValueError):
        simulate_sweep(cfg, rates=[])
    with pytest.raises(ValueError):
        load_preset("sweep", dict(sweep_latent_dims=[0]))


def test_preset_overrides_are_validated():
    assert load_preset("community", dict(d_z=3)).d_z == 3
    with pytest.raises(ValueError):
        load_preset("nonexistent")
    with pytest.raises(ValueError):
        load_preset("community", dict(replicates=0))
    with pytest.raises(ValueError):
        load_preset("community", dict(bogus=1))
    with pytest.raises(ValueError):
        SimConfig(preset="classes", d_z=2, class_means=[[0.0, 0.0]], class_variances=[1.0, 1.0])


def test_save_truth(tmp_path):
    ds, truth = simulate_classes(load_preset("classes", dict(replicates=4)))
    path = tmp_path / "truth.json"
    save_truth(truth, str(path), ds.species_labels, ds.condition_labels)
    doc = json.loads(path.read_text())
    assert doc["labels"] == truth.labels.tolist()
    assert doc["conditions"] == ["class0", "class1", "class2"]
    numpy.testing.assert_allclose(doc["covariance"][1], truth.covariance[1])
