import numpy
import pytest

from .experiments import (
    compare_methods,
    counts_sweep,
    dims_sweep,
    embedding_study,
    iteration_timing,
    rank_study,
    score_methods,
)
from .inference import FitOptions
from .simulate import load_preset, simulate_community

_fast = FitOptions(max_outer_iters=10)


def test_score_methods_rows():
    ds, truth = simulate_community(load_preset("community", dict(d_z=2, dims=[6, 4], replicates=30, rate=200)))
    rows = score_methods(ds, truth, ["empirical", "ledoit_wolf", "proposed"], 2, _fast)
    assert [row["method"] for row in rows] == ["empirical", "ledoit_wolf", "proposed"]
    for row in rows:
        assert 0 <= row["covariance_rmse"] <= 2
        assert numpy.isfinite(row["precision_rmse"])
    with pytest.raises(ValueError):
        score_methods(ds, truth, ["glasso"], 2)


def test_iteration_timing_rows():
    frame = iteration_timing([(20, 8), (40, 8)], trials=1, d_z=2, rate=100)
    assert frame[["replicates", "dim"]].values.tolist() == [[20, 8], [40, 8]]
    assert (frame["median_seconds"] > 0).all()


def test_rank_study_rows():
    selections, curves = rank_study([1], [1, 2], [0], dims=(5, 3), rate=100, replicates=20, opts=_fast)
    assert selections.shape[0] == 1
    assert selections["selected"].iloc[0] in (1, 2)
    assert sorted(curves["rank"]) == [1, 2]
    assert set(curves.columns) >= {"penalized_score", "covariance_rmse"}


def test_dims_sweep_rows():
    per_seed, summary = dims_sweep([4, 8], 50, [0, 1], d_z=2, replicates=20, methods=("empirical",))
    assert len(per_seed) == 4
    assert summary["dim"].tolist() == [4, 8]
    assert (summary["n_seeds"] == 2).all()


def test_counts_sweep_rows():
    per_seed, summary = counts_sweep([50, 200], 8, [0], latent_dims=[1, 2], replicates=20, methods=("empirical",))
    assert len(per_seed) == 4
    assert summary[["d_z", "rate"]].values.tolist() == [[1, 50], [1, 200], [2, 50], [2, 200]]


@pytest.mark.slow
def test_latent_model_beats_baselines():
    _, summary = compare_methods(load_preset("community"), range(3), ["empirical", "ledoit_wolf", "proposed"])
    rmse = dict(zip(summary["method"], summary["covariance_rmse_mean"]))
    assert rmse["proposed"] <= 0.15
    assert rmse["proposed"] < rmse["empirical"]
    assert rmse["proposed"] < rmse["ledoit_wolf"]


@pytest.mark.slow
def test_more_counts_help():
    _, summary = counts_sweep([10, 100, 1000], 128, range(20))
    rmse = summary.set_index("rate")["covariance_rmse_mean"]
    assert rmse[1000] <= rmse[100] <= rmse[10]
    assert rmse[1000] < 0.8 * rmse[10]


@pytest.mark.slow
def test_selected_rank_is_near_truth_without_overfitting():
    candidates = list(range(2, 14))
    selections, curves = rank_study([4, 8, 12], candidates, range(10))
    for true_rank, picked in selections.groupby("true_rank")["selected"]:
        assert abs(picked.median() - true_rank) <= 1

    chosen = curves.merge(selections, on=["true_rank", "seed"])
    at_selected = chosen[chosen["rank"] == chosen["selected"]].groupby("true_rank")["covariance_rmse"].mean()
    at_max = curves[curves["rank"] == max(candidates)].groupby("true_rank")["covariance_rmse"].mean()
    assert (at_selected <= at_max + 0.05).all()


@pytest.mark.slow
def test_iteration_time_grows_linearly():
    frame = iteration_timing([(200, 64), (400, 64), (200, 128)], trials=5, d_z=5)
    base, more_replicates, more_features = frame["median_seconds"]
    assert more_replicates <= 1.6 * base
    assert more_features <= 1.6 * base


@pytest.mark.slow
def test_embeddings_separate_classes():
    frame = embedding_study(range(3))
    assert frame["ari"].median() >= 0.8
