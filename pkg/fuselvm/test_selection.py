import numpy
import pytest

from .inference import FitOptions, elbo_by_condition
from .selection import RankSweepResult, bic_score, degrees_of_freedom, penalized_score, select_rank
from .simulate import load_preset, simulate_community


def _row(score):
    return dict(elbo=score, dof=1, penalized_score=score, converged=True, iterations=1, wall_time=0.0)


def test_degrees_of_freedom():
    assert degrees_of_freedom([4, 2], 2) == 17
    assert penalized_score([0.0], [4, 2], 2, [10]) == pytest.approx(-0.5 * 17 * numpy.log(10))


def test_penalty_grows_with_rank():
    scores = [penalized_score([-100.0], [4, 2], d_z, [10]) for d_z in range(1, 6)]
    assert all(a > b for a, b in zip(scores, scores[1:]))


def test_penalized_score_sums_conditions():
    two = penalized_score([-10.0, -20.0], [3], 1, [5, 50])
    expected = -10.0 - 0.5 * 5 * numpy.log(5) - 20.0 - 0.5 * 5 * numpy.log(50)
    assert two == pytest.approx(expected)


def test_ties_go_to_the_smaller_rank():
    result = RankSweepResult([2, 3], {2: _row(-50.0), 3: _row(-50.0 + 1e-13)}, {}, {})
    assert result.selected == 2
    result = RankSweepResult([2, 3, 4], {2: _row(-50.0), 3: _row(-40.0), 4: _row(-45.0)}, {}, {})
    assert result.selected == 3
    assert [row["rank"] for row in result.table()] == [2, 3, 4]
    assert result.scores[4] == -45.0


def _community(seed=0, d_z=2):
    cfg = load_preset("community", dict(d_z=d_z, dims=[8, 5], replicates=40, rate=200, seed=seed))
    return simulate_community(cfg)


def test_select_single_rank():
    ds, _ = _community()
    result = select_rank(ds, [2], FitOptions(max_outer_iters=20))
    assert result.selected == 2
    assert list(result.rows) == [2]
    assert not result.failures


def test_sweep_rows_recompute_from_their_parts():
    ds, _ = _community(1)
    result = select_rank(ds, [1, 2, 3], FitOptions(max_outer_iters=20))
    assert sorted(result.rows) == [1, 2, 3]
    for rank, row in result.rows.items():
        assert row["dof"] == degrees_of_freedom(ds.dims, rank)
        assert row["penalized_score"] == pytest.approx(row["elbo"] - 0.5 * row["dof"] * numpy.log(40))
        assert bic_score(result.models[rank], ds) == pytest.approx(row["penalized_score"])
        per_condition = elbo_by_condition(result.models[rank].params, result.models[rank].posteriors, ds)
        assert row["elbo"] == pytest.approx(float(per_condition.sum()))
    assert result.selected == max(result.scores, key=result.scores.get)


def test_select_rank_rejects_bad_ranks():
    ds, _ = _community()
    with pytest.raises(ValueError):
        select_rank(ds, [])
    with pytest.raises(ValueError):
        select_rank(ds, [0, 2])


@pytest.mark.slow
def test_rank_recovery():
    ds, _ = simulate_community(load_preset("rank", dict(d_z=4, seed=3)))
    result = select_rank(ds, range(2, 8), FitOptions(seed=3))
    assert abs(result.selected - 4) <= 1
