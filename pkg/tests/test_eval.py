import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mof.encoders import EncoderDims, init_params
from mof.evaluation import (
    EvalError, RetrievalReport, chance_r1_band, evaluate, rank_of_positives, report, report_from_ranks,
    similarity_matrix,
)


def sort_oracle(sim):
    """Rank by explicit sorting: tied candidates occupy a block of positions
    and the positive gets the block's mean position, rounded half up."""
    ranks = []
    for i, row in enumerate(sim):
        order = sorted(range(len(row)), key=lambda j: -row[j])
        positions = [k + 1 for k, j in enumerate(order) if row[j] == row[i]]
        mean = (positions[0] + positions[-1]) / 2
        ranks.append(int(np.floor(mean + 0.5)))
    return ranks


def test_rank_oracle_1000_matrices():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        q = int(rng.integers(1, 12))
        if trial % 2:
            sim = rng.integers(0, 4, (q, q)).astype(float)  # heavy ties
        else:
            sim = rng.standard_normal((q, q))
        assert rank_of_positives(sim) == sort_oracle(sim)


def test_rank_examples():
    assert rank_of_positives(np.eye(5)) == [1] * 5
    sim = np.array([[0.0, 1.0, 2.0], [3.0, 1.0, 2.0], [5.0, 4.0, 3.0]])
    assert rank_of_positives(sim) == [3, 3, 3]
    assert rank_of_positives(np.array([[0.5, 0.5], [0.1, 0.9]]))[0] == 2


def test_report_examples():
    r = report(np.eye(10))
    assert r.r_at == {1: 1.0, 5: 1.0, 10: 1.0} and r.med_r == 1
    r = report_from_ranks([10] * 10)
    assert r.r_at == {1: 0.0, 5: 0.0, 10: 1.0} and r.med_r == 10
    r = report_from_ranks([1, 2, 4, 8])
    assert r.r_at[1] == 0.25 and r.r_at[5] == 0.75 and r.med_r == 3.0


def test_report_invariants_enforced():
    with pytest.raises(EvalError):
        RetrievalReport(r_at={1: 0.5, 5: 0.25}, med_r=2, n_queries=4, frames_used=2)
    with pytest.raises(EvalError):
        RetrievalReport(r_at={1: 1.5}, med_r=2, n_queries=4, frames_used=2)
    with pytest.raises(EvalError):
        RetrievalReport(r_at={1: 0.5}, med_r=0.5, n_queries=4, frames_used=2)


def test_similarity_examples():
    rng = np.random.default_rng(1)
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    np.testing.assert_allclose(similarity_matrix(q, q), np.eye(4), atol=1e-12)
    e = rng.standard_normal((5, 3))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    s = similarity_matrix(e, e)
    np.testing.assert_allclose(s, s.T, atol=0)
    np.testing.assert_allclose(np.diag(s), 1.0, atol=1e-12)
    ev, et = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    loop = [[sum(et[i][k] * ev[j][k] for k in range(4)) for j in range(3)] for i in range(3)]
    assert np.abs(similarity_matrix(ev, et) - np.array(loop)).max() <= 1e-6
    with pytest.raises(EvalError):
        similarity_matrix(ev, et[:, :3])


@settings(max_examples=60, deadline=None)
@given(arrays(np.int64, (6, 6), elements=st.integers(-16, 16)))
def test_ranking_invariant_under_monotone_maps(grid):
    # a 1/16 grid keeps the maps strictly increasing in floating point too
    sim = grid / 16.0
    base = report(sim)
    for f in (np.exp, lambda x: 3 * x + 1, np.arctan):
        other = report(f(sim))
        assert other.ranks == base.ranks and other.r_at == base.r_at and other.med_r == base.med_r


def test_json_schema():
    r = report_from_ranks([1, 2, 3], frames_used=2, wall_ms=1.5)
    d = json.loads(r.dumps())
    assert set(d) == {"r1", "r5", "r10", "medr", "n", "frames_used", "wall_ms"}
    back = RetrievalReport.from_json(d)
    assert back.r_at == r.r_at and back.med_r == r.med_r


def test_evaluate_deterministic_and_k_bounds(default_dataset):
    theta = init_params(EncoderDims(), 0)
    a = evaluate(theta, default_dataset.test, 2)
    b = evaluate(theta, default_dataset.test, 2, workers=3)
    assert a.ranks == b.ranks and a.frames_used == 2 and a.n_queries == 32
    full = evaluate(theta, default_dataset.test, 16)
    assert full.frames_used == 16
    with pytest.raises(EvalError):
        evaluate(theta, default_dataset.test, 17)
    with pytest.raises(EvalError):
        evaluate(theta, [], 2)


def test_chance_band():
    lo, hi = chance_r1_band(32)
    assert lo < 1 / 32 < hi
    assert abs(hi - (1 / 32 + 3 * np.sqrt((1 / 32) * (31 / 32) / 32))) < 1e-15
