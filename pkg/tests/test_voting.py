import itertools

import numpy as np
import pytest

from mosaicflow import voting
from mosaicflow.degradation import PAPER_SRF, Observation, SfaPattern, apply_mosaic, apply_spectral
from mosaicflow.voting import VoteState, decide, select_checkpoints, vote


def _vote_on_scores(incumbent, scores, threshold=0.75):
    table = {0: incumbent, **{i + 1: s for i, s in enumerate(scores)}}
    cands = [np.array([float(i + 1)]) for i in range(len(scores))]
    state = VoteState(np.array([0.0]), incumbent, window=10, k=max(1, min(len(scores), 10)),
                      threshold=threshold)
    return vote(state, cands, lambda x: table[int(x[0])])


class TestWorkedCases:
    def test_half_wins_no_update(self):
        new, rec = _vote_on_scores(0.4, [0.5, 0.3, 0.7, 0.2])
        assert rec.win_rate == 0.5 and not rec.updated
        assert new.target[0] == 0.0 and new.score == 0.4

    def test_all_win_takes_argmin(self):
        new, rec = _vote_on_scores(0.4, [0.3, 0.2, 0.35, 0.1])
        assert rec.win_rate == 1.0 and rec.updated and rec.winner == 3
        assert new.target[0] == 4.0 and new.score == 0.1

    def test_ties_are_losses(self):
        _, rec = _vote_on_scores(0.4, [0.4] * 4)
        assert rec.win_rate == 0.0 and not rec.updated

    def test_argmin_tie_takes_lowest_index(self):
        assert decide(1.0, [0.5, 0.2, 0.2, 0.3], 0.75) == (1.0, 1)


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5])
@pytest.mark.parametrize("p", [0.25, 0.5, 0.75, 1.0])
def test_brute_force_patterns(k, p):
    for pattern in itertools.product([0, 1, 2], repeat=k):
        # 0 = loss, 1 = tie, 2 = win against an incumbent of 1.0
        scores = [{0: 1.5, 1: 1.0, 2: 0.5}[v] - 0.01 * i for i, v in enumerate(pattern)]
        scores = [s if v != 1 else 1.0 for s, v in zip(scores, pattern)]
        wins = sum(v == 2 for v in pattern)
        rate, winner = decide(1.0, scores, p)
        assert rate == wins / k
        if wins / k >= p:
            assert winner == int(np.argmin(scores))
        else:
            assert winner is None


def test_vote_is_pure():
    a = _vote_on_scores(0.4, [0.3, 0.2, 0.35, 0.1])
    b = _vote_on_scores(0.4, [0.3, 0.2, 0.35, 0.1])
    assert a[1] == b[1]


def test_empty_candidates():
    with pytest.raises(ValueError):
        decide(1.0, [], 0.75)


@pytest.mark.parametrize("kw", [{"threshold": 0.0}, {"threshold": 1.1}, {"k": 0}, {"k": 11}])
def test_state_validation(kw):
    with pytest.raises(ValueError):
        VoteState(np.zeros(1), 0.0, **kw)


class TestConsistency:
    @pytest.fixture
    def scene(self, rng):
        pat = SfaPattern.default(16)
        h = rng.random((16, 16, 16))
        return h, Observation(apply_mosaic(h, pat), apply_spectral(h, PAPER_SRF), pat)

    def test_truth_scores_zero(self, scene):
        h, o = scene
        assert voting.eval_consistency(h, o, PAPER_SRF) == pytest.approx(0.0, abs=1e-25)

    def test_constant_offset(self, scene):
        h, o = scene
        d = 0.03
        expected = d * d * (o.pan.size + o.mosaic.size)
        assert voting.eval_consistency(h + d, o, PAPER_SRF) == pytest.approx(expected, rel=1e-10)


class TestSelection:
    def test_random_without_replacement(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            pick = select_checkpoints(range(11, 21), 4, rng)
            assert len(set(pick)) == 4 and all(11 <= e <= 20 for e in pick)

    def test_fixed_is_last_k(self):
        assert select_checkpoints(range(1, 11), 4, np.random.default_rng(0), "fixed") == [7, 8, 9, 10]

    def test_seeded(self):
        a = select_checkpoints(range(10), 4, np.random.default_rng(7))
        b = select_checkpoints(range(10), 4, np.random.default_rng(7))
        assert a == b

    def test_too_many(self):
        with pytest.raises(ValueError):
            select_checkpoints(range(3), 4, np.random.default_rng(0))
