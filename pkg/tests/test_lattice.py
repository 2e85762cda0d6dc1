import itertools
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twopass.lattice import (
    LatticeFormatError,
    PrefixTreeLattice,
    RescoreIncompleteError,
    ScoreWeights,
)

hyp_lists = st.lists(
    st.lists(st.integers(2, 5), min_size=0, max_size=5).map(tuple), min_size=1, max_size=8, unique=True
).flatmap(lambda seqs: st.tuples(
    st.just(seqs),
    st.lists(st.lists(st.floats(-5, 0), min_size=5, max_size=5), min_size=len(seqs), max_size=len(seqs)),
))


def build(seqs, scores=None):
    scores = scores or [[-0.1 * (i + 1)] * len(s) for i, s in enumerate(seqs)]
    return PrefixTreeLattice.from_beam_hypotheses([(s, sc[: len(s)]) for s, sc in zip(seqs, scores)])


def set_las(lat, per_token):
    """Hand-set second-pass scores: per_token[token] on each arc, 0 at terminals."""
    for a in lat.arcs:
        a.las_logp = per_token[a.token]
    for t in lat.terminals.values():
        t.final_las = 0.0


def test_shared_prefix_arc_count():
    lat = build([(2, 3, 4), (2, 3, 5)])
    assert len(lat.arcs) == 4  # a, b shared once; c and d distinct
    assert len(lat.terminals) == 2


def test_distinct_prefix_count_matches_enumeration():
    seqs = [(2, 3, 4), (2, 3, 5), (2, 4), (3,)]
    prefixes = {s[:k] for s in seqs for k in range(1, len(s) + 1)}
    assert len(build(seqs).arcs) == len(prefixes)


def test_single_hypothesis_is_a_chain():
    lat = build([(4, 2, 3)])
    assert [a.token for a in lat.arcs] == [4, 2, 3]
    assert all(lat.depth[a.dst] == i + 1 for i, a in enumerate(lat.arcs))


def test_empty_hypothesis_list_is_root_only():
    lat = PrefixTreeLattice.from_beam_hypotheses([])
    assert lat.num_nodes == 1 and not lat.arcs and not lat.terminals


def test_duplicates_are_merged():
    lat = PrefixTreeLattice.from_beam_hypotheses([((2, 3), [-1.0, -1.0]), ((2, 3), [-0.5, -0.5])])
    assert len(lat.arcs) == 2 and len(lat.terminals) == 1
    assert lat.hypotheses() == [((2, 3), -2.0)]


def test_terminal_can_be_interior():
    lat = build([(2, 3), (2,)])
    assert sorted(lat.hypotheses()) == [((2,), -0.2), ((2, 3), -0.2)]


@given(hyp_lists)
@settings(max_examples=100, deadline=None)
def test_round_trip_and_arc_bound(case):
    seqs, scores = case
    hyps = [(s, sc[: len(s)]) for s, sc in zip(seqs, scores)]
    lat = PrefixTreeLattice.from_beam_hypotheses(hyps)
    got = dict(lat.hypotheses())
    assert set(got) == set(seqs)
    for s, sc in hyps:
        assert got[s] == pytest.approx(math.fsum(sc), abs=1e-12)
    total_len = sum(len(s) for s in seqs)
    assert len(lat.arcs) <= total_len
    firsts = [s[0] for s in seqs if s]
    if len(firsts) == len(set(firsts)):
        assert len(lat.arcs) == total_len
    for node, kids in enumerate(lat.children):  # tree invariants
        assert len(kids) == len({lat.arcs[a].token for a in kids.values()})


@given(hyp_lists)
@settings(max_examples=100, deadline=None)
def test_lambda0_best_path_is_max_input(case):
    seqs, scores = case
    hyps = [(s, sc[: len(s)]) for s, sc in zip(seqs, scores)]
    lat = PrefixTreeLattice.from_beam_hypotheses(hyps)
    totals = {s: math.fsum(sc) for s, sc in hyps}
    top = max(totals.values())
    best, score = lat.best_path(ScoreWeights(0.0))
    assert score == pytest.approx(top, abs=1e-12)
    assert best == min(s for s, v in totals.items() if abs(v - top) <= 1e-12)


def test_explicit_totals_are_kept():
    lat = PrefixTreeLattice.from_beam_hypotheses([((2, 3), [-1.0, -1.0], -1.5), ((2, 4), [-1.0, -2.0], -2.5)])
    assert dict(lat.hypotheses()) == {(2, 3): -1.5, (2, 4): -2.5}


def test_lambda1_picks_higher_las_path():
    lat = build([(2,), (3,)], [[-0.1], [-0.2]])
    set_las(lat, {2: -3.0, 3: -1.0})
    assert lat.best_path(ScoreWeights(1.0))[0] == (3,)
    assert lat.best_path(ScoreWeights(0.0))[0] == (2,)


def test_lambda_half_matches_enumeration():
    seqs = [(2, 3), (2, 4), (5,)]
    lat = build(seqs, [[-0.5, -1.0], [-0.5, -0.4], [-1.7]])
    las = {2: -0.3, 3: -0.2, 4: -2.0, 5: -0.1}
    set_las(lat, las)
    rnnt = {(2, 3): -1.5, (2, 4): -0.9, (5,): -1.7}
    comb = {s: 0.5 * rnnt[s] + 0.5 * sum(las[t] for t in s) for s in seqs}
    best = max(comb, key=comb.get)
    got = lat.best_path(ScoreWeights(0.5))
    assert got[0] == best and got[1] == pytest.approx(comb[best], abs=1e-12)


def test_nbest_cases():
    seqs = [(2,), (3,), (4,), (5,)]
    lat = build(seqs, [[-1.0], [-0.3], [-2.0], [-0.7]])
    w = ScoreWeights(0.0)
    assert lat.nbest(1, w) == [lat.best_path(w)]
    assert [s for s, _ in lat.nbest(10, w)] == [(3,), (5,), (2,), (4,)]
    set_las(lat, {2: -0.1, 3: -5.0, 4: -0.2, 5: -1.0})
    w = ScoreWeights(0.5)
    enum = sorted(((0.5 * r + 0.5 * l, s) for s, r, l in
                   [((2,), -1.0, -0.1), ((3,), -0.3, -5.0), ((4,), -2.0, -0.2), ((5,), -0.7, -1.0)]),
                  key=lambda x: (-x[0], x[1]))
    assert [s for s, _ in lat.nbest(2, w)] == [s for _, s in enum[:2]]
    with pytest.raises(ValueError):
        lat.nbest(0, w)


def test_ties_break_by_token_sequence():
    lat = build([(4,), (3,), (5,)], [[-1.0], [-1.0], [-1.0]])
    assert [s for s, _ in lat.nbest(3)] == [(3,), (4,), (5,)]


def test_missing_las_scores_raise():
    lat = build([(2,), (3,)])
    with pytest.raises(RescoreIncompleteError):
        lat.best_path(ScoreWeights(0.5))
    lat.arcs[0].las_logp = -1.0
    lat.terminals[lat.arcs[0].dst].final_las = -0.1
    assert lat.best_path(ScoreWeights(0.5))[0] == (2,)  # the only complete path


def test_score_weights_range():
    for bad in (-0.1, 1.5):
        with pytest.raises(ValueError):
            ScoreWeights(bad)


def test_strip_token_preserves_totals_and_merges():
    lat = PrefixTreeLattice.from_beam_hypotheses([
        ((2, 3, 1), [-0.1, -0.2, -0.3]),
        ((2, 3), [-0.1, -0.2], -1.0),
        ((4, 1), [-0.5, -0.1]),
    ])
    out = lat.strip_token(1)
    got = dict(out.hypotheses())
    assert got[(2, 3)] == pytest.approx(-0.6, abs=1e-12)
    assert got[(4,)] == pytest.approx(-0.6, abs=1e-12)
    assert all(a.token != 1 for a in out.arcs)


def test_dump_round_trip_is_bit_exact():
    lat = build([(2, 3, 4), (2, 3, 5), (6,)], [[-0.1 / 3, -1e-17, math.pi], [-0.1 / 3, -1e-17, -2.5], [-7.25]])
    set_las(lat, {2: -0.1, 3: -1 / 7, 4: -2.0, 5: -3.0, 6: -1e-300})
    lat.arcs[-1].las_logp = None
    lat.utt_id, lat.vocab_hash = "utt 7", "abc123"
    text = lat.dumps()
    back = PrefixTreeLattice.loads(text)
    assert back.dumps() == text
    assert back.arcs == lat.arcs and back.terminals == lat.terminals and back.utt_id == "utt 7"


def test_malformed_dump_raises():
    text = build([(2, 3)]).dumps()
    with pytest.raises(LatticeFormatError):
        PrefixTreeLattice.loads("garbage\n")
    with pytest.raises(LatticeFormatError):
        PrefixTreeLattice.loads(text.replace("arcs 2", "arcs 3"))
    with pytest.raises(LatticeFormatError):
        PrefixTreeLattice.loads(text.replace("0 1 2 ", "0 1 2 x ", 1))


def test_best_path_enumeration_on_random_lattices():
    import numpy as np
    rng = np.random.default_rng(3)
    for _ in range(50):
        seqs = list({tuple(rng.integers(2, 5, size=rng.integers(1, 4))) for _ in range(6)})
        scores = [list(rng.uniform(-3, 0, size=len(s))) for s in seqs]
        lat = build(seqs, scores)
        las = {t: float(rng.uniform(-3, 0)) for t in range(2, 5)}
        set_las(lat, las)
        lam = float(rng.uniform(0, 1))
        comb = {s: (1 - lam) * math.fsum(sc) + lam * sum(las[t] for t in s) for s, sc in zip(seqs, scores)}
        top = max(comb.values())
        best = min(s for s, v in comb.items() if abs(v - top) <= 1e-12)
        assert lat.best_path(ScoreWeights(lam))[0] == best
        assert list(itertools.islice((s for s, _ in lat.nbest(len(seqs), ScoreWeights(lam))), 1)) == [best]
