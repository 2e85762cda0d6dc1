import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twopass.frontend import ConfigError, FeatureSequence, default_dataset_config, synth_dataset
from twopass.harness.cli import packaged_config
from twopass.harness.config import ExperimentConfig, load_experiment_config
from twopass.harness.endpoint import close_frame_for_ms, combine_close_frames, vad_endpoint
from twopass.harness.metrics import EvalRecord, edit_distance, ep_latency, make_record, percentile, wer
from twopass.harness.pipeline import (
    Evaluator,
    RunConfig,
    datasets,
    make_system,
    sweep_tradeoff,
    train_first_pass,
    train_second_pass,
    write_sweep_csv,
)

words = st.lists(st.sampled_from("abcd"), max_size=6)


# --- edit distance ------------------------------------------------------------
def test_identical_sequences():
    assert edit_distance(list("abc"), list("abc")) == (0, 0, 0, 0)


def test_all_deletions():
    assert edit_distance(list("abc"), []) == (3, 0, 0, 3)


def test_mixed_alignment():
    assert edit_distance(["a", "b", "c"], ["a", "x", "c", "d"]) == (2, 1, 1, 0)


def test_tie_break_prefers_substitution():
    # [a, b] -> [b, a]: two substitutions, or one deletion plus one insertion
    assert edit_distance(["a", "b"], ["b", "a"]) == (2, 2, 0, 0)


@settings(max_examples=100, deadline=None)
@given(words, words)
def test_edit_distance_symmetric_and_consistent(a, b):
    d, s, i, dl = edit_distance(a, b)
    assert d == s + i + dl == edit_distance(b, a)[0]
    assert (d == 0) == (a == b)


@settings(max_examples=100, deadline=None)
@given(words, words, words)
def test_edit_distance_triangle(a, b, c):
    assert edit_distance(a, c)[0] <= edit_distance(a, b)[0] + edit_distance(b, c)[0]


# --- WER -------------------------------------------------------------------------
def _rec(ref, hyp):
    return make_record("u", ref, hyp, 0.0)


def test_wer_perfect():
    assert wer([_rec(["a", "b"], ["a", "b"]), _rec(["c"], ["c"])]) == 0.0


def test_wer_single_substitution():
    assert wer([_rec(list("abcd"), list("abxd"))]) == 25.0


def test_wer_pooled_over_utterances():
    recs = [_rec(list("abc"), list("ab")), _rec(list("ab"), list("abzz")), _rec(list("abcde"), list("xbcde"))]
    # 1 deletion + 2 insertions + 1 substitution over 10 reference words
    assert wer(recs) == pytest.approx(40.0)


def test_wer_applies_spelling_map():
    r = make_record("u", ["colour", "grey"], ["color", "gray"], 0.0, spelling={"colour": "color", "grey": "gray"})
    assert r.errors == 0


def test_wer_needs_reference():
    with pytest.raises(ValueError):
        wer([_rec([], ["a"])])


# --- VAD endpointer ------------------------------------------------------------
def test_vad_all_silence():
    assert vad_endpoint(FeatureSequence(np.zeros((100, 4)), 0.0, 0)) is None


def test_vad_closes_after_interval():
    frames = np.zeros((150, 4))
    frames[10:60] = 1.0  # speech until 600 ms
    assert vad_endpoint(FeatureSequence(frames, 600.0, 0), 0.4, 400.0) == 1000.0


def test_vad_never_closes_when_silence_too_short():
    frames = np.zeros((70, 4))
    frames[:60] = 1.0
    assert vad_endpoint(FeatureSequence(frames, 600.0, 0), 0.4, 400.0) is None


def test_vad_rejects_bad_interval():
    with pytest.raises(ValueError):
        vad_endpoint(FeatureSequence(np.zeros((3, 2)), 0.0, 0), 0.4, 0.0)


def _scan_oracle(frames, thr, interval_ms, hop):
    seen, quiet = False, 0.0
    for i, row in enumerate(frames):
        energy = sum(v * v for v in row) / len(row)
        if energy >= thr:
            seen, quiet = True, 0.0
        elif seen:
            quiet += hop
            if quiet >= interval_ms - 1e-9:
                return (i + 1) * hop
    return None


def test_vad_matches_scan_oracle_on_synthetic_audio():
    utts = synth_dataset(default_dataset_config(), seed=2, count=20)
    for u in utts:
        for interval in (200.0, 300.0, 500.0):
            f = u.features
            assert vad_endpoint(f, 0.4, interval) == _scan_oracle(f.frames, 0.4, interval, f.hop_ms)


# --- latency and percentiles ---------------------------------------------------------
def test_ep_latency_examples():
    assert ep_latency(22, 600.0, 30.0) == 60.0
    assert ep_latency(20, 600.0, 30.0) == 0.0
    r = make_record("u", ["a"], ["a"], 600.0, mic_close_frame=18)
    assert r.ep_latency_ms == -60.0 and r.early_cutoff


def test_record_latency_presence_invariant():
    with pytest.raises(ValueError):
        EvalRecord("u", ("a",), ("a",), 0.0, mic_close_frame=3)


def test_percentile_examples():
    assert percentile([5], 90) == 5
    assert percentile(range(1, 11), 50) == 5
    assert percentile(range(1, 11), 90) == 9
    with pytest.raises(ValueError):
        percentile([], 50)
    with pytest.raises(ValueError):
        percentile([1], 101)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=30))
def test_p50_never_exceeds_p90(values):
    assert percentile(values, 50) <= percentile(values, 90)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.one_of(st.none(), st.integers(0, 200)), min_size=1, max_size=4), st.floats(0, 2000))
def test_combined_close_is_earliest(frames, speech_end):
    combined = combine_close_frames(*frames)
    present = [f for f in frames if f is not None]
    if not present:
        assert combined is None
        return
    for f in present:
        assert ep_latency(combined, speech_end) <= ep_latency(f, speech_end)


def test_close_frame_rounding():
    assert close_frame_for_ms(600.0, 30.0) == 20
    assert close_frame_for_ms(601.0, 30.0) == 21


# --- configuration ---------------------------------------------------------------------
def test_packaged_default_matches_dataclass():
    assert load_experiment_config(packaged_config("default")) == ExperimentConfig()


def test_config_rejects_unknown_keys_and_bad_values():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"sweep": {"lambdas": [1.5]}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"decode": {"beam_size": 0}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"rnnt_train": {"nope": 1}})


def test_config_dict_round_trip():
    cfg = load_experiment_config(packaged_config("smoke"))
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


# --- sweeps on a small trained system -----------------------------------------------------
@pytest.fixture(scope="module")
def smoke():
    cfg = load_experiment_config(packaged_config("smoke"))
    train, ev = datasets(cfg)
    rnnt = train_first_pass(cfg, train).eval_params
    system = make_system(cfg, rnnt)
    las = train_second_pass(cfg, system, train).eval_params
    return cfg, system.replace(las=las), ev


def test_single_identity_config(smoke):
    cfg, system, ev = smoke
    evaluator = Evaluator(system, ev, cfg.decode, cfg.vad)
    (pt,) = sweep_tradeoff(evaluator, [RunConfig("plain")])
    fresh = Evaluator(system, ev, cfg.decode, cfg.vad).point(RunConfig("plain"))
    assert (pt.wer, pt.ep50_ms, pt.ep90_ms) == (fresh.wer, fresh.ep50_ms, fresh.ep90_ms)
    assert pt.ep50_ms <= pt.ep90_ms


def test_lambda_zero_never_worse_than_first_pass(smoke):
    cfg, system, ev = smoke
    evaluator = Evaluator(system, ev, cfg.decode, cfg.vad)
    first, *rest = sweep_tradeoff(evaluator, [RunConfig("fp"), RunConfig("l0", lambda_las=0.0),
                                              RunConfig("l5", lambda_las=0.5)])
    assert min(p.wer for p in rest) <= first.wer
    assert rest[0].wer == first.wer


def test_sweep_csv_is_reproducible(smoke, tmp_path):
    cfg, system, ev = smoke
    grid = [RunConfig("a"), RunConfig("b", eos_decode_penalty=2.0), RunConfig("c", use_joint_eos=False,
                                                                             vad_interval_ms=300.0)]
    for name in ("x.csv", "y.csv"):
        write_sweep_csv(sweep_tradeoff(Evaluator(system, ev, cfg.decode, cfg.vad), grid), tmp_path / name)
    assert (tmp_path / "x.csv").read_text() == (tmp_path / "y.csv").read_text()
    with open(tmp_path / "x.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["config_id", "wer", "sub", "ins", "del", "ep50_ms", "ep90_ms", "n_utts", "n_no_close"]
    assert [r[0] for r in rows[1:]] == ["a", "b", "c"]


def test_never_closed_utterances_fall_back_to_utterance_end(smoke):
    cfg, system, ev = smoke
    pt = Evaluator(system, ev, cfg.decode, cfg.vad).point(RunConfig("no_ep", use_joint_eos=False))
    assert pt.n_no_close == len(ev)
    ends = [u.features.duration_ms - u.features.speech_end_ms for u in ev]
    assert pt.ep50_ms == percentile(ends, 50)
    excl = Evaluator(system, ev, cfg.decode, cfg.vad, fallback="exclude").point(RunConfig("x", use_joint_eos=False))
    assert math.isnan(excl.ep50_ms)


def test_empty_grid_rejected(smoke):
    cfg, system, ev = smoke
    with pytest.raises(ValueError):
        sweep_tradeoff(Evaluator(system, ev, cfg.decode, cfg.vad), [])
