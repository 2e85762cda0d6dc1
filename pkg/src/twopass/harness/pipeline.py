"""Two-pass system wiring: decode, rescore, evaluate, sweep and train end to end."""
from __future__ import annotations

import copy
import csv
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from ..frontend import SpellingMap, Utterance, encoder_inputs, synth_dataset
from ..las import LasConfig, LasParams, cache_from_shared, rescore_lattice
from ..lattice import PrefixTreeLattice, ScoreWeights
from ..rnnt import DecodeResult, RnnTConfig, RnnTParams, encode_array, streaming_beam_search
from ..training import (
    Checkpoint,
    LasExample,
    MwerExample,
    MwerStats,
    TrainResult,
    mwer_finetune,
    train_las_ce,
    train_rnnt,
    transducer_examples,
)
from ..vocab import Vocab
from .config import DecodeConfig, ExperimentConfig, VadConfig
from .endpoint import close_frame_for_ms, combine_close_frames, vad_endpoint
from .metrics import EvalRecord, edit_distance, error_counts, make_record, percentile, wer


@dataclass
class TwoPassSystem:
    rnnt: RnnTParams
    vocab: Vocab
    spelling: SpellingMap = field(default_factory=SpellingMap)
    stack_k: int = 4
    subsample_s: int = 3
    num_domains: int | None = 2
    hop_ms: float = 10.0
    las: LasParams | None = None

    @property
    def frame_ms(self) -> float:
        return self.hop_ms * self.subsample_s

    def inputs(self, utt: Utterance) -> np.ndarray:
        return encoder_inputs(utt, self.stack_k, self.subsample_s, self.num_domains)

    def shared_encoding(self, utt: Utterance) -> np.ndarray:
        return encode_array(self.rnnt, self.inputs(utt))

    def words(self, tokens: Iterable[int]) -> list[str]:
        return self.vocab.decode([t for t in tokens if t != self.vocab.eos_id])

    def replace(self, **kw) -> "TwoPassSystem":
        return dataclasses.replace(self, **kw)


# ---------------------------------------------------------------------------
# one utterance
# ---------------------------------------------------------------------------
@dataclass
class FirstPassOutput:
    uid: str
    result: DecodeResult
    e_s: np.ndarray  # shared-encoder frames consumed before the mic closed
    close_frame: int | None
    close_source: str | None  # "eos", "vad" or None


def first_pass(system: TwoPassSystem, utt: Utterance, decode: DecodeConfig, use_eos: bool = True,
               vad: VadConfig | None = None, e_s: np.ndarray | None = None) -> FirstPassOutput:
    """Streaming decode; the mic closes on ``</s>`` and/or an external VAD decision, whichever is first."""
    e_s = system.shared_encoding(utt) if e_s is None else e_s
    stop = None
    if vad is not None:
        ms = vad_endpoint(utt.features, vad.energy_threshold, vad.silence_interval_ms)
        stop = None if ms is None else close_frame_for_ms(ms, system.frame_ms)
    res = streaming_beam_search(
        e_s,
        system.rnnt,
        beam_size=decode.beam_size,
        max_symbols_per_frame=decode.max_symbols_per_frame,
        eos_decode_penalty=decode.eos_decode_penalty if use_eos else math.inf,
        stop_frame=stop,
        utt_id=utt.uid,
        vocab_hash=system.vocab.digest(),
    )
    eos_close = res.mic_close_frame if res.stopped_by == "eos" else None
    close = combine_close_frames(eos_close, stop if res.stopped_by == "external" else None)
    source = None if close is None else ("eos" if close == eos_close else "vad")
    return FirstPassOutput(utt.uid, res, e_s[: res.frames_consumed], close, source)


def second_pass(system: TwoPassSystem, fp: FirstPassOutput, batched: bool = True) -> PrefixTreeLattice:
    if system.las is None:
        raise ValueError("system has no second-pass model")
    lat = fp.result.lattice.strip_token(system.vocab.eos_id)
    cache = cache_from_shared(system.las, fp.e_s)
    return rescore_lattice(lat, cache, system.las, batched=batched)


# ---------------------------------------------------------------------------
# evaluation and sweeps
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class RunConfig:
    """One operating point. ``lambda_las=None`` scores the first pass only."""

    config_id: str = "default"
    eos_decode_penalty: float = 0.0
    use_joint_eos: bool = True
    vad_interval_ms: float | None = None
    lambda_las: float | None = None


@dataclass
class SweepPoint:
    config: RunConfig
    wer: float
    subs: int
    ins: int
    dels: int
    ep50_ms: float
    ep90_ms: float
    n_utts: int
    n_no_close: int
    median_close_frame: float | None = None
    records: list = field(default_factory=list, repr=False)

    @property
    def deletion_rate(self) -> float:
        n = sum(len(r.ref) for r in self.records)
        return 100.0 * self.dels / n if n else 0.0


SWEEP_COLUMNS = ["config_id", "wer", "sub", "ins", "del", "ep50_ms", "ep90_ms", "n_utts", "n_no_close"]


class Evaluator:
    """Caches first-pass decodes and rescored lattices across operating points."""

    def __init__(self, system: TwoPassSystem, utts: Sequence[Utterance], decode: DecodeConfig, vad: VadConfig,
                 fallback: str = "utterance_end"):
        if fallback not in ("utterance_end", "exclude"):
            raise ValueError("fallback must be 'utterance_end' or 'exclude'")
        self.system = system
        self.utts = sorted(utts, key=lambda u: u.uid)
        self.decode = decode
        self.vad = vad
        self.fallback = fallback
        self._enc: dict = {}
        self._fp: dict = {}
        self._rescored: dict = {}

    def _e_s(self, utt):
        if utt.uid not in self._enc:
            self._enc[utt.uid] = self.system.shared_encoding(utt)
        return self._enc[utt.uid]

    def first_pass(self, run: RunConfig) -> list[FirstPassOutput]:
        key = (run.eos_decode_penalty, run.use_joint_eos, run.vad_interval_ms)
        if key not in self._fp:
            dec = dataclasses.replace(self.decode, eos_decode_penalty=run.eos_decode_penalty)
            vad = None if run.vad_interval_ms is None else dataclasses.replace(
                self.vad, silence_interval_ms=run.vad_interval_ms)
            self._fp[key] = [first_pass(self.system, u, dec, run.use_joint_eos, vad, self._e_s(u)) for u in self.utts]
        return self._fp[key]

    def rescored(self, run: RunConfig) -> list[PrefixTreeLattice]:
        key = (run.eos_decode_penalty, run.use_joint_eos, run.vad_interval_ms)
        if key not in self._rescored:
            self._rescored[key] = [second_pass(self.system, fp) for fp in self.first_pass(run)]
        return self._rescored[key]

    def records(self, run: RunConfig) -> list[EvalRecord]:
        fps = self.first_pass(run)
        if run.lambda_las is None:
            hyps = [fp.result.best for fp in fps]
        else:
            w = ScoreWeights(run.lambda_las)
            hyps = [lat.best_path(w)[0] if lat.terminals else () for lat in self.rescored(run)]
        return [
            make_record(u.uid, self.system.words(u.tokens), self.system.words(h), u.features.speech_end_ms,
                        fp.close_frame, self.system.frame_ms, self.system.spelling)
            for u, fp, h in zip(self.utts, fps, hyps)
        ]

    def point(self, run: RunConfig) -> SweepPoint:
        recs = self.records(run)
        lat = []
        for u, r in zip(self.utts, recs):
            if r.ep_latency_ms is not None:
                lat.append(r.ep_latency_ms)
            elif self.fallback == "utterance_end":
                lat.append(u.features.duration_ms - u.features.speech_end_ms)
        s, i, d, _ = error_counts(recs)
        closes = [r.mic_close_frame for r in recs if r.mic_close_frame is not None]
        return SweepPoint(
            run,
            wer(recs),
            s,
            i,
            d,
            percentile(lat, 50) if lat else math.nan,
            percentile(lat, 90) if lat else math.nan,
            len(recs),
            sum(r.mic_close_frame is None for r in recs),
            float(np.median(closes)) if closes else None,
            recs,
        )


def sweep_tradeoff(evaluator: Evaluator, grid: Sequence[RunConfig]) -> list[SweepPoint]:
    if not grid:
        raise ValueError("sweep grid is empty")
    return [evaluator.point(run) for run in grid]


def write_sweep_csv(points: Sequence[SweepPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for p in points:
            w.writerow([p.config.config_id, f"{p.wer:.4f}", p.subs, p.ins, p.dels, f"{p.ep50_ms:.1f}",
                        f"{p.ep90_ms:.1f}", p.n_utts, p.n_no_close])


def plot_sweep(points: Sequence[SweepPoint], path) -> bool:
    """WER vs EP90 scatter; returns False when matplotlib is unavailable."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return False
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter([p.ep90_ms for p in points], [p.wer for p in points])
    for p in points:
        ax.annotate(p.config.config_id, (p.ep90_ms, p.wer), fontsize=7)
    ax.set_xlabel("EP90 (ms)")
    ax.set_ylabel("WER (%)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return True


def default_grid(cfg: ExperimentConfig) -> list[RunConfig]:
    """Decode-penalty points, VAD-only baselines, joint+VAD points and a lambda sweep."""
    g = cfg.sweep
    grid = [RunConfig(f"eos_pen={p:g}", eos_decode_penalty=float(p)) for p in g.eos_decode_penalties]
    grid += [RunConfig(f"vad={v:g}", use_joint_eos=False, vad_interval_ms=float(v)) for v in g.vad_intervals_ms]
    grid += [RunConfig(f"eos+vad={v:g}", vad_interval_ms=float(v)) for v in g.vad_intervals_ms]
    grid.append(RunConfig("no_ep", use_joint_eos=False))
    grid += [RunConfig(f"lambda={lam:g}", lambda_las=float(lam)) for lam in g.lambdas]
    return grid


# ---------------------------------------------------------------------------
# building and training
# ---------------------------------------------------------------------------
def rnnt_config_for(cfg: ExperimentConfig, vocab: Vocab) -> RnnTConfig:
    dc = cfg.dataset_config()
    extra = len(dc.domains) if cfg.domain_onehot else 0
    over = dict(cfg.rnnt)
    over.setdefault("seed", cfg.seed)
    return RnnTConfig(input_dim=dc.stack_k * dc.feature_dim + extra, vocab_size=len(vocab),
                      blank_id=vocab.blank_id, eos_id=vocab.eos_id, **over)


def las_config_for(cfg: ExperimentConfig, rnnt_cfg: RnnTConfig) -> LasConfig:
    over = dict(cfg.las)
    over.setdefault("seed", cfg.seed + 1)
    return LasConfig(source_dim=rnnt_cfg.enc_proj, vocab_size=rnnt_cfg.vocab_size, **over)


def make_system(cfg: ExperimentConfig, rnnt: RnnTParams, las: LasParams | None = None) -> TwoPassSystem:
    dc = cfg.dataset_config()
    return TwoPassSystem(rnnt, dc.vocab(), dc.spelling_map(), dc.stack_k, dc.subsample_s,
                         len(dc.domains) if cfg.domain_onehot else None, dc.hop_ms, las)


def datasets(cfg: ExperimentConfig) -> tuple[list[Utterance], list[Utterance]]:
    dc = cfg.dataset_config()
    train = synth_dataset(dc)
    ev = synth_dataset(dc, seed=int(cfg.eval.get("seed", 99)), count=int(cfg.eval.get("count", 500)))
    return train, ev


def _opt(opt, seed: int):
    return dataclasses.replace(opt, seed=seed)


def train_first_pass(cfg: ExperimentConfig, train: Sequence[Utterance], on_step: Callable | None = None) -> TrainResult:
    dc = cfg.dataset_config()
    vocab = dc.vocab()
    rc = rnnt_config_for(cfg, vocab)
    examples = transducer_examples(train, dc.stack_k, dc.subsample_s, len(dc.domains) if cfg.domain_onehot else None)
    return train_rnnt(examples, RnnTParams.init(rc), _opt(cfg.rnnt_train, cfg.seed), cfg.endpointer, on_step=on_step)


def train_second_pass(cfg: ExperimentConfig, system: TwoPassSystem, train: Sequence[Utterance],
                      on_step: Callable | None = None) -> TrainResult:
    """Cross-entropy training of the rescorer on frozen shared-encoder outputs."""
    lc = las_config_for(cfg, system.rnnt.config)
    examples = [LasExample(system.shared_encoding(u), u.tokens) for u in train]
    return train_las_ce(examples, LasParams.init(lc), _opt(cfg.las_train, cfg.seed + 1), on_step=on_step)


def mwer_examples(system: TwoPassSystem, utts: Sequence[Utterance], decode: DecodeConfig) -> list[MwerExample]:
    out = []
    spelling = system.spelling
    for u in utts:
        fp = first_pass(system, u, decode)
        lat = fp.result.lattice.strip_token(system.vocab.eos_id)
        ref = [spelling.get(w, w) for w in system.words(u.tokens)]
        errs = {}
        for toks, _ in lat.hypotheses():
            hyp = [spelling.get(w, w) for w in system.words(toks)]
            errs[toks] = edit_distance(ref, hyp)[0]
        out.append(MwerExample(fp.e_s, lat, errs))
    return out


def finetune_second_pass(cfg: ExperimentConfig, system: TwoPassSystem, train: Sequence[Utterance],
                         on_step: Callable | None = None) -> tuple[TrainResult, MwerStats]:
    """MWER on a copy of the system's rescorer; the original stays untouched."""
    m = cfg.mwer
    examples = mwer_examples(system, list(train)[: m.utterances], cfg.decode)
    stats = MwerStats()
    res = mwer_finetune(copy.deepcopy(system.las), examples, m.nbest, _opt(m.train, cfg.seed + 2), m.lambda_las, stats,
                        on_step=on_step)
    return res, stats


# ---------------------------------------------------------------------------
# checkpoints <-> models
# ---------------------------------------------------------------------------
def rnnt_from_checkpoint(ckpt: Checkpoint) -> RnnTParams:
    if ckpt.config.get("kind") != "rnnt":
        raise ValueError("checkpoint does not hold a first-pass model")
    return ckpt.restore(RnnTParams.init(RnnTConfig(**ckpt.config["model"])))


def las_from_checkpoint(ckpt: Checkpoint) -> LasParams:
    if ckpt.config.get("kind") != "las":
        raise ValueError("checkpoint does not hold a second-pass model")
    return ckpt.restore(LasParams.init(LasConfig(**ckpt.config["model"])))
