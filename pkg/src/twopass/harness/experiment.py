"""Toy reproduction run: train every model, then measure the qualitative claims."""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from ..rnnt import EndpointerPenaltyConfig
from ..quant import quantized_params
from ..training import save_checkpoint, write_loss_curve
from .config import ExperimentConfig
from .pipeline import (
    Evaluator,
    RunConfig,
    SweepPoint,
    datasets,
    default_grid,
    finetune_second_pass,
    make_system,
    sweep_tradeoff,
    train_first_pass,
    train_second_pass,
    write_sweep_csv,
)


@dataclass
class ExperimentReport:
    first_pass_wer: float = 0.0
    no_domain_id_wer: float = 0.0
    rescore_wers: dict = field(default_factory=dict)  # lambda -> WER (MWER-tuned rescorer)
    rescore_ce_wers: dict = field(default_factory=dict)  # lambda -> WER (cross-entropy rescorer)
    penalty_close_frames: dict = field(default_factory=dict)  # eos penalty -> median close frame
    joint_ep50_ms: float = 0.0
    joint_ep90_ms: float = 0.0
    joint_wer: float = 0.0
    combined_ep50_ms: float = 0.0
    combined_wer: float = 0.0
    vad_ep50_ms: float = 0.0
    vad_ep90_ms: float = 0.0
    vad_wer: float = 0.0
    no_ep_wer: float = 0.0
    quantized_wer: float = 0.0
    mwer_skipped: int = 0
    timings_s: dict = field(default_factory=dict)
    sweep: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("sweep")
        return d


def _point(ev: Evaluator, run: RunConfig) -> SweepPoint:
    return ev.point(run)


def run_experiment(cfg: ExperimentConfig, out_dir=None, log: Callable[[str], None] = lambda s: None) -> ExperimentReport:
    """Train main, no-domain-id and no-endpointer first passes plus the rescorer, then evaluate."""
    rep = ExperimentReport()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        rep.timings_s[name] = round(now - clock, 2)
        clock = now
        log(f"{name}: {rep.timings_s[name]} s")

    train, ev_utts = datasets(cfg)
    vocab = cfg.dataset_config().vocab()
    lap("data")

    main = train_first_pass(cfg, train)
    lap("train_rnnt")
    # same schedule as the main model, so the only difference is the one-hot
    cfg_nodi = dataclasses.replace(cfg, domain_onehot=False)
    no_di = train_first_pass(cfg_nodi, train)
    lap("train_rnnt_no_domain_id")
    aux_opt = dataclasses.replace(cfg.rnnt_train, max_steps=cfg.baseline_train_steps)
    cfg_noep = dataclasses.replace(cfg, endpointer=EndpointerPenaltyConfig(), rnnt_train=aux_opt)
    no_ep = train_first_pass(cfg_noep, train)
    lap("train_rnnt_no_endpointer")

    system = make_system(cfg, main.eval_params)
    las_ce = train_second_pass(cfg, system, train)
    lap("train_las")
    system_ce = system.replace(las=las_ce.eval_params)
    mwer_res, stats = finetune_second_pass(cfg, system_ce, train)
    rep.mwer_skipped = stats.skipped
    system_mwer = system.replace(las=mwer_res.eval_params)
    lap("mwer")

    ev = Evaluator(system_mwer, ev_utts, cfg.decode, cfg.vad)
    points = sweep_tradeoff(ev, default_grid(cfg))
    by_id = {p.config.config_id: p for p in points}
    first = _point(ev, RunConfig("first_pass"))
    rep.first_pass_wer = rep.joint_wer = first.wer
    rep.joint_ep50_ms, rep.joint_ep90_ms = first.ep50_ms, first.ep90_ms
    rep.rescore_wers = {p.config.lambda_las: p.wer for p in points if p.config.lambda_las is not None}
    rep.penalty_close_frames = {
        p.config.eos_decode_penalty: p.median_close_frame
        for p in points
        if p.config.lambda_las is None and p.config.use_joint_eos and p.config.vad_interval_ms is None
    }
    combined = by_id.get(f"eos+vad={cfg.vad.silence_interval_ms:g}") or _point(
        ev, RunConfig("eos+vad", vad_interval_ms=cfg.vad.silence_interval_ms))
    rep.combined_ep50_ms, rep.combined_wer = combined.ep50_ms, combined.wer
    lap("evaluate_main")

    ev_ce = Evaluator(system_ce, ev_utts, cfg.decode, cfg.vad)
    ev_ce._fp, ev_ce._enc = ev._fp, ev._enc  # same first pass, different rescorer
    rep.rescore_ce_wers = {lam: _point(ev_ce, RunConfig(f"ce_lambda={lam:g}", lambda_las=float(lam))).wer
                           for lam in cfg.sweep.lambdas}
    lap("evaluate_ce_rescorer")

    ev_nodi = Evaluator(make_system(cfg_nodi, no_di.eval_params), ev_utts, cfg.decode, cfg.vad)
    rep.no_domain_id_wer = _point(ev_nodi, RunConfig("no_domain_id")).wer
    lap("evaluate_no_domain_id")

    ev_noep = Evaluator(make_system(cfg_noep, no_ep.eval_params), ev_utts, cfg.decode, cfg.vad)
    vad_pt = _point(ev_noep, RunConfig("vad_baseline", use_joint_eos=False,
                                       vad_interval_ms=cfg.vad.silence_interval_ms))
    rep.vad_ep50_ms, rep.vad_ep90_ms, rep.vad_wer = vad_pt.ep50_ms, vad_pt.ep90_ms, vad_pt.wer
    rep.no_ep_wer = _point(ev_noep, RunConfig("no_ep_full", use_joint_eos=False)).wer
    lap("evaluate_vad_baseline")

    ev_q = Evaluator(make_system(cfg, quantized_params(main.eval_params)), ev_utts, cfg.decode, cfg.vad)
    rep.quantized_wer = _point(ev_q, RunConfig("quantized")).wer
    lap("evaluate_quantized")

    rep.sweep = points + [first, vad_pt]
    if out is not None:
        write_sweep_csv(rep.sweep, out / "sweep.csv")
        write_loss_curve(main.curve, out / "rnnt_loss.csv")
        write_loss_curve(las_ce.curve, out / "las_loss.csv")
        rnnt_cfg = {"kind": "rnnt", "model": main.params.config.to_dict()}
        save_checkpoint(main.eval_params, out / "rnnt.ckpt", vocab, rnnt_cfg)
        save_checkpoint(mwer_res.eval_params, out / "las.ckpt", vocab,
                        {"kind": "las", "model": mwer_res.params.config.to_dict()})
        (out / "report.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True, default=str))
    return rep

