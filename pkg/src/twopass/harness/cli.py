"""Command-line entry point. Every subcommand reads and writes one run directory (``--out``).

Layout of a run directory::

    data/train.tpds  data/eval.tpds   synthetic corpora
    rnnt.ckpt  las.ckpt  las_mwer.ckpt  rnnt.q.ckpt
    lattices/<uid>.lat                first-pass lattices
    rescored/<uid>.lat                rescored lattices
    *.csv                             metrics and loss curves
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from importlib import resources
from pathlib import Path

from ..frontend import ConfigError, load_dataset, save_dataset, synth_dataset
from ..lattice import LatticeFormatError, RescoreIncompleteError
from ..las import bench_rescore, cache_from_shared
from ..quant import model_size_report, quantize_checkpoint
from ..training import CheckpointError, TrainingDivergedError, load_checkpoint, save_checkpoint, write_loss_curve
from .config import ExperimentConfig, load_experiment_config
from .pipeline import (
    Evaluator,
    RunConfig,
    default_grid,
    finetune_second_pass,
    first_pass,
    las_from_checkpoint,
    make_system,
    plot_sweep,
    rnnt_from_checkpoint,
    sweep_tradeoff,
    train_first_pass,
    train_second_pass,
    write_sweep_csv,
)

EXIT_OK, EXIT_CONFIG, EXIT_CONTRACT = 0, 2, 3


class ContractViolation(RuntimeError):
    """A stage was asked to run without its inputs, or produced invalid output."""


def packaged_config(name: str) -> Path:
    return Path(str(resources.files("twopass") / "configs" / f"{name}.yaml"))


def _config(args) -> ExperimentConfig:
    path = Path(args.config) if args.config else packaged_config("default")
    if not path.exists() and args.config and packaged_config(args.config).exists():
        path = packaged_config(args.config)
    cfg = load_experiment_config(path)
    return cfg if args.seed is None else cfg.with_seed(args.seed)


def _data(cfg: ExperimentConfig, out: Path):
    d = out / "data"
    if not (d / "train.tpds").exists() or not (d / "eval.tpds").exists():
        _gen_data(cfg, out)
    train, _ = load_dataset(d / "train.tpds")
    ev, _ = load_dataset(d / "eval.tpds")
    return train, ev


def _gen_data(cfg: ExperimentConfig, out: Path):
    dc = cfg.dataset_config()
    d = out / "data"
    d.mkdir(parents=True, exist_ok=True)
    train = synth_dataset(dc)
    ev = synth_dataset(dc, seed=int(cfg.eval.get("seed", 99)), count=int(cfg.eval.get("count", 500)))
    vocab = dc.vocab()
    save_dataset(d / "train.tpds", train, vocab)
    save_dataset(d / "eval.tpds", ev, vocab)
    with open(d / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "uid", "domain", "speech_end_ms", "duration_ms", "transcript"])
        for split, utts in (("train", train), ("eval", ev)):
            for u in utts:
                w.writerow([split, u.uid, u.domain_id, u.features.speech_end_ms, u.features.duration_ms,
                            " ".join(vocab.decode(u.tokens))])
    return train, ev


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise ContractViolation(f"{path.name} not found in run directory; run `{stage}` first")
    return path


def _system(cfg: ExperimentConfig, out: Path, las: str | None = None, quantized: bool = False):
    ckpt = load_checkpoint(_need(out / "rnnt.ckpt", "train-rnnt"))
    if quantized and not ckpt.quantized:
        ckpt = quantize_checkpoint(ckpt)
    system = make_system(cfg, rnnt_from_checkpoint(ckpt))
    if las is not None:
        lckpt = load_checkpoint(_need(out / las, "train-las"))
        if quantized and not lckpt.quantized:
            lckpt = quantize_checkpoint(lckpt)
        system = system.replace(las=las_from_checkpoint(lckpt))
    return system


def _rescorer_name(out: Path) -> str:
    return "las_mwer.ckpt" if (out / "las_mwer.ckpt").exists() else "las.ckpt"


def _meta(cfg: ExperimentConfig, kind: str, model_cfg) -> dict:
    return {"kind": kind, "model": model_cfg.to_dict(), "experiment": cfg.to_dict()}


def cmd_gen_data(cfg, out, args):
    train, ev = _gen_data(cfg, out)
    print(f"wrote {len(train)} train and {len(ev)} eval utterances to {out / 'data'}")


def cmd_train_rnnt(cfg, out, args):
    train, _ = _data(cfg, out)
    res = train_first_pass(cfg, train)
    vocab = cfg.dataset_config().vocab()
    save_checkpoint(res.eval_params, out / "rnnt.ckpt", vocab, _meta(cfg, "rnnt", res.params.config))
    write_loss_curve(res.curve, out / "rnnt_loss.csv")
    print(f"rnnt: {len(res.curve)} steps, final loss {res.curve[-1][1]:.4f}")


def cmd_train_las(cfg, out, args):
    train, _ = _data(cfg, out)
    system = _system(cfg, out)
    res = train_second_pass(cfg, system, train)
    save_checkpoint(res.eval_params, out / "las.ckpt", system.vocab, _meta(cfg, "las", res.params.config))
    write_loss_curve(res.curve, out / "las_loss.csv")
    print(f"las: {len(res.curve)} steps, final loss {res.curve[-1][1]:.4f}")


def cmd_mwer_finetune(cfg, out, args):
    train, _ = _data(cfg, out)
    system = _system(cfg, out, las="las.ckpt")
    res, stats = finetune_second_pass(cfg, system, train)
    save_checkpoint(res.eval_params, out / "las_mwer.ckpt", system.vocab, _meta(cfg, "las", res.params.config))
    write_loss_curve(res.curve, out / "mwer_loss.csv")
    print(f"mwer: {stats.used} utterances used, {stats.skipped} skipped (n-best < 2)")


def _write_lattices(lats, directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    for lat in lats:
        (directory / f"{lat.utt_id}.lat").write_text(lat.dumps())


def cmd_decode(cfg, out, args):
    _, ev = _data(cfg, out)
    evaluator = Evaluator(_system(cfg, out), ev, cfg.decode, cfg.vad)
    run = RunConfig("first_pass", eos_decode_penalty=cfg.decode.eos_decode_penalty)
    _write_lattices([fp.result.lattice for fp in evaluator.first_pass(run)], out / "lattices")
    point = evaluator.point(run)
    write_sweep_csv([point], out / "decode_metrics.csv")
    print(f"first_pass wer={point.wer:.2f} ep50={point.ep50_ms:.0f}ms ep90={point.ep90_ms:.0f}ms")


def cmd_rescore(cfg, out, args):
    _, ev = _data(cfg, out)
    evaluator = Evaluator(_system(cfg, out, las=_rescorer_name(out)), ev, cfg.decode, cfg.vad)
    lam = cfg.mwer.lambda_las if args.lambda_las is None else args.lambda_las
    run = RunConfig(f"lambda={lam:g}", eos_decode_penalty=cfg.decode.eos_decode_penalty, lambda_las=lam)
    _write_lattices(evaluator.rescored(run), out / "rescored")
    point = evaluator.point(run)
    write_sweep_csv([point], out / "rescore_metrics.csv")
    print(f"rescored lambda={lam:g} wer={point.wer:.2f}")


def cmd_eval(cfg, out, args):
    _, ev = _data(cfg, out)
    tag = "quantized" if args.quantized else "float"
    las = _rescorer_name(out) if (out / "las.ckpt").exists() else None
    evaluator = Evaluator(_system(cfg, out, las=las, quantized=args.quantized), ev, cfg.decode, cfg.vad)
    runs = [RunConfig(f"{tag}_first_pass", eos_decode_penalty=cfg.decode.eos_decode_penalty)]
    if las is not None:
        runs.append(RunConfig(f"{tag}_lambda={cfg.mwer.lambda_las:g}", eos_decode_penalty=cfg.decode.eos_decode_penalty,
                              lambda_las=cfg.mwer.lambda_las))
    points = [evaluator.point(r) for r in runs]
    write_sweep_csv(points, out / f"eval_{tag}.csv")
    for p in points:
        print(f"{p.config.config_id} wer={p.wer:.2f} ep50={p.ep50_ms:.0f}ms ep90={p.ep90_ms:.0f}ms")


def cmd_sweep_endpoint(cfg, out, args):
    _, ev = _data(cfg, out)
    las = _rescorer_name(out) if (out / "las.ckpt").exists() else None
    grid = default_grid(cfg)
    if las is None:
        grid = [r for r in grid if r.lambda_las is None]
    points = sweep_tradeoff(Evaluator(_system(cfg, out, las=las), ev, cfg.decode, cfg.vad), grid)
    write_sweep_csv(points, out / "sweep.csv")
    plotted = plot_sweep(points, out / "sweep.png")
    for p in points:
        print(f"{p.config.config_id:<14} wer={p.wer:6.2f} ep50={p.ep50_ms:6.0f} ep90={p.ep90_ms:6.0f} "
              f"del={p.deletion_rate:5.2f} median_close={p.median_close_frame}")
    if not plotted:
        print("matplotlib not installed; wrote CSV only")


def cmd_bench_rescore(cfg, out, args):
    _, ev = _data(cfg, out)
    system = _system(cfg, out, las=_rescorer_name(out))
    items = []
    for u in ev[: args.utterances]:
        fp = first_pass(system, u, cfg.decode)
        items.append((fp.result.lattice.strip_token(system.vocab.eos_id), cache_from_shared(system.las, fp.e_s)))
    rows = []
    for batched in (True, False):
        st = bench_rescore(items, system.las, batched=batched, repetitions=args.repetitions)
        rows.append(("batched" if batched else "unbatched", st.p50_ms, st.p90_ms))
    with open(out / "bench_rescore.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "p50_ms", "p90_ms"])
        for mode, p50, p90 in rows:
            w.writerow([mode, f"{p50:.3f}", f"{p90:.3f}"])
            print(f"{mode:<10} p50={p50:.3f}ms p90={p90:.3f}ms")


def cmd_quantize(cfg, out, args):
    for name in ("rnnt.ckpt", _rescorer_name(out)):
        path = out / name
        if name == "rnnt.ckpt":
            _need(path, "train-rnnt")
        elif not path.exists():
            continue
        ckpt = load_checkpoint(path)
        q = quantize_checkpoint(ckpt)
        save_checkpoint(q, out / name.replace(".ckpt", ".q.ckpt"))
        before, after = model_size_report(ckpt), model_size_report(q)
        report = [f"[{name}]", "float:"] + before.lines() + ["quantized:"] + after.lines()
        (out / name.replace(".ckpt", ".size.txt")).write_text("\n".join(report) + "\n")
        print("\n".join(report))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-rnnt": cmd_train_rnnt,
    "train-las": cmd_train_las,
    "mwer-finetune": cmd_mwer_finetune,
    "decode": cmd_decode,
    "rescore": cmd_rescore,
    "eval": cmd_eval,
    "sweep-endpoint": cmd_sweep_endpoint,
    "bench-rescore": cmd_bench_rescore,
    "quantize": cmd_quantize,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twopass", description="desk-scale two-pass streaming ASR")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML experiment config (path or packaged name: default, smoke)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=True, help="run directory")
        if name == "eval":
            p.add_argument("--quantized", action="store_true", help="evaluate with 8-bit weights")
        if name == "rescore":
            p.add_argument("--lambda", dest="lambda_las", type=float, default=None)
        if name == "bench-rescore":
            p.add_argument("--utterances", type=int, default=50)
            p.add_argument("--repetitions", type=int, default=3)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContractViolation, CheckpointError, LatticeFormatError, RescoreIncompleteError,
            TrainingDivergedError, ValueError) as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
