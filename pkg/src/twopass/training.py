"""Optimisation loops, weight averaging and checkpoint files."""
from __future__ import annotations

import copy
import csv
import io
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .frontend import Utterance, encoder_inputs
from .las import LasParams, cache_from_shared, las_ce_loss, make_las_batch, rescore_lattice, sequence_logprobs_tensor
from .lattice import PrefixTreeLattice, ScoreWeights
from .nncore import Tensor, backward, named_parameters, softmax
from .nncore.autodiff import tsum
from .rnnt import EndpointerPenaltyConfig, RnnTParams, batch_loss, make_batch
from .vocab import Vocab


class TrainingDivergedError(RuntimeError):
    """Loss became NaN or infinite."""


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class OptimizerConfig:
    """Step rule and schedule.

    ``method`` is ``"sgd"`` (optionally with heavy-ball ``momentum``) or
    ``"adam"``. ``schedule="exponential"`` multiplies the rate by
    ``decay_rate`` every ``decay_steps`` steps (smoothly).
    """

    learning_rate: float = 1e-2
    schedule: str = "constant"
    decay_rate: float = 1.0
    decay_steps: int = 1000
    batch_size: int = 16
    max_steps: int = 1000
    seed: int = 0
    method: str = "sgd"
    momentum: float = 0.0
    clip_norm: float | None = 1.0
    ema_decay: float = 0.999
    use_ema: bool = True

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.schedule not in ("constant", "exponential"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.method not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.method!r}")
        if self.batch_size < 1 or self.max_steps < 0 or self.decay_steps < 1:
            raise ValueError("batch_size and decay_steps must be >= 1, max_steps >= 0")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    def lr_at(self, step: int) -> float:
        if self.schedule == "constant":
            return self.learning_rate
        return self.learning_rate * self.decay_rate ** (step / self.decay_steps)

    @classmethod
    def from_dict(cls, d: Mapping) -> "OptimizerConfig":
        return cls(**dict(d))

    def to_dict(self) -> dict:
        return asdict(self)


class Optimizer:
    def __init__(self, tensors: Sequence[Tensor], cfg: OptimizerConfig):
        self.tensors = list(tensors)
        self.cfg = cfg
        self.step_count = 0
        self._m = [np.zeros_like(t.data) for t in self.tensors]
        self._v = [np.zeros_like(t.data) for t in self.tensors] if cfg.method == "adam" else None

    def step(self) -> tuple[float, float]:
        """Apply accumulated ``.grad``s, clear them; returns (lr, pre-clip grad norm)."""
        cfg = self.cfg
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in self.tensors]
        norm = math.sqrt(math.fsum(float(np.vdot(g, g)) for g in grads))
        scale = 1.0
        if cfg.clip_norm is not None and norm > cfg.clip_norm:
            scale = cfg.clip_norm / norm
        lr = cfg.lr_at(self.step_count)
        self.step_count += 1
        for i, (t, g) in enumerate(zip(self.tensors, grads)):
            g = g * scale
            if cfg.method == "sgd":
                if cfg.momentum > 0:
                    self._m[i] = cfg.momentum * self._m[i] + g
                    g = self._m[i]
                t.data = t.data - lr * g
            else:
                b1, b2 = 0.9, 0.999
                self._m[i] = b1 * self._m[i] + (1 - b1) * g
                self._v[i] = b2 * self._v[i] + (1 - b2) * g * g
                mh = self._m[i] / (1 - b1**self.step_count)
                vh = self._v[i] / (1 - b2**self.step_count)
                t.data = t.data - lr * mh / (np.sqrt(vh) + 1e-8)
            t.grad = None
        return lr, norm


# ---------------------------------------------------------------------------
# weight averaging
# ---------------------------------------------------------------------------
@dataclass
class EmaState:
    shadow: dict
    decay: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError("decay must lie in [0, 1]")

    @classmethod
    def from_params(cls, params, decay: float = 0.999) -> "EmaState":
        return cls({k: np.array(v, dtype=np.float64) for k, v in _as_arrays(params).items()}, decay)


def _as_arrays(params) -> dict:
    if isinstance(params, Mapping):
        return {k: np.asarray(v.data if isinstance(v, Tensor) else v) for k, v in params.items()}
    return {k: t.data for k, t in named_parameters(params)}


def ema_update(ema: EmaState, params) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * params, elementwise; returns a new state."""
    cur = _as_arrays(params)
    if set(cur) != set(ema.shadow):
        raise ValueError("parameter names differ from the EMA shadow")
    d = ema.decay
    out = {}
    for k, s in ema.shadow.items():
        p = np.asarray(cur[k], dtype=np.float64)
        if p.shape != s.shape:
            raise ValueError(f"{k}: shape {p.shape} does not match shadow {s.shape}")
        if d == 1.0:
            out[k] = s.copy()
        elif d == 0.0:
            out[k] = p.copy()
        else:
            out[k] = d * s + (1.0 - d) * p
    return EmaState(out, d)


def with_weights(params, arrays: Mapping):
    """Deep copy of a parameter tree with tensors replaced by ``arrays``."""
    out = copy.deepcopy(params)
    for name, t in named_parameters(out):
        t.data = np.array(arrays[name], dtype=np.float64)
        t.grad = None
    return out


# ---------------------------------------------------------------------------
# generic loop
# ---------------------------------------------------------------------------
@dataclass
class TrainResult:
    params: object
    ema_params: object
    curve: list = field(default_factory=list)  # (step, loss, lr, grad_norm)

    @property
    def eval_params(self):
        return self.ema_params if self.ema_params is not None else self.params

    def write_curve(self, path) -> None:
        write_loss_curve(self.curve, path)


def write_loss_curve(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr", "grad_norm"])
        for step, loss, lr, gn in curve:
            w.writerow([step, repr(float(loss)), repr(float(lr)), repr(float(gn))])


def length_batches(lengths: Sequence[int], batch_size: int) -> list[np.ndarray]:
    order = np.argsort(np.asarray(lengths), kind="stable")
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def run_training(
    params,
    batches: Sequence,
    loss_fn: Callable[[object], tuple[Tensor, int]],
    opt: OptimizerConfig,
    tensors: Sequence[Tensor] | None = None,
    on_step: Callable | None = None,
) -> TrainResult:
    """Cycle over ``batches`` (reshuffled each pass) for ``opt.max_steps`` steps.

    ``loss_fn(batch)`` returns ``(summed_loss, count)``; the step uses the mean.
    Only ``tensors`` (default: every parameter) are updated.
    """
    if not batches:
        raise ValueError("training needs a non-empty dataset")
    tensors = list(tensors) if tensors is not None else [t for _, t in named_parameters(params)]
    optim = Optimizer(tensors, opt)
    ema = EmaState.from_params(params, opt.ema_decay) if opt.use_ema else None
    rng = np.random.default_rng(opt.seed)
    curve = []
    order: list[int] = []
    for step in range(opt.max_steps):
        if not order:
            order = list(rng.permutation(len(batches)))
        batch = batches[order.pop(0)]
        total, count = loss_fn(batch)
        value = float(total.item()) / max(count, 1)
        if not math.isfinite(value):
            raise TrainingDivergedError(f"non-finite loss {value} at step {step}")
        if count == 0 or not total.requires_grad:
            for t in tensors:
                t.grad = None
            lr, norm = opt.lr_at(step), 0.0
            optim.step_count += 1
        else:
            backward(total * (1.0 / count))
            lr, norm = optim.step()
        for _, t in named_parameters(params):
            t.grad = None
        if ema is not None:
            ema = ema_update(ema, params)
        curve.append((step, value, lr, norm))
        if on_step is not None:
            on_step(step, value)
    ema_params = with_weights(params, ema.shadow) if ema is not None else None
    return TrainResult(params, ema_params, curve)


# ---------------------------------------------------------------------------
# first pass
# ---------------------------------------------------------------------------
@dataclass
class TransducerExample:
    inputs: np.ndarray
    tokens: tuple
    domain_id: int
    t_eos_frame: int


def transducer_examples(utts: Iterable[Utterance], stack_k: int, subsample_s: int,
                        num_domains: int | None) -> list[TransducerExample]:
    return [
        TransducerExample(encoder_inputs(u, stack_k, subsample_s, num_domains), u.tokens, u.domain_id, u.t_eos_frame)
        for u in utts
    ]


def train_rnnt(dataset: Sequence[TransducerExample], params: RnnTParams, opt: OptimizerConfig,
               ep_cfg: EndpointerPenaltyConfig, on_step: Callable | None = None) -> TrainResult:
    """Minibatch transducer training with the optional ``</s>`` timing penalty."""
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    batches = [
        make_batch(
            [dataset[i].inputs for i in idx],
            [dataset[i].tokens for i in idx],
            [dataset[i].domain_id for i in idx],
            [dataset[i].t_eos_frame for i in idx],
            params.config,
            ep_cfg,
        )
        for idx in length_batches([len(ex.inputs) for ex in dataset], opt.batch_size)
    ]
    return run_training(params, batches, lambda b: (batch_loss(params, b, ep_cfg), len(b.t_lens)), opt,
                        on_step=on_step)


# ---------------------------------------------------------------------------
# second pass
# ---------------------------------------------------------------------------
@dataclass
class LasExample:
    e_s: np.ndarray  # frozen shared-encoder output
    tokens: tuple


def train_las_ce(dataset: Sequence[LasExample], params: LasParams, opt: OptimizerConfig,
                 on_step: Callable | None = None) -> TrainResult:
    """Teacher-forced cross-entropy. The shared encoder enters only as fixed arrays."""
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    batches = [
        make_las_batch([dataset[i].e_s for i in idx], [dataset[i].tokens for i in idx], params.config)
        for idx in length_batches([len(ex.e_s) for ex in dataset], opt.batch_size)
    ]
    return run_training(params, batches, lambda b: (las_ce_loss(params, b), b.size), opt, on_step=on_step)


def mwer_loss(las_scores: Tensor, rnnt_scores, errors, lambda_las: float, w_bar: float | None = None):
    """Expected relative word errors over an n-best list.

    P = softmax((1 - lambda) * rnnt + lambda * las) over the list; loss =
    sum_i P_i (W_i - W_bar) with W_bar = sum_i P_i W_i held constant, so the
    value is ~0 while the gradient equals that of the expected risk. Pass
    ``w_bar`` to pin it (finite-difference checks). Returns (loss, w_bar).
    """
    rnnt_scores = np.asarray(rnnt_scores, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    combined = las_scores * lambda_las + (1.0 - lambda_las) * rnnt_scores
    probs = softmax(combined, axis=-1)
    if w_bar is None:
        w_bar = float(np.dot(probs.data, errors))
    return tsum(probs * (errors - w_bar)), w_bar


@dataclass
class MwerExample:
    e_s: np.ndarray
    lattice: PrefixTreeLattice  # first-pass lattice, end-of-query token already removed
    errors: dict  # hypothesis tokens -> word errors against the reference


@dataclass
class MwerStats:
    used: int = 0
    skipped: int = 0


def mwer_nbest(example: MwerExample, params: LasParams, nbest_size: int, lambda_las: float):
    """Current n-best (tokens, first-pass total) from the rescored lattice."""
    cache = cache_from_shared(params, example.e_s)
    rescored = rescore_lattice(example.lattice, cache, params)
    first = dict(example.lattice.hypotheses())
    ranked = rescored.nbest(nbest_size, ScoreWeights(lambda_las))
    return [(toks, first[toks]) for toks, _ in ranked]


def mwer_finetune(params: LasParams, dataset: Sequence[MwerExample], nbest_size: int, opt: OptimizerConfig,
                  lambda_las: float = 0.5, stats: MwerStats | None = None,
                  on_step: Callable | None = None) -> TrainResult:
    """Minimum-word-error fine-tuning of the second pass; one utterance per step.

    Utterances whose n-best has fewer than two entries are skipped (zero
    gradient) and counted in ``stats``.
    """
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    stats = stats if stats is not None else MwerStats()

    def loss_fn(ex: MwerExample):
        nb = mwer_nbest(ex, params, nbest_size, lambda_las)
        if len(nb) < 2:
            stats.skipped += 1
            return Tensor(np.asarray(0.0)), 0
        stats.used += 1
        hyps = [toks for toks, _ in nb]
        las = sequence_logprobs_tensor(params, make_las_batch([ex.e_s] * len(hyps), hyps, params.config))
        loss, _ = mwer_loss(las, [r for _, r in nb], [ex.errors[h] for h in hyps], lambda_las)
        return loss, 1

    return run_training(params, list(dataset), loss_fn, opt, on_step=on_step)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
CKPT_MAGIC = b"TPCK"
CKPT_VERSION = 1
_F64, _I8 = 0, 1
FLAG_QUANTIZED = 1


@dataclass
class Checkpoint:
    """Named tensors plus vocab and a JSON-serialisable config echo.

    A tensor entry is either a float64 array or an ``(int8 array, scale)`` pair.
    """

    tensors: dict
    vocab: Vocab | None = None
    config: dict = field(default_factory=dict)
    version: int = CKPT_VERSION

    @property
    def quantized(self) -> bool:
        return any(isinstance(v, tuple) for v in self.tensors.values())

    def arrays(self) -> dict:
        """Float64 view (int8 entries dequantised)."""
        out = {}
        for k, v in self.tensors.items():
            out[k] = v[0].astype(np.float64) * v[1] if isinstance(v, tuple) else v
        return out

    def restore(self, template):
        return with_weights(template, self.arrays())


def checkpoint_from_params(params, vocab: Vocab | None = None, config: Mapping | None = None) -> Checkpoint:
    return Checkpoint({k: np.array(t.data, dtype=np.float64) for k, t in named_parameters(params)}, vocab,
                      dict(config or {}))


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<HHI", ckpt.version, FLAG_QUANTIZED if ckpt.quantized else 0, len(ckpt.tensors)))
    for name, value in ckpt.tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        if isinstance(value, tuple):
            q, scale = value
            q = np.asarray(q)
            if q.dtype != np.int8:
                raise CheckpointError(f"{name}: quantized payload must be int8")
            buf.write(struct.pack("<BB", _I8, q.ndim))
            buf.write(struct.pack(f"<{q.ndim}I", *q.shape))
            buf.write(struct.pack("<d", float(scale)))
            buf.write(q.tobytes(order="C"))
        else:
            a = np.asarray(value, dtype=np.float64)
            buf.write(struct.pack("<BB", _F64, a.ndim))
            buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
            buf.write(a.astype("<f8").tobytes(order="C"))
    toks = list(ckpt.vocab.tokens) if ckpt.vocab is not None else []
    buf.write(struct.pack("<Iii", len(toks), *(ckpt.vocab.blank_id, ckpt.vocab.eos_id) if toks else (-1, -1)))
    for tok in toks:
        raw = tok.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
    cfg = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def checkpoint_from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < 16 or raw[:4] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    version = struct.unpack("<H", raw[4:6])[0]
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint is truncated or corrupt (checksum mismatch)")
    buf = io.BytesIO(body)
    try:
        buf.read(4)
        _, flags, n = struct.unpack("<HHI", _take(buf, 8))
        tensors = {}
        for _ in range(n):
            (ln,) = struct.unpack("<H", _take(buf, 2))
            name = _take(buf, ln).decode("utf-8")
            code, rank = struct.unpack("<BB", _take(buf, 2))
            shape = struct.unpack(f"<{rank}I", _take(buf, 4 * rank))
            size = int(np.prod(shape, dtype=np.int64))
            if code == _F64:
                tensors[name] = np.frombuffer(_take(buf, 8 * size), dtype="<f8").astype(np.float64).reshape(shape)
            elif code == _I8:
                (scale,) = struct.unpack("<d", _take(buf, 8))
                q = np.frombuffer(_take(buf, size), dtype=np.int8).reshape(shape).copy()
                tensors[name] = (q, scale)
            else:
                raise CheckpointError(f"unknown tensor type code {code}")
        count, blank, eos = struct.unpack("<Iii", _take(buf, 12))
        toks = []
        for _ in range(count):
            (ln,) = struct.unpack("<H", _take(buf, 2))
            toks.append(_take(buf, ln).decode("utf-8"))
        vocab = Vocab(tuple(toks), blank, eos) if toks else None
        (ln,) = struct.unpack("<I", _take(buf, 4))
        config = json.loads(_take(buf, ln).decode("utf-8"))
        if buf.read(1):
            raise CheckpointError("trailing bytes after config block")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    ckpt = Checkpoint(tensors, vocab, config, version)
    if bool(flags & FLAG_QUANTIZED) != ckpt.quantized:
        raise CheckpointError("quantization flag disagrees with tensor table")
    return ckpt


def _take(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("checkpoint is truncated")
    return data


def save_checkpoint(params, path, vocab: Vocab | None = None, config: Mapping | None = None) -> None:
    """Write a parameter tree (or a ready ``Checkpoint``) atomically enough for our use."""
    ckpt = params if isinstance(params, Checkpoint) else checkpoint_from_params(params, vocab, config)
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
