"""Synthetic multi-domain speech data and the stacking/subsampling front end.

Each spoken word owns a fixed acoustic template (``template_frames`` raw
frames of dimension ``feature_dim``). An utterance is a grammar expansion
rendered as concatenated templates plus Gaussian noise and surrounding
silence. Domains differ in how numbers are transcribed (digits vs words),
in sentence count and in trailing-silence length, so the speech-end time
and the end-of-query frame are known exactly by construction.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml
from sklearn.base import BaseEstimator, TransformerMixin

from .vocab import Vocab


class ConfigError(ValueError):
    """Invalid dataset or model configuration."""


@dataclass
class FeatureSequence:
    frames: np.ndarray  # (T0, d0), 10 ms hop
    speech_end_ms: float
    domain_id: int
    hop_ms: float = 10.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError("frames must be a non-empty (T0, d0) matrix")
        if self.speech_end_ms > self.frames.shape[0] * self.hop_ms:
            raise ValueError("speech_end_ms beyond the last frame")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("non-finite feature values")

    @property
    def duration_ms(self) -> float:
        return self.frames.shape[0] * self.hop_ms


@dataclass
class Utterance:
    uid: str
    features: FeatureSequence
    tokens: tuple[int, ...]
    t_eos_frame: int
    domain_id: int

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise ValueError("utterance transcript must be non-empty")


class SpellingMap(Mapping):
    """Many-to-one spelling normalisation (variant -> canonical).

    Canonical forms map to themselves, so normalisation is idempotent.
    """

    def __init__(self, mapping: Mapping[str, str] | None = None):
        mapping = dict(mapping or {})
        for variant, canon in mapping.items():
            if canon in mapping and mapping[canon] != canon:
                raise ValueError(f"canonical form {canon!r} is itself remapped to {mapping[canon]!r}")
        self._map = mapping

    def __getitem__(self, key):
        return self._map[key]

    def __iter__(self):
        return iter(self._map)

    def __len__(self):
        return len(self._map)

    @classmethod
    def from_variants(cls, variants: Mapping[str, Sequence[str]]) -> "SpellingMap":
        """Build from ``{canonical: [variant, ...]}``."""
        return cls({v: canon for canon, vs in variants.items() for v in vs})


def normalize_transcript(tokens: Sequence[str], spelling: Mapping[str, str]) -> list[str]:
    return [spelling.get(t, t) for t in tokens]


# ---------------------------------------------------------------------------
# front end
# ---------------------------------------------------------------------------
def stack_and_subsample(frames, stack_k: int = 4, subsample_s: int = 3) -> np.ndarray:
    """Stack ``stack_k`` frames of left context and keep every ``subsample_s``-th.

    Output row ``i`` concatenates raw frames ``j-stack_k+1 .. j`` with
    ``j = i*subsample_s``; missing left context repeats frame 0.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValueError("stack_and_subsample needs a non-empty (T0, d0) matrix")
    if stack_k < 1 or subsample_s < 1:
        raise ValueError("stack_k and subsample_s must be >= 1")
    t0 = frames.shape[0]
    centers = np.arange(0, t0, subsample_s)
    idx = centers[:, None] + np.arange(-stack_k + 1, 1)[None, :]
    idx = np.maximum(idx, 0)
    return frames[idx].reshape(len(centers), -1)


def attach_domain_onehot(stacked, domain_id: int, num_domains: int) -> np.ndarray:
    stacked = np.asarray(stacked, dtype=np.float64)
    if not 0 <= domain_id < num_domains:
        raise ValueError(f"domain_id {domain_id} outside [0, {num_domains})")
    onehot = np.zeros((stacked.shape[0], num_domains))
    onehot[:, domain_id] = 1.0
    return np.concatenate([stacked, onehot], axis=1)


def eos_frame_for(speech_end_ms: float, hop_ms: float, subsample_s: int) -> int:
    return int(math.ceil(round(speech_end_ms / (hop_ms * subsample_s), 9)))


class FrameStacker(TransformerMixin, BaseEstimator):
    """Transformer wrapper over :func:`stack_and_subsample` for lists of sequences."""

    def __init__(self, stack_k: int = 4, subsample_s: int = 3):
        self.stack_k = stack_k
        self.subsample_s = subsample_s

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return [stack_and_subsample(_frames_of(x), self.stack_k, self.subsample_s) for x in X]


class DomainOneHot(TransformerMixin, BaseEstimator):
    """Appends a per-frame domain one-hot. ``X`` is a list of (frames, domain_id) pairs."""

    def __init__(self, num_domains: int = 2):
        self.num_domains = num_domains

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return [attach_domain_onehot(f, d, self.num_domains) for f, d in X]


def _frames_of(x):
    if isinstance(x, Utterance):
        return x.features.frames
    if isinstance(x, FeatureSequence):
        return x.frames
    return x


def encoder_inputs(utt: Utterance, stack_k: int, subsample_s: int, num_domains: int | None) -> np.ndarray:
    """Stacked, subsampled frames with the domain one-hot when ``num_domains`` is set."""
    x = stack_and_subsample(utt.features.frames, stack_k, subsample_s)
    if num_domains:
        x = attach_domain_onehot(x, utt.domain_id, num_domains)
    return x


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------
@dataclass
class DomainSpec:
    name: str
    weight: float
    sentences: tuple[int, int] = (1, 1)
    pause_frames: tuple[int, int] = (8, 20)
    silence_frames: tuple[int, int] = (20, 60)
    number_style: str = "written"  # or "spoken"
    variant_prob: float = 0.0


@dataclass
class DatasetConfig:
    words: list[str]
    grammar: dict[str, list[str]]
    domains: list[DomainSpec]
    written_forms: dict[str, str] = field(default_factory=dict)
    spelling_variants: dict[str, list[str]] = field(default_factory=dict)
    feature_dim: int = 8
    template_frames: int = 4
    hop_ms: float = 10.0
    stack_k: int = 4
    subsample_s: int = 3
    noise_sigma: float = 0.3
    lead_frames: tuple[int, int] = (2, 6)
    template_seed: int = 0
    seed: int = 1
    count: int = 100
    start: str = "S"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.domains:
            raise ConfigError("at least one domain is required")
        if not self.words:
            raise ConfigError("vocabulary must not be empty")
        if self.start not in self.grammar:
            raise ConfigError(f"grammar lacks start symbol {self.start!r}")
        words = set(self.words)
        for lhs, alts in self.grammar.items():
            if not alts:
                raise ConfigError(f"production {lhs} has no alternatives")
            for alt in alts:
                for sym in alt.split():
                    if sym not in self.grammar and sym not in words:
                        raise ConfigError(f"unknown symbol {sym!r} in production {lhs}")
        for w in self.written_forms:
            if w not in words:
                raise ConfigError(f"written form for unknown word {w!r}")
        for d in self.domains:
            if d.weight < 0:
                raise ConfigError("domain weights must be non-negative")
            if d.number_style not in ("written", "spoken"):
                raise ConfigError(f"number_style must be written|spoken, got {d.number_style!r}")
        if sum(d.weight for d in self.domains) <= 0:
            raise ConfigError("domain weights sum to zero")
        if self.template_frames < 1 or self.feature_dim < 1:
            raise ConfigError("template_frames and feature_dim must be positive")

    @property
    def num_domains(self) -> int:
        return len(self.domains)

    @property
    def decode_frame_ms(self) -> float:
        return self.hop_ms * self.subsample_s

    def vocab(self) -> Vocab:
        out: list[str] = []
        for w in self.words:
            out.append(w)
        for form in self.written_forms.values():
            out.extend(form.split())
        for vs in self.spelling_variants.values():
            out.extend(vs)
        return Vocab.build(out)

    def spelling_map(self) -> SpellingMap:
        return SpellingMap.from_variants(self.spelling_variants)

    def templates(self) -> dict[str, np.ndarray]:
        rng = np.random.default_rng([self.template_seed, 7919])
        out = {}
        for w in self.words:
            t = rng.normal(size=(self.template_frames, self.feature_dim))
            t *= np.sqrt(self.feature_dim) / np.linalg.norm(t, axis=1, keepdims=True)
            out[w] = t
        return out

    @classmethod
    def from_dict(cls, raw: Mapping) -> "DatasetConfig":
        raw = dict(raw)
        try:
            domains = [
                DomainSpec(
                    **{
                        k: tuple(v) if isinstance(v, list) else v
                        for k, v in d.items()
                    }
                )
                for d in raw.pop("domains")
            ]
            for key in ("lead_frames",):
                if key in raw:
                    raw[key] = tuple(raw[key])
            return cls(domains=domains, **raw)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid dataset config: {exc}") from exc

    def to_dict(self) -> dict:
        import dataclasses

        d = dataclasses.asdict(self)
        d["domains"] = [
            {k: list(v) if isinstance(v, tuple) else v for k, v in dom.items()} for dom in d["domains"]
        ]
        d["lead_frames"] = list(self.lead_frames)
        return d


def load_config_file(path) -> dict:
    """Read a YAML key/value config file."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def default_dataset_config(**overrides) -> DatasetConfig:
    digits = ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine"]
    words = [
        "play", "music", "call", "mom", "dad", "set", "alarm", "for", "weather", "in",
        "paris", "london", "what", "time", "is", "it", "turn", "on", "the", "lights",
        "color", "center", "red", "blue", "to", "show", "map", "of",
    ] + digits + ["hundred"]
    grammar = {
        "S": [
            "play music",
            "call CONTACT",
            "call NUM",
            "set alarm for NUM",
            "weather in CITY",
            "what time is it",
            "turn on the lights",
            "set the color to COLOR",
            "show map of the center",
            "NUM",
            "play NUM",
        ],
        "CONTACT": ["mom", "dad"],
        "CITY": ["paris", "london"],
        "COLOR": ["red", "blue"],
        "NUM": ["DIGIT", "DIGIT hundred", "DIGIT DIGIT"],
        "DIGIT": digits,
    }
    written = {w: str(i + 1) for i, w in enumerate(digits)}
    written["hundred"] = "0 0"
    cfg = dict(
        words=words,
        grammar=grammar,
        domains=[
            DomainSpec("search", 0.75, (1, 1), (8, 20), (20, 60), "written", 0.0),
            DomainSpec("longform", 0.25, (2, 3), (8, 20), (40, 100), "spoken", 0.3),
        ],
        written_forms=written,
        spelling_variants={"color": ["colour"], "center": ["centre"]},
    )
    cfg.update(overrides)
    if "domains" in overrides and overrides["domains"] and isinstance(overrides["domains"][0], dict):
        cfg["domains"] = [DomainSpec(**d) for d in overrides["domains"]]
    return DatasetConfig(**cfg)


def _expand(symbol: str, cfg: DatasetConfig, rng: np.random.Generator, depth: int = 0) -> list[str]:
    if symbol not in cfg.grammar:
        return [symbol]
    if depth > 32:
        raise ConfigError("grammar recursion too deep")
    alts = cfg.grammar[symbol]
    alt = alts[int(rng.integers(len(alts)))]
    out: list[str] = []
    for sym in alt.split():
        out.extend(_expand(sym, cfg, rng, depth + 1))
    return out


def synth_utterance(cfg: DatasetConfig, index: int, seed: int, vocab: Vocab, templates) -> Utterance:
    rng = np.random.default_rng([seed, index])
    weights = np.array([d.weight for d in cfg.domains], dtype=np.float64)
    domain_id = int(rng.choice(len(cfg.domains), p=weights / weights.sum()))
    dom = cfg.domains[domain_id]
    n_sent = int(rng.integers(dom.sentences[0], dom.sentences[1] + 1))
    variants = cfg.spelling_variants

    d0, hop = cfg.feature_dim, cfg.hop_ms
    blocks = [np.zeros((int(rng.integers(cfg.lead_frames[0], cfg.lead_frames[1] + 1)), d0))]
    words_out: list[str] = []
    for s in range(n_sent):
        if s > 0:
            blocks.append(np.zeros((int(rng.integers(dom.pause_frames[0], dom.pause_frames[1] + 1)), d0)))
        for w in _expand(cfg.start, cfg, rng):
            blocks.append(templates[w])
            if dom.number_style == "written" and w in cfg.written_forms:
                words_out.extend(cfg.written_forms[w].split())
            elif w in variants and dom.variant_prob > 0 and rng.random() < dom.variant_prob:
                vs = variants[w]
                words_out.append(vs[int(rng.integers(len(vs)))])
            else:
                words_out.append(w)
    speech_frames = sum(b.shape[0] for b in blocks)
    blocks.append(np.zeros((int(rng.integers(dom.silence_frames[0], dom.silence_frames[1] + 1)), d0)))
    frames = np.concatenate(blocks, axis=0)
    if cfg.noise_sigma > 0:
        frames = frames + rng.normal(scale=cfg.noise_sigma, size=frames.shape)
    # archive stores 32-bit reals; keep in-memory data identical to a reload
    frames = frames.astype("<f4").astype(np.float64)
    speech_end_ms = speech_frames * hop
    feats = FeatureSequence(frames, speech_end_ms, domain_id, hop)
    t_eos = eos_frame_for(speech_end_ms, hop, cfg.subsample_s)
    return Utterance(f"utt{seed}-{index:06d}", feats, tuple(vocab.encode(words_out)), t_eos, domain_id)


def synth_dataset(cfg: DatasetConfig, seed: int | None = None, count: int | None = None) -> list[Utterance]:
    """Generate ``count`` utterances; bit-reproducible for a given seed."""
    seed = cfg.seed if seed is None else seed
    count = cfg.count if count is None else count
    if count < 1:
        raise ConfigError("count must be >= 1")
    vocab = cfg.vocab()
    templates = cfg.templates()
    return [synth_utterance(cfg, i, seed, vocab, templates) for i in range(count)]


# ---------------------------------------------------------------------------
# dataset archive
# ---------------------------------------------------------------------------
_DS_MAGIC = b"TPDS"
_DS_VERSION = 1


def save_dataset(path, utterances: Sequence[Utterance], vocab: Vocab) -> None:
    """Binary little-endian archive: header, vocab block, one record per utterance."""
    buf = io.BytesIO()
    buf.write(_DS_MAGIC)
    buf.write(struct.pack("<HI", _DS_VERSION, len(utterances)))
    _write_vocab(buf, vocab)
    for u in utterances:
        uid = u.uid.encode("utf-8")
        f = u.features
        buf.write(struct.pack("<H", len(uid)))
        buf.write(uid)
        buf.write(struct.pack("<HddII", u.domain_id, f.speech_end_ms, f.hop_ms, u.t_eos_frame, len(u.tokens)))
        buf.write(np.asarray(u.tokens, dtype="<i4").tobytes())
        t0, d0 = f.frames.shape
        buf.write(struct.pack("<II", t0, d0))
        buf.write(f.frames.astype("<f4").tobytes(order="C"))
    Path(path).write_bytes(buf.getvalue())


def load_dataset(path) -> tuple[list[Utterance], Vocab]:
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)
    try:
        if buf.read(4) != _DS_MAGIC:
            raise ValueError("not a dataset archive")
        version, count = struct.unpack("<HI", buf.read(6))
        if version != _DS_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        vocab = _read_vocab(buf)
        out = []
        for _ in range(count):
            (n,) = struct.unpack("<H", buf.read(2))
            uid = buf.read(n).decode("utf-8")
            dom, end_ms, hop, t_eos, n_tok = struct.unpack("<HddII", buf.read(struct.calcsize("<HddII")))
            toks = tuple(int(t) for t in np.frombuffer(buf.read(4 * n_tok), dtype="<i4"))
            t0, d0 = struct.unpack("<II", buf.read(8))
            data = buf.read(4 * t0 * d0)
            if len(data) != 4 * t0 * d0:
                raise ValueError("truncated dataset archive")
            frames = np.frombuffer(data, dtype="<f4").reshape(t0, d0).astype(np.float64)
            out.append(Utterance(uid, FeatureSequence(frames, end_ms, dom, hop), toks, t_eos, dom))
    except struct.error as exc:
        raise ValueError(f"truncated dataset archive: {exc}") from exc
    return out, vocab


def _write_vocab(buf, vocab: Vocab) -> None:
    buf.write(struct.pack("<IHH", len(vocab), vocab.blank_id, vocab.eos_id))
    for t in vocab.tokens:
        b = t.encode("utf-8")
        buf.write(struct.pack("<H", len(b)))
        buf.write(b)


def _read_vocab(buf) -> Vocab:
    n, blank, eos = struct.unpack("<IHH", buf.read(8))
    toks = []
    for _ in range(n):
        (k,) = struct.unpack("<H", buf.read(2))
        toks.append(buf.read(k).decode("utf-8"))
    return Vocab(tuple(toks), blank, eos)
