"""Symmetric per-tensor 8-bit weight quantization and size accounting."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .nncore import Tensor
from .training import Checkpoint, checkpoint_bytes, checkpoint_from_params

QMAX = 127
REFERENCE_FOOTNOTE = "Reference point: the production two-pass model occupies 177MB in memory/disk after 8-bit quantization."


@dataclass(frozen=True)
class QuantizedTensor:
    codes: np.ndarray  # int8
    scale: float

    @property
    def shape(self) -> tuple:
        return self.codes.shape

    def __post_init__(self):
        if self.codes.dtype != np.int8:
            raise TypeError("codes must be int8")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if np.any(np.abs(self.codes.astype(np.int16)) > QMAX):
            raise ValueError("codes outside [-127, 127]")


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(t) -> QuantizedTensor:
    """scale = max|w| / 127 (1 for an all-zero tensor); codes = round(w / scale)."""
    w = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("cannot quantize non-finite values")
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    scale = peak / QMAX if peak > 0 else 1.0
    codes = np.clip(_round_half_away(w / scale), -QMAX, QMAX).astype(np.int8)
    return QuantizedTensor(codes, scale)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q.codes.astype(np.float64) * q.scale


def quantize_checkpoint(ckpt: Checkpoint) -> Checkpoint:
    tensors = OrderedDict()
    for name, value in ckpt.tensors.items():
        if isinstance(value, tuple):
            tensors[name] = value
        else:
            q = quantize(value)
            tensors[name] = (q.codes, q.scale)
    cfg = dict(ckpt.config)
    cfg["quantized"] = True
    return Checkpoint(tensors, ckpt.vocab, cfg, ckpt.version)


def quantized_params(params, template_ckpt: Checkpoint | None = None):
    """Weight-only quantized copy of a parameter tree (codes dequantized at load)."""
    ckpt = template_ckpt or checkpoint_from_params(params)
    return quantize_checkpoint(ckpt).restore(params)


@dataclass
class SizeReport:
    file_bytes: int
    payload_bytes: int
    payload_fp32_bytes: int
    num_params: int
    modules: dict = field(default_factory=dict)  # module -> payload bytes
    footnote: str = REFERENCE_FOOTNOTE

    @property
    def ratio(self) -> float:
        """Parameter payload relative to a 32-bit float payload."""
        return self.payload_bytes / self.payload_fp32_bytes if self.payload_fp32_bytes else 0.0

    def lines(self) -> list[str]:
        out = [
            f"parameters      {self.num_params}",
            f"file bytes      {self.file_bytes}",
            f"payload bytes   {self.payload_bytes}",
            f"fp32 payload    {self.payload_fp32_bytes}",
            f"payload ratio   {self.ratio:.4f}",
        ]
        out += [f"  {name:<14}{size}" for name, size in self.modules.items()]
        out.append(f"note: {self.footnote}")
        return out


def model_size_report(ckpt: Checkpoint, quantized: bool = False) -> SizeReport:
    """Serialized sizes; with ``quantized`` the checkpoint is quantized first.

    Payload counts 1 byte per int8 code plus an 8-byte scale per tensor,
    and 4 bytes per value for unquantized tensors (the 32-bit baseline,
    even though checkpoints store 64-bit reals).
    """
    if quantized and not ckpt.quantized:
        ckpt = quantize_checkpoint(ckpt)
    modules: dict[str, int] = OrderedDict()
    payload = fp32 = n = 0
    for name, value in ckpt.tensors.items():
        if isinstance(value, tuple):
            size = value[0].size
            p = size + 8
        else:
            size = np.asarray(value).size
            p = 4 * size
        payload += p
        fp32 += 4 * size
        n += size
        mod = name.split(".", 1)[0]
        modules[mod] = modules.get(mod, 0) + p
    return SizeReport(len(checkpoint_bytes(ckpt)), payload, fp32, n, dict(modules))
