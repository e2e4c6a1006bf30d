"""LoRA factor pairs, modulation signals and the modulated delta ``A·M·B``."""
from __future__ import annotations

import struct
import warnings
import zlib
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import DimensionError, FormatError
from .numerics import Tensor, as_tensor, decode_tensor, encode_tensor, matmul, mul, reshape, scale

TYPES = ("Q", "V")
_TYPE_BITS = {"Q": 1, "V": 2}

Site = tuple[int, str]  # (layer index, 1-based; projection type)


@dataclass
class LoRAPair:
    A: Tensor  # d_in x r
    B: Tensor  # r x d_out
    scale: float = 1.0

    def __post_init__(self):
        self.A, self.B = as_tensor(self.A), as_tensor(self.B)
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[1] != self.B.shape[0]:
            raise DimensionError(f"LoRA factors do not chain: A {self.A.shape}, B {self.B.shape}")
        if self.rank < 1:
            raise DimensionError("LoRA rank must be >= 1")
        if self.rank > min(self.d_in, self.d_out):
            warnings.warn(f"LoRA rank {self.rank} exceeds min(d_in, d_out) = {min(self.d_in, self.d_out)}")

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def d_in(self) -> int:
        return self.A.shape[0]

    @property
    def d_out(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class Modulation:
    """Signal inserted between the factors: identity, diagonal ``z`` or square ``Z``."""

    kind: str  # "identity" | "diag" | "square"
    value: Tensor | None = None

    @classmethod
    def identity(cls) -> "Modulation":
        return cls("identity")

    @classmethod
    def diag(cls, z) -> "Modulation":
        z = as_tensor(z)
        if z.ndim != 1:
            raise DimensionError(f"diag modulation needs a vector, got shape {z.shape}")
        return cls("diag", z)

    @classmethod
    def square(cls, Z) -> "Modulation":
        Z = as_tensor(Z)
        if Z.ndim != 2 or Z.shape[0] != Z.shape[1]:
            raise DimensionError(f"square modulation needs an r x r matrix, got shape {Z.shape}")
        return cls("square", Z)

    @property
    def dim(self) -> int | None:
        return None if self.value is None else self.value.shape[0]

    def dense(self, r: int) -> np.ndarray:
        if self.kind == "identity":
            return np.eye(r)
        if self.kind == "diag":
            return np.diag(self.value.data)
        return self.value.data.copy()


def _check_rank(pair: LoRAPair, m: Modulation) -> None:
    if m.kind != "identity" and m.dim != pair.rank:
        raise DimensionError(f"{m.kind} modulation of size {m.dim} does not match LoRA rank {pair.rank}")


def delta_weight(pair: LoRAPair, m: Modulation) -> Tensor:
    """``scale * A @ M @ B`` as a dense ``d_in x d_out`` tensor."""
    _check_rank(pair, m)
    if m.kind == "identity":
        left = pair.A
    elif m.kind == "diag":
        left = mul(pair.A, reshape(m.value, (1, pair.rank)))
    else:
        left = matmul(pair.A, m.value)
    out = matmul(left, pair.B)
    return out if pair.scale == 1.0 else scale(out, pair.scale)


def adapted_forward(w_base: Tensor, pair: LoRAPair, m: Modulation, x: Tensor) -> Tensor:
    """``x @ (W_base + ΔW)``."""
    w_base = as_tensor(w_base)
    if w_base.shape != (pair.d_in, pair.d_out):
        raise DimensionError(f"base weight {w_base.shape} does not match LoRA pair ({pair.d_in}, {pair.d_out})")
    return matmul(as_tensor(x), w_base + delta_weight(pair, m))


def embed_diag_in_square(z) -> Tensor:
    z = as_tensor(z)
    r = z.shape[0]
    # diag(z) = eye * z, kept on the tape so gradients reach z
    return mul(Tensor(np.eye(r)), reshape(z, (1, r)))


def factor_square_into_full(pair: LoRAPair, Z) -> tuple[Tensor, Tensor]:
    """Absorb ``Z`` into the left factor: ``(A Z) B == A Z B``."""
    return matmul(pair.A, as_tensor(Z)), pair.B


def rotation_counterexample(theta: float = np.pi / 4) -> tuple[LoRAPair, np.ndarray]:
    """A rank-2 pair and rotation ``Z`` whose delta has no diagonal equivalent."""
    A = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    B = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, -1.0]])
    c, s = np.cos(theta), np.sin(theta)
    return LoRAPair(Tensor(A), Tensor(B)), np.array([[c, -s], [s, c]])


def best_diag_fit(pair: LoRAPair, target: np.ndarray) -> tuple[np.ndarray, float]:
    """Least-squares ``z`` minimising ``|A diag(z) B - target|_F``; returns ``(z, residual norm)``.

    ``A diag(z) B = sum_k z_k a_k b_k^T`` is linear in ``z``, so each rank-one
    outer product becomes a column of the design matrix.
    """
    A, B = pair.A.data, pair.B.data
    design = np.stack([pair.scale * np.outer(A[:, k], B[k]).ravel() for k in range(pair.rank)], axis=1)
    z, *_ = np.linalg.lstsq(design, target.ravel(), rcond=None)
    resid = np.linalg.norm(design @ z - target.ravel())
    return z, float(resid)


@dataclass
class AdapterSet:
    """Per-site LoRA pairs and modulations for one context."""

    entries: dict[Site, tuple[LoRAPair, Modulation]] = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return max((layer for layer, _ in self.entries), default=0)

    @property
    def types(self) -> tuple[str, ...]:
        present = {t for _, t in self.entries}
        return tuple(t for t in TYPES if t in present)

    def deltas(self) -> dict[Site, Tensor]:
        return {site: delta_weight(p, m) for site, (p, m) in self.entries.items()}

    def signal_size(self) -> int:
        total = 0
        for pair, m in self.entries.values():
            total += 0 if m.kind == "identity" else int(np.prod(m.value.shape))
        return total


# ---------------------------------------------------------------- ZADP v1

ZADP_MAGIC = b"ZADP"
ZADP_VERSION = 1
_VARIANT_CODES = {"identity": 0, "diag": 1, "square": 2}
_CODE_VARIANTS = {v: k for k, v in _VARIANT_CODES.items()}


def _folded(pair: LoRAPair, m: Modulation) -> Modulation:
    # the file has no scale field, so a non-unit scale is folded into the signal
    if pair.scale == 1.0:
        return m
    if m.kind == "identity":
        return Modulation.diag(np.full(pair.rank, pair.scale))
    return Modulation(m.kind, Tensor(m.value.data * pair.scale))


def encode_adapter(adapters: AdapterSet, bits: int = 64) -> bytes:
    if not adapters.entries:
        raise FormatError("cannot encode an empty adapter set")
    sites = sorted(adapters.entries, key=lambda s: (s[0], TYPES.index(s[1])))
    folded = {s: (adapters.entries[s][0], _folded(*adapters.entries[s])) for s in sites}
    kinds = {m.kind for _, m in folded.values()}
    ranks = {p.rank for p, _ in folded.values()}
    if len(kinds) != 1 or len(ranks) != 1:
        raise FormatError(f"adapter set mixes variants {kinds} or ranks {ranks}")
    n_layers = adapters.n_layers
    types = adapters.types
    expected = {(layer, t) for layer in range(1, n_layers + 1) for t in types}
    if set(sites) != expected:
        raise FormatError("adapter sites must cover every (layer, type) combination")
    kind = kinds.pop()
    mask = sum(_TYPE_BITS[t] for t in types)
    header = ZADP_MAGIC + struct.pack("<HHIBB", ZADP_VERSION, ranks.pop(), n_layers, mask, _VARIANT_CODES[kind])
    body = bytearray()
    for s in sites:
        pair, m = folded[s]
        body += encode_tensor(pair.A, bits)
        body += encode_tensor(pair.B, bits)
        if kind != "identity":
            body += encode_tensor(m.value, bits)
    return header + bytes(body) + struct.pack("<I", zlib.crc32(body))


def decode_adapter(buf: bytes) -> AdapterSet:
    if buf[:4] != ZADP_MAGIC:
        raise FormatError("ZADP: bad magic")
    if len(buf) < 18:
        raise FormatError("ZADP: truncated header")
    version, rank, n_layers, mask, code = struct.unpack_from("<HHIBB", buf, 4)
    if version != ZADP_VERSION:
        raise FormatError(f"ZADP: unsupported version {version}")
    if code not in _CODE_VARIANTS:
        raise FormatError(f"ZADP: unknown modulation variant code {code}")
    if mask == 0 or mask & ~3:
        raise FormatError(f"ZADP: bad type bitmask {mask:#x}")
    body = buf[14:-4]
    (stored,) = struct.unpack_from("<I", buf, len(buf) - 4)
    computed = zlib.crc32(body)
    if stored != computed:
        raise FormatError(f"ZADP: CRC mismatch over payload (stored {stored:#010x}, computed {computed:#010x})")
    kind = _CODE_VARIANTS[code]
    types = [t for t in TYPES if mask & _TYPE_BITS[t]]
    entries: dict[Site, tuple[LoRAPair, Modulation]] = {}
    off = 0
    for layer in range(1, n_layers + 1):
        for t in types:
            where = f"ZADP entry (layer {layer}, {t})"
            A, _, off = decode_tensor(body, off, where=f"{where} A")
            B, _, off = decode_tensor(body, off, where=f"{where} B")
            if A.ndim != 2 or A.shape[1] != rank or B.ndim != 2 or B.shape[0] != rank:
                raise FormatError(f"{where}: factor shapes {A.shape}, {B.shape} disagree with rank {rank}")
            if kind == "identity":
                m = Modulation.identity()
            else:
                val, _, off = decode_tensor(body, off, where=f"{where} modulation")
                m = Modulation.diag(val) if kind == "diag" else Modulation.square(val)
            entries[(layer, t)] = (LoRAPair(Tensor(A), Tensor(B)), m)
    if off != len(body):
        raise FormatError(f"ZADP: {len(body) - off} unexpected payload bytes")
    return AdapterSet(entries)


def save_adapter(path, adapters: AdapterSet, bits: int = 64) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_adapter(adapters, bits))


def load_adapter(path) -> AdapterSet:
    with open(path, "rb") as fh:
        return decode_adapter(fh.read())


def materialized_deltas(adapters: AdapterSet) -> Mapping[Site, np.ndarray]:
    return {site: d.data for site, d in adapters.deltas().items()}
