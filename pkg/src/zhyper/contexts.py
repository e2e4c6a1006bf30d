"""Textual conditions and their precomputed embeddings (ZEMB v1 files)."""
from __future__ import annotations

import logging
import os
import shlex
import struct
import subprocess
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, FormatError

log = logging.getLogger(__name__)

ZEMB_MAGIC = b"ZEMB"
ZEMB_VERSION = 1
EMBEDDER_ENV = "ZHYPER_EMBEDDER"


@dataclass(frozen=True)
class ContextRecord:
    id: str
    dataset_id: str
    text: str
    embedding: np.ndarray = field(compare=False, repr=False)


@dataclass(frozen=True)
class ContextStore:
    d_c: int
    records: tuple[ContextRecord, ...] = ()

    def __post_init__(self):
        seen = set()
        for i, rec in enumerate(self.records):
            if rec.id in seen:
                raise FormatError(f"record {i}: duplicate context id {rec.id!r}")
            seen.add(rec.id)
            if rec.embedding.shape != (self.d_c,):
                raise FormatError(f"record {i} ({rec.id!r}): embedding shape {rec.embedding.shape} != ({self.d_c},)")
            bad = np.flatnonzero(~np.isfinite(rec.embedding))
            if bad.size:
                raise FormatError(f"record {i} ({rec.id!r}): non-finite embedding value at position {int(bad[0])}")

    def __len__(self) -> int:
        return len(self.records)

    def get(self, context_id: str) -> ContextRecord:
        for rec in self.records:
            if rec.id == context_id:
                return rec
        raise KeyError(f"unknown context id {context_id!r}")

    def for_dataset(self, dataset_id: str) -> list[ContextRecord]:
        return sorted((r for r in self.records if r.dataset_id == dataset_id), key=lambda r: r.id)

    def dataset_ids(self) -> list[str]:
        return sorted({r.dataset_id for r in self.records})


def _pack_str(s: str, width: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(f"<{width}", len(raw)) + raw


def encode_context_store(store: ContextStore) -> bytes:
    out = bytearray(ZEMB_MAGIC + struct.pack("<HII", ZEMB_VERSION, store.d_c, len(store.records)))
    for rec in store.records:
        out += _pack_str(rec.id, "H")
        out += _pack_str(rec.dataset_id, "H")
        out += _pack_str(rec.text, "I")
        out += np.asarray(rec.embedding, dtype="<f4").tobytes()
    return bytes(out)


def decode_context_store(buf: bytes) -> ContextStore:
    if buf[:4] != ZEMB_MAGIC:
        raise FormatError("ZEMB: bad magic")
    try:
        version, d_c, count = struct.unpack_from("<HII", buf, 4)
    except struct.error:
        raise FormatError("ZEMB: truncated header") from None
    if version != ZEMB_VERSION:
        raise FormatError(f"ZEMB: unsupported version {version}")
    if d_c == 0:
        raise FormatError("ZEMB: d_c must be positive")
    off = 14
    records = []
    for i in range(count):
        try:
            (n,) = struct.unpack_from("<H", buf, off)
            rid = buf[off + 2:off + 2 + n].decode("utf-8")
            off += 2 + n
            (n,) = struct.unpack_from("<H", buf, off)
            did = buf[off + 2:off + 2 + n].decode("utf-8")
            off += 2 + n
            (n,) = struct.unpack_from("<I", buf, off)
            text = buf[off + 4:off + 4 + n].decode("utf-8")
            off += 4 + n
        except (struct.error, UnicodeDecodeError) as exc:
            raise FormatError(f"ZEMB record {i}: malformed string field ({exc})") from None
        end = off + 4 * d_c
        if end > len(buf):
            raise FormatError(f"ZEMB record {i}: embedding truncated")
        emb = np.frombuffer(buf[off:end], dtype="<f4").astype(np.float64)
        off = end
        bad = np.flatnonzero(~np.isfinite(emb))
        if bad.size:
            raise FormatError(f"ZEMB record {i} ({rid!r}): non-finite embedding value at position {int(bad[0])}")
        records.append(ContextRecord(rid, did, text, emb))
    if off != len(buf):
        raise FormatError(f"ZEMB: {len(buf) - off} trailing bytes after {count} records")
    return ContextStore(d_c, tuple(records))


def write_context_store(store: ContextStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_context_store(store))


def load_context_store(path) -> ContextStore:
    with open(path, "rb") as fh:
        return decode_context_store(fh.read())


def assign_contexts(store: ContextStore, bundle):
    """Return ``bundle`` with ``contexts[i]`` set to the store's records for dataset ``i``."""
    dataset_ids = [d.id for d in bundle.datasets]
    contexts = [store.for_dataset(did) for did in dataset_ids]
    empty = [did for did, cs in zip(dataset_ids, contexts) if not cs]
    if empty:
        raise ConfigError(f"datasets without contexts: {', '.join(empty)}")
    orphans = [r for r in store.records if r.dataset_id not in set(dataset_ids)]
    if orphans:
        log.warning("ignored %d context record(s) with unknown dataset ids: %s",
                    len(orphans), sorted({r.dataset_id for r in orphans}))
    return replace(bundle, contexts=contexts)


def embed_texts(texts: list[str], command: str | None = None, dataset_id: str = "") -> ContextStore:
    """Run the external embedder: text lines on stdin, a ZEMB store on stdout."""
    command = command or os.environ.get(EMBEDDER_ENV)
    if not command:
        raise ConfigError(f"no embedder configured; set {EMBEDDER_ENV}")
    if any("\n" in t for t in texts):
        raise ConfigError("texts for the embedder must be single lines")
    proc = subprocess.run(shlex.split(command), input="".join(t + "\n" for t in texts).encode(),
                          capture_output=True, check=False)
    if proc.returncode != 0:
        raise RuntimeError(f"embedder exited with {proc.returncode}: {proc.stderr.decode(errors='replace')}")
    store = decode_context_store(proc.stdout)
    if len(store) != len(texts):
        raise FormatError(f"embedder returned {len(store)} records for {len(texts)} texts")
    return store
