"""Content-addressed LRU store for layer-P segment representations.

Entry file format (little-endian)::

    b"LAITC"  u8 version=1  u64 fingerprint  u64 p_layers  u64 token_digest
    u32 rows  u32 cols  f32[rows * cols] row-major

Files live one per entry in ``cache_dir``, named by the hex FNV-1a digest of
the packed key.
"""

from __future__ import annotations

import logging
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import CacheError, FormatError
from .hashing import fnv1a64, token_digest
from .io import atomic_write_bytes
from .tensor import frozen

log = logging.getLogger(__name__)

ENTRY_MAGIC = b"LAITC"
ENTRY_VERSION = 1
ENTRY_HEADER_BYTES = 16
_FILE_HEADER = struct.Struct("<5sB3QII")


class CacheKey(NamedTuple):
    model_fingerprint: int
    p_layers: int
    token_digest: int

    def combined(self) -> int:
        return fnv1a64(struct.pack("<3Q", *self))

    def filename(self) -> str:
        return f"{self.combined():016x}.laitc"


def cache_key(fingerprint: int, p_layers: int, token_ids: Sequence[int]) -> CacheKey:
    if p_layers < 1:
        raise CacheError("nothing cacheable: P=0 representations depend on the other segments")
    return CacheKey(int(fingerprint), int(p_layers), token_digest(token_ids))


@dataclass
class CacheEntry:
    key: CacheKey
    rep: np.ndarray
    last_used: int = 0
    tokens: tuple[int, ...] | None = None
    nbytes: int = field(init=False)

    def __post_init__(self):
        if self.rep.ndim != 2 or self.rep.shape[0] == 0 or self.rep.shape[1] == 0:
            raise CacheError(f"cache entries need a nonempty 2-D matrix, got shape {self.rep.shape}")
        self.rep = frozen(self.rep)
        self.nbytes = ENTRY_HEADER_BYTES + self.rep.size * self.rep.itemsize


def serialize_entry(entry: CacheEntry) -> bytes:
    rows, cols = entry.rep.shape
    head = _FILE_HEADER.pack(ENTRY_MAGIC, ENTRY_VERSION, *entry.key, rows, cols)
    return head + np.ascontiguousarray(entry.rep, dtype="<f4").tobytes()


def deserialize_entry(data: bytes) -> CacheEntry:
    if len(data) < len(ENTRY_MAGIC) or data[:5] != ENTRY_MAGIC:
        raise FormatError("bad_magic", f"expected {ENTRY_MAGIC!r}", 0)
    if len(data) < _FILE_HEADER.size:
        raise FormatError("truncated", f"header needs {_FILE_HEADER.size} bytes, have {len(data)}", len(data))
    _, version, fp, p, dig, rows, cols = _FILE_HEADER.unpack_from(data)
    if version != ENTRY_VERSION:
        raise FormatError("bad_version", f"unsupported cache entry version {version}", 5)
    if rows == 0 or cols == 0:
        raise FormatError("bad_shape", f"empty matrix {rows}x{cols}", _FILE_HEADER.size - 8)
    want = _FILE_HEADER.size + rows * cols * 4
    if len(data) < want:
        raise FormatError("truncated", f"payload needs {want} bytes, have {len(data)}", len(data))
    if len(data) > want:
        raise FormatError("trailing_bytes", f"{len(data) - want} unexpected bytes", want)
    rep = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=_FILE_HEADER.size)
    return CacheEntry(CacheKey(fp, p, dig), rep.astype(np.float32).reshape(rows, cols))


class RepCache:
    """Thread-safe LRU cache bounded by resident bytes.

    ``budget_bytes=None`` means unbounded. With ``paranoid=True`` every entry
    also stores its token ids and a lookup whose ids differ is treated as a
    miss (a digest collision); on-disk entries carry no ids, so paranoid mode
    never reads from ``cache_dir``. Matrices handed out are read-only and stay
    valid after eviction.
    """

    def __init__(self, budget_bytes: int | None = None, cache_dir: str | Path | None = None,
                 paranoid: bool = False):
        self.budget_bytes = budget_bytes
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.paranoid = paranoid
        self._entries: OrderedDict[CacheKey, CacheEntry] = OrderedDict()
        self._lock = threading.Lock()
        self._clock = 0
        self.resident_bytes = 0
        self.hits = 0
        self.misses = 0
        self.collisions = 0
        self.evicted_bytes = 0
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: CacheKey) -> bool:
        return key in self._entries

    @staticmethod
    def key_for(fingerprint: int, p_layers: int, token_ids: Sequence[int]) -> CacheKey:
        return cache_key(fingerprint, p_layers, token_ids)

    def _tick(self) -> int:
        self._clock += 1
        return self._clock

    def get(self, key: CacheKey, tokens: Sequence[int] | None = None) -> np.ndarray | None:
        with self._lock:
            entry = self._entries.get(key)
            if entry is not None and self.paranoid and tokens is not None and entry.tokens != tuple(tokens):
                self.collisions += 1
                entry = None
            if entry is not None:
                entry.last_used = self._tick()
                self._entries.move_to_end(key)
                self.hits += 1
                return entry.rep
        entry = self._load(key) if not self.paranoid else None
        with self._lock:
            if entry is None:
                self.misses += 1
                return None
            self.hits += 1
            if self.budget_bytes is None or entry.nbytes <= self.budget_bytes:
                self._insert(entry)
            return entry.rep

    def put(self, entry: CacheEntry) -> int:
        """Insert (last writer wins) and evict LRU entries until within budget.
        Returns the number of bytes evicted."""
        if self.budget_bytes is not None and entry.nbytes > self.budget_bytes:
            raise CacheError(f"entry of {entry.nbytes} bytes exceeds the {self.budget_bytes}-byte budget")
        with self._lock:
            evicted = self._insert(entry)
        if self.cache_dir is not None and entry.rep.dtype == np.float32:
            atomic_write_bytes(self.cache_dir / entry.key.filename(), serialize_entry(entry))
        return evicted

    def put_rep(self, key: CacheKey, rep: np.ndarray, tokens: Sequence[int] | None = None) -> int:
        toks = tuple(int(t) for t in tokens) if (self.paranoid and tokens is not None) else None
        return self.put(CacheEntry(key, rep, tokens=toks))

    def _insert(self, entry: CacheEntry) -> int:
        old = self._entries.pop(entry.key, None)
        if old is not None:
            self.resident_bytes -= old.nbytes
        entry.last_used = self._tick()
        self._entries[entry.key] = entry
        self.resident_bytes += entry.nbytes
        evicted = 0
        while self.budget_bytes is not None and self.resident_bytes > self.budget_bytes:
            _, victim = self._entries.popitem(last=False)
            self.resident_bytes -= victim.nbytes
            evicted += victim.nbytes
        self.evicted_bytes += evicted
        return evicted

    def _load(self, key: CacheKey) -> CacheEntry | None:
        if self.cache_dir is None:
            return None
        path = self.cache_dir / key.filename()
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            return None
        try:
            entry = deserialize_entry(data)
        except FormatError as e:
            log.warning("ignoring unreadable cache file %s: %s", path, e)
            return None
        if entry.key != key:
            log.warning("cache file %s holds a different key; ignoring", path)
            return None
        return entry

    def stats(self) -> dict:
        with self._lock:
            total = self.hits + self.misses
            return {
                "entries": len(self._entries),
                "resident_bytes": self.resident_bytes,
                "hits": self.hits,
                "misses": self.misses,
                "hit_rate": self.hits / total if total else 0.0,
                "collisions": self.collisions,
                "evicted_bytes": self.evicted_bytes,
            }
