"""On-disk cache of frozen-backbone activations.

A cache directory holds two files:

``header.json``
    ``schema_version``, backbone ``fingerprint``, ``num_tensors``,
    ``seq_len``, ``hidden``, ``dtype`` (``float64`` or ``float32``),
    ``sample_count`` and ``payload_bytes``.
``entries.bin``
    Fixed-size records, back to back, in insertion order::

        [32 bytes] sha256 of the sample's token ids (the sample id)
        [32 bytes] sha256 of the payload bytes
        [payload]  num_tensors x seq_len x hidden scalars, little-endian,
                   row-major, tensor 0 first

Entries are keyed by the hash of the token sequence, so presenting the same
input again reuses its entry.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from pathlib import Path
from typing import Sequence

import numpy as np

from .io_utils import atomic_write_text

CACHE_SCHEMA_VERSION = 1
HEADER_FILE = "header.json"
ENTRIES_FILE = "entries.bin"
DIGEST_BYTES = 32
DTYPES = {"float64": "<f8", "float32": "<f4"}


class CacheError(RuntimeError):
    pass


class CacheMissError(KeyError):
    """No entry for the requested sample."""

    def __str__(self):
        return str(self.args[0]) if self.args else "cache miss"


class CacheCorruptionError(CacheError):
    pass


class CacheFingerprintError(CacheError):
    pass


def sample_id(token_ids: Sequence[int]) -> str:
    """Stable id of a token sequence (hex sha256 of int64 little-endian ids)."""
    return hashlib.sha256(np.asarray(token_ids, dtype="<i8").tobytes()).hexdigest()


def entry_payload_bytes(num_tensors: int, seq_len: int, hidden: int, bytes_per_scalar: int) -> int:
    return num_tensors * seq_len * hidden * bytes_per_scalar


class CacheStore:
    """Append-only activation cache bound to one backbone fingerprint.

    Opening an existing directory whose header names a different
    fingerprint or geometry raises :class:`CacheFingerprintError` before any
    entry can be read.
    """

    def __init__(self, root: str | Path, fingerprint: str, num_tensors: int, seq_len: int,
                 hidden: int, dtype: str = "float64"):
        if dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
        self.root = Path(root)
        self.fingerprint = fingerprint
        self.num_tensors, self.seq_len, self.hidden = num_tensors, seq_len, hidden
        self.dtype = dtype
        self._np_dtype = np.dtype(DTYPES[dtype])
        self.payload_size_bytes = entry_payload_bytes(num_tensors, seq_len, hidden,
                                                      self._np_dtype.itemsize)
        self.record_bytes = 2 * DIGEST_BYTES + self.payload_size_bytes
        self._index: dict[str, int] = {}
        self._order: list[str] = []
        if (self.root / HEADER_FILE).exists():
            self._load_existing()

    @classmethod
    def open(cls, root: str | Path, expected_fingerprint: str | None = None) -> "CacheStore":
        """Open a populated cache using the geometry recorded in its header."""
        header = read_header(root)
        if expected_fingerprint is not None and header["fingerprint"] != expected_fingerprint:
            raise CacheFingerprintError(
                f"cache at {root} was built for backbone {header['fingerprint'][:12]}, "
                f"expected {expected_fingerprint[:12]}")
        return cls(root, header["fingerprint"], header["num_tensors"], header["seq_len"],
                   header["hidden"], header["dtype"])

    # -- header and index -------------------------------------------------
    def header(self) -> dict:
        return {
            "schema_version": CACHE_SCHEMA_VERSION,
            "fingerprint": self.fingerprint,
            "num_tensors": self.num_tensors,
            "seq_len": self.seq_len,
            "hidden": self.hidden,
            "dtype": self.dtype,
            "sample_count": len(self._order),
            "payload_bytes": len(self._order) * self.payload_size_bytes,
        }

    def _load_existing(self):
        header = read_header(self.root)
        mine = self.header()
        for key in ("fingerprint", "num_tensors", "seq_len", "hidden", "dtype"):
            if header[key] != mine[key]:
                raise CacheFingerprintError(
                    f"cache at {self.root} has {key}={header[key]!r}, expected {mine[key]!r}")
        path = self.root / ENTRIES_FILE
        size = path.stat().st_size if path.exists() else 0
        if size % self.record_bytes or size // self.record_bytes != header["sample_count"]:
            raise CacheCorruptionError(f"{path} size {size} does not match the header")
        if not size:
            return
        with open(path, "rb") as fh:
            for pos in range(header["sample_count"]):
                fh.seek(pos * self.record_bytes)
                sid = fh.read(DIGEST_BYTES).hex()
                self._index[sid] = pos
                self._order.append(sid)

    def _write_header(self):
        atomic_write_text(self.root / HEADER_FILE, json.dumps(self.header(), indent=1) + "\n")

    # -- entries ------------------------------------------------------------
    def __len__(self) -> int:
        return len(self._order)

    def __contains__(self, sid: str) -> bool:
        return sid in self._index

    def sample_ids(self) -> list[str]:
        return list(self._order)

    def payload_size(self, sid: str) -> int:
        if sid not in self._index:
            raise CacheMissError(f"no cache entry for sample {sid[:12]}")
        return self.payload_size_bytes

    def put(self, sid: str, tensors: Sequence[np.ndarray]) -> bool:
        """Store ``tensors`` under ``sid``; returns False if already present."""
        if sid in self._index:
            return False
        if len(tensors) != self.num_tensors:
            raise ValueError(f"expected {self.num_tensors} tensors, got {len(tensors)}")
        for t in tensors:
            if t.shape != (self.seq_len, self.hidden):
                raise ValueError(f"tensor shape {t.shape} != {(self.seq_len, self.hidden)}")
        payload = np.ascontiguousarray(np.stack(tensors), dtype=self._np_dtype).tobytes()
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.root / ENTRIES_FILE, "ab") as fh:
            fh.write(bytes.fromhex(sid))
            fh.write(hashlib.sha256(payload).digest())
            fh.write(payload)
        self._index[sid] = len(self._order)
        self._order.append(sid)
        self._write_header()
        return True

    def get(self, sid: str) -> list[np.ndarray]:
        """Read back the tensors stored under ``sid``.

        Raises:
            CacheMissError: unknown sample id.
            CacheCorruptionError: stored checksum does not match the payload.
        """
        if sid not in self._index:
            raise CacheMissError(f"no cache entry for sample {sid[:12]}")
        with open(self.root / ENTRIES_FILE, "rb") as fh:
            fh.seek(self._index[sid] * self.record_bytes)
            record = fh.read(self.record_bytes)
        stored_id, checksum = record[:DIGEST_BYTES], record[DIGEST_BYTES:2 * DIGEST_BYTES]
        payload = record[2 * DIGEST_BYTES:]
        if stored_id.hex() != sid or hashlib.sha256(payload).digest() != checksum:
            raise CacheCorruptionError(f"checksum mismatch for sample {sid[:12]}")
        arr = np.frombuffer(payload, dtype=self._np_dtype).astype(np.float64)
        arr = arr.reshape(self.num_tensors, self.seq_len, self.hidden)
        return [arr[i].copy() for i in range(self.num_tensors)]

    def verify(self) -> dict:
        """Check every record; returns counts and the ids that failed."""
        bad = []
        for sid in self._order:
            try:
                self.get(sid)
            except CacheCorruptionError:
                bad.append(sid)
        return {"entries": len(self._order), "corrupt": bad, "ok": not bad}

    def file_bytes(self) -> int:
        path = self.root / ENTRIES_FILE
        return path.stat().st_size if path.exists() else 0

    def clear(self) -> None:
        """Delete the backing files. Safe to call repeatedly."""
        if self.root.exists():
            shutil.rmtree(self.root)
        self._index.clear()
        self._order.clear()


def read_header(root: str | Path) -> dict:
    path = Path(root) / HEADER_FILE
    try:
        with open(path) as fh:
            header = json.load(fh)
    except FileNotFoundError:
        raise CacheMissError(f"no activation cache at {root}") from None
    except json.JSONDecodeError as exc:
        raise CacheCorruptionError(f"unreadable cache header {path}: {exc}") from exc
    if header.get("schema_version") != CACHE_SCHEMA_VERSION:
        raise CacheError(f"unsupported cache schema_version {header.get('schema_version')!r}")
    return header
