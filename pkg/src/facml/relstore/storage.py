"""Binary paged relation files.

Layout (all little-endian)::

    magic  b"FACMLREL"      8 bytes
    version                 u32
    header_len              u32   (bytes, multiple of 8)
    n_rows                  u64
    page_size_rows          u64
    schema                  JSON, zero-padded to header_len
    rows                    n_rows x n_cols 8-byte words

Keys and foreign keys are ``<u8``; features and targets are ``<f8``.  A page
is ``page_size_rows`` consecutive rows; only the last page may be partial.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import KeyViolation, SchemaError, StorageError
from .schema import FEATURE, FOREIGN_KEY, KEY, TARGET, Schema

MAGIC = b"FACMLREL"
VERSION = 1
_FIXED = struct.Struct("<8sIIQQ")
_NROWS_OFFSET = 16

DEFAULT_PAGE_ROWS = 8192
DEFAULT_BLOCK_PAGES = 16


@dataclass
class Batch:
    """A run of rows read from (or destined for) one relation."""

    row_ordinals: np.ndarray
    features: np.ndarray
    keys: np.ndarray
    fks: dict = field(default_factory=dict)
    targets: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.keys)
        lens = [len(self.row_ordinals), self.features.shape[0]]
        lens += [len(v) for v in self.fks.values()]
        if self.targets is not None:
            lens.append(len(self.targets))
        if any(m != n for m in lens):
            raise SchemaError(f"batch columns disagree in length: {[n] + lens}")

    def __len__(self):
        return len(self.keys)

    @classmethod
    def from_arrays(cls, keys, features, fks=None, targets=None):
        keys = np.asarray(keys, dtype=np.uint64)
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 1:
            features = features.reshape(len(keys), -1)
        return cls(
            row_ordinals=np.full(len(keys), -1, dtype=np.int64),
            features=features,
            keys=keys,
            fks={k: np.asarray(v, dtype=np.uint64) for k, v in (fks or {}).items()},
            targets=None if targets is None else np.asarray(targets, dtype=np.float64),
        )


class KeyIndex:
    """Bijection key value -> row ordinal, stored as sorted arrays."""

    def __init__(self, keys):
        keys = np.asarray(keys, dtype=np.uint64)
        order = np.argsort(keys, kind="stable")
        self.sorted_keys = keys[order]
        self.ordinals = order.astype(np.int64)
        if len(keys) > 1 and np.any(self.sorted_keys[1:] == self.sorted_keys[:-1]):
            raise KeyViolation("duplicate key values in relation")
        # unique keys spanning exactly len(keys) values form a dense range
        n = len(keys)
        self.dense_base = (self.sorted_keys[0]
                           if n and int(self.sorted_keys[-1] - self.sorted_keys[0]) == n - 1
                           else None)

    def __len__(self):
        return len(self.sorted_keys)

    def locate(self, keys):
        """Return (ordinals, found_mask) for an array of key values."""
        keys = np.asarray(keys, dtype=np.uint64)
        if self.dense_base is not None:
            off = keys - self.dense_base   # wraps above n for keys below the base
            found = off < np.uint64(len(self.sorted_keys))
            pos = np.where(found, off, 0).astype(np.int64)
            return np.where(found, self.ordinals[pos], -1), found
        pos = np.searchsorted(self.sorted_keys, keys)
        pos_c = np.minimum(pos, max(len(self.sorted_keys) - 1, 0))
        if len(self.sorted_keys) == 0:
            return np.full(len(keys), -1, dtype=np.int64), np.zeros(len(keys), bool)
        found = self.sorted_keys[pos_c] == keys
        ords = np.where(found, self.ordinals[pos_c], -1)
        return ords, found


class FkIndex:
    """Foreign-key value -> ascending list of row ordinals (CSR layout)."""

    def __init__(self, fk_values):
        fk_values = np.asarray(fk_values, dtype=np.uint64)
        order = np.argsort(fk_values, kind="stable")
        sv = fk_values[order]
        self.values, starts, counts = np.unique(sv, return_index=True, return_counts=True)
        self.offsets = np.concatenate([starts, [len(sv)]]).astype(np.int64)
        self.ordinals = order.astype(np.int64)
        self.counts = counts.astype(np.int64)

    def __len__(self):
        return len(self.values)

    def lookup(self, value):
        i = np.searchsorted(self.values, np.uint64(value))
        if i < len(self.values) and self.values[i] == np.uint64(value):
            return self.ordinals[self.offsets[i]:self.offsets[i + 1]]
        return self.ordinals[:0]

    def gather(self, values):
        """Concatenated ordinals for ``values`` plus the group id of each."""
        values = np.asarray(values, dtype=np.uint64)
        i = np.searchsorted(self.values, values)
        ic = np.minimum(i, max(len(self.values) - 1, 0))
        hit = (self.values[ic] == values) if len(self.values) else np.zeros(len(values), bool)
        starts = np.where(hit, self.offsets[ic], 0)
        sizes = np.where(hit, self.offsets[ic + 1] - self.offsets[ic], 0) if len(self.values) else np.zeros(len(values), np.int64)
        total = int(sizes.sum())
        group = np.repeat(np.arange(len(values)), sizes)
        run_start = np.repeat(np.cumsum(sizes) - sizes, sizes)
        pos = np.repeat(starts, sizes) + (np.arange(total) - run_start)
        return self.ordinals[pos], group

    def as_dict(self):
        return {
            int(v): self.ordinals[self.offsets[i]:self.offsets[i + 1]].tolist()
            for i, v in enumerate(self.values)
        }


@dataclass
class RelationHandle:
    name: str
    schema: Schema
    path: str
    n_rows: int
    page_size_rows: int
    header_len: int
    key_index: KeyIndex | None = None
    fk_index: dict = field(default_factory=dict)
    _sorted_keys: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_pages(self):
        return -(-self.n_rows // self.page_size_rows)

    @property
    def row_bytes(self):
        return 8 * self.schema.width

    def raw(self, mode="r"):
        """Memory map of the row area as an ``(n_rows, n_cols)`` ``<u8`` array."""
        if self.n_rows == 0:
            return np.zeros((0, self.schema.width), dtype="<u8")
        try:
            return np.memmap(self.path, dtype="<u8", mode=mode, offset=self.header_len,
                             shape=(self.n_rows, self.schema.width))
        except (OSError, ValueError) as exc:
            raise StorageError(f"{self.path}: {exc}") from exc

    def invalidate_indexes(self):
        self.key_index = None
        self.fk_index = {}


def _encode_header(schema, page_size_rows, n_rows=0):
    blob = json.dumps({"schema": schema.to_list()}).encode()
    header_len = _FIXED.size + len(blob)
    header_len += (-header_len) % 64
    head = _FIXED.pack(MAGIC, VERSION, header_len, n_rows, page_size_rows) + blob
    return head.ljust(header_len, b"\0"), header_len


def create_relation(schema, path, page_size_rows=DEFAULT_PAGE_ROWS, name=None):
    """Persist an empty relation with header; fails if ``path`` exists."""
    from ..errors import AlreadyExists

    if page_size_rows < 1:
        raise SchemaError("page_size_rows must be >= 1")
    schema.validate()
    if os.path.exists(path):
        raise AlreadyExists(path)
    head, header_len = _encode_header(schema, page_size_rows)
    try:
        with open(path, "xb") as fh:
            fh.write(head)
    except FileExistsError:
        raise AlreadyExists(path) from None
    except OSError as exc:
        raise StorageError(f"{path}: {exc}") from exc
    name = name or os.path.splitext(os.path.basename(path))[0]
    return RelationHandle(name, schema, path, 0, page_size_rows, header_len)


def open_relation(path, name=None):
    try:
        with open(path, "rb") as fh:
            fixed = fh.read(_FIXED.size)
            if len(fixed) < _FIXED.size:
                raise StorageError(f"{path}: truncated header")
            magic, version, header_len, n_rows, page_rows = _FIXED.unpack(fixed)
            if magic != MAGIC:
                raise StorageError(f"{path}: bad magic {magic!r}")
            if version != VERSION:
                raise StorageError(f"{path}: unsupported version {version}")
            blob = fh.read(header_len - _FIXED.size).rstrip(b"\0")
        size = os.path.getsize(path)
    except OSError as exc:
        raise StorageError(f"{path}: {exc}") from exc
    schema = Schema.from_list(json.loads(blob)["schema"])
    if size < header_len + n_rows * 8 * schema.width:
        raise StorageError(f"{path}: file shorter than header claims ({n_rows} rows)")
    name = name or os.path.splitext(os.path.basename(path))[0]
    return RelationHandle(name, schema, path, n_rows, page_rows, header_len)


def _encode_rows(schema, batch):
    n = len(batch)
    if batch.features.ndim != 2 or batch.features.shape[1] != schema.n_features:
        raise SchemaError(
            f"feature width {batch.features.shape} does not match schema ({schema.n_features})"
        )
    raw = np.empty((n, schema.width), dtype="<u8")
    feats = np.ascontiguousarray(batch.features, dtype="<f8").view("<u8")
    fi = 0
    for j, col in enumerate(schema.columns):
        if col.kind == KEY:
            raw[:, j] = batch.keys
        elif col.kind == FEATURE:
            raw[:, j] = feats[:, fi]
            fi += 1
        elif col.kind == FOREIGN_KEY:
            if col.name not in batch.fks:
                raise SchemaError(f"batch lacks foreign key column {col.name!r}")
            raw[:, j] = np.asarray(batch.fks[col.name], dtype=np.uint64)
        elif col.kind == TARGET:
            if batch.targets is None:
                raise SchemaError(f"batch lacks target column {col.name!r}")
            raw[:, j] = np.ascontiguousarray(batch.targets, dtype="<f8").view("<u8")
    return raw


def _existing_keys(handle):
    if handle._sorted_keys is None:
        if handle.n_rows:
            col = np.array(handle.raw()[:, handle.schema.key_index])
            handle._sorted_keys = np.sort(col)
        else:
            handle._sorted_keys = np.zeros(0, dtype=np.uint64)
    return handle._sorted_keys


def append_batch(handle, batch):
    """Append rows durably; duplicate keys raise :class:`KeyViolation`."""
    raw = _encode_rows(handle.schema, batch)
    keys = np.asarray(batch.keys, dtype=np.uint64)
    new_sorted = np.sort(keys)
    if len(keys) > 1 and np.any(new_sorted[1:] == new_sorted[:-1]):
        raise KeyViolation(f"duplicate keys inside batch for {handle.name}")
    existing = _existing_keys(handle)
    if len(existing) and len(keys):
        pos = np.searchsorted(existing, new_sorted)
        pos = np.minimum(pos, len(existing) - 1)
        clash = existing[pos] == new_sorted
        if clash.any():
            raise KeyViolation(f"key {int(new_sorted[clash][0])} already present in {handle.name}")
    try:
        with open(handle.path, "r+b") as fh:
            fh.seek(handle.header_len + handle.n_rows * handle.row_bytes)
            fh.write(raw.tobytes())
            handle.n_rows += len(keys)
            fh.seek(_NROWS_OFFSET)
            fh.write(struct.pack("<Q", handle.n_rows))
            fh.flush()
            os.fsync(fh.fileno())
    except OSError as exc:
        raise StorageError(f"{handle.path}: {exc}") from exc
    handle._sorted_keys = np.union1d(existing, keys) if len(existing) else new_sorted
    handle.invalidate_indexes()
    return handle


def allocate_rows(handle, n_rows):
    """Grow an empty relation to ``n_rows`` zeroed rows (used for in-place fills)."""
    if handle.n_rows:
        raise StorageError("allocate_rows requires an empty relation")
    try:
        with open(handle.path, "r+b") as fh:
            fh.truncate(handle.header_len + n_rows * handle.row_bytes)
            fh.seek(_NROWS_OFFSET)
            fh.write(struct.pack("<Q", n_rows))
    except OSError as exc:
        raise StorageError(f"{handle.path}: {exc}") from exc
    handle.n_rows = n_rows
    handle._sorted_keys = None
    handle.invalidate_indexes()
    return handle


def decode_rows(schema, raw, ordinals):
    feats = raw[:, schema.feature_indices].view("<f8") if schema.n_features else np.zeros((len(raw), 0))
    ti = schema.target_index
    return Batch(
        row_ordinals=ordinals,
        features=feats,
        keys=raw[:, schema.key_index].copy(),
        fks={n: raw[:, schema.index(n)].copy() for n in schema.fk_names},
        targets=None if ti is None else raw[:, ti].copy().view("<f8"),
    )


def _count_read(counter, phase, handle, n_pages, n_rows):
    if counter is not None:
        counter.add(phase, pages_read=n_pages, field_reads=n_rows * handle.schema.n_features)


def scan_batches(handle, block_size_pages=DEFAULT_BLOCK_PAGES, counter=None, phase="io"):
    """Yield the relation in storage order, ``block_size_pages`` pages at a time."""
    if block_size_pages < 1:
        raise SchemaError("block_size_pages must be >= 1")
    if handle.n_rows == 0:
        return
    mm = handle.raw()
    step = block_size_pages * handle.page_size_rows
    for start in range(0, handle.n_rows, step):
        stop = min(start + step, handle.n_rows)
        try:
            raw = np.array(mm[start:stop])
        except OSError as exc:
            raise StorageError(f"{handle.path}: {exc}") from exc
        n_pages = -(-(stop - start) // handle.page_size_rows)
        _count_read(counter, phase, handle, n_pages, stop - start)
        yield decode_rows(handle.schema, raw, np.arange(start, stop, dtype=np.int64))


def read_rows(handle, ordinals, counter=None, phase="io"):
    """Random-access read; counts each distinct page touched once."""
    ordinals = np.asarray(ordinals, dtype=np.int64)
    if len(ordinals) and (ordinals.min() < 0 or ordinals.max() >= handle.n_rows):
        raise StorageError(f"{handle.name}: row ordinal out of range")
    mm = handle.raw()
    raw = np.array(mm[ordinals]) if len(ordinals) else np.zeros((0, handle.schema.width), "<u8")
    n_pages = len(np.unique(ordinals // handle.page_size_rows))
    _count_read(counter, phase, handle, n_pages, len(ordinals))
    return decode_rows(handle.schema, raw, ordinals)


def read_all(handle, counter=None, phase="io"):
    batches = list(scan_batches(handle, max(handle.n_pages, 1), counter, phase))
    if not batches:
        return decode_rows(handle.schema, np.zeros((0, handle.schema.width), "<u8"),
                           np.zeros(0, np.int64))
    return batches[0]


def build_key_index(handle):
    col = np.array(handle.raw()[:, handle.schema.key_index]) if handle.n_rows else np.zeros(0, np.uint64)
    handle.key_index = KeyIndex(col)
    return handle


def build_fk_index(handle, fk_column):
    col = handle.schema.column(fk_column)
    if col.kind != FOREIGN_KEY:
        raise SchemaError(f"{fk_column!r} is not a foreign key column")
    j = handle.schema.index(fk_column)
    vals = np.array(handle.raw()[:, j]) if handle.n_rows else np.zeros(0, np.uint64)
    handle.fk_index[fk_column] = FkIndex(vals)
    return handle
