"""PK/FK probing, block-nested-loop star joins and per-strategy data sources.

Three ways of feeding a learner from a star join S -> R_1..R_q:

* :class:`MaterializedSource` scans a stored join result T page by page.
* :class:`StreamSource` joins on the fly and hands out concatenated rows.
* :class:`FactorizedSource` hands out S rows together with, for each
  attribute table, the block of R tuples and the per-row group index, so
  per-R-tuple work can be done once.

S and F share one traversal, so they read exactly the same pages: R_1 is
read in blocks of ``block_size_pages``; for every block, S is scanned in
full and matched on FK_1.  Attribute tables R_2..R_q are read once per pass
and joined through an in-memory key index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import IndexRequired, ReferentialViolation, SchemaError
from .schema import FOREIGN_KEY, Column, JoinSpec, Schema
from .storage import (
    Batch,
    KeyIndex,
    allocate_rows,
    build_fk_index,
    build_key_index,
    read_all,
    read_rows,
    scan_batches,
)


def take(batch, idx):
    """Row subset of a batch (``idx`` is a mask or an index array)."""
    return Batch(
        row_ordinals=batch.row_ordinals[idx],
        features=batch.features[idx],
        keys=batch.keys[idx],
        fks={k: v[idx] for k, v in batch.fks.items()},
        targets=None if batch.targets is None else batch.targets[idx],
    )


def probe_matching(s, r_batch, fk_column, counter=None, phase="probe"):
    """Group the S rows referencing each R row of ``r_batch``.

    Returns ``[(r_row_ordinal, Batch_of_matching_S_rows), ...]`` in
    ``r_batch`` order; R rows nobody references get an empty batch.
    """
    index = s.fk_index.get(fk_column)
    if index is None:
        raise IndexRequired(f"{s.name} has no fk_index on {fk_column!r}; call build_fk_index")
    ords, group = index.gather(r_batch.keys)
    rows = read_rows(s, ords, counter, phase)
    bounds = np.searchsorted(group, np.arange(len(r_batch) + 1))
    return [
        (int(r_batch.row_ordinals[i]), take(rows, slice(bounds[i], bounds[i + 1])))
        for i in range(len(r_batch))
    ]


# ---------------------------------------------------------------------------
# shared traversal


@dataclass
class StarChunk:
    """S rows matched against one R_1 block.

    ``groups[:, i]`` indexes ``StarBlock.tables[i]`` (block-local for R_1,
    table-wide for R_2..R_q).
    """

    s: Batch
    groups: np.ndarray

    @property
    def ordinals(self):
        return self.s.row_ordinals

    @property
    def xs(self):
        return self.s.features

    @property
    def y(self):
        return self.s.targets

    def __len__(self):
        return len(self.s)


@dataclass
class StarBlock:
    block_id: int
    tables: list          # feature matrices, one per attribute table
    table_keys: list
    chunks: object        # iterator of StarChunk


class StarJoin:
    """Reads S and R_1..R_q of a join spec out of a catalog."""

    def __init__(self, catalog, spec):
        self.catalog = catalog
        self.spec = spec
        self.s = catalog.check_join(spec)
        self.tables = [catalog.open(t) for t in spec.attribute_tables]
        self.fk_cols = [spec.fk_for(t) for t in spec.attribute_tables]
        self.widths = [self.s.schema.n_features] + [t.schema.n_features for t in self.tables]

    @property
    def n_rows(self):
        return self.s.n_rows

    @property
    def has_target(self):
        return self.s.schema.target_index is not None

    def blocks(self, counter=None, phase="io"):
        """One pass of the block nested loop; raises on dangling FKs."""
        block = self.spec.block_size_pages
        others = []
        for t in self.tables[1:]:
            b = read_all(t, counter, phase)
            others.append((b.features, b.keys, KeyIndex(b.keys)))
        matched = [0]
        for bid, r_block in enumerate(scan_batches(self.tables[0], block, counter, phase)):
            idx = KeyIndex(r_block.keys)
            tables = [r_block.features] + [o[0] for o in others]
            keys = [r_block.keys] + [o[1] for o in others]
            yield StarBlock(bid, tables, keys, self._chunks(idx, others, counter, phase, matched))
        if matched[0] != self.s.n_rows:
            raise ReferentialViolation(
                f"{self.s.n_rows - matched[0]} rows of {self.s.name} reference no row of "
                f"{self.tables[0].name} via {self.fk_cols[0]}"
            )

    def _chunks(self, idx, others, counter, phase, matched):
        for s_batch in scan_batches(self.s, self.spec.block_size_pages, counter, phase):
            pos, found = idx.locate(s_batch.fks[self.fk_cols[0]])
            if not found.any():
                continue
            if not found.all():
                s_batch = take(s_batch, found)
                pos = pos[found]
            groups = np.empty((len(s_batch), len(self.tables)), dtype=np.int64)
            groups[:, 0] = pos
            for i, (fk, (_, _, oidx)) in enumerate(zip(self.fk_cols[1:], others), start=1):
                p, f = oidx.locate(s_batch.fks[fk])
                if not f.all():
                    bad = int(s_batch.fks[fk][~f][0])
                    raise ReferentialViolation(f"{self.s.name}.{fk} = {bad} has no match")
                groups[:, i] = p
            matched[0] += len(s_batch)
            yield StarChunk(s_batch, groups)

    # random access -------------------------------------------------------
    def fk_values(self):
        """Distinct FK_1 values present in S (minibatch visitation domain)."""
        if self.fk_cols[0] not in self.s.fk_index:
            build_fk_index(self.s, self.fk_cols[0])
        return self.s.fk_index[self.fk_cols[0]].values

    def load_tables(self, counter=None, phase="io"):
        """Read R_2..R_q completely; returns [(features, KeyIndex)]."""
        out = []
        for t in self.tables[1:]:
            b = read_all(t, counter, phase)
            out.append((b.features, KeyIndex(b.keys)))
        return out

    def group_block(self, r1_keys, others, counter=None, phase="io"):
        """StarBlock holding exactly the S rows whose FK_1 is in ``r1_keys``.

        Rows are ordered by position in ``r1_keys``, then by S ordinal.
        """
        r1 = self.tables[0]
        if r1.key_index is None:
            build_key_index(r1)
        r_ords, found = r1.key_index.locate(r1_keys)
        if not found.all():
            raise ReferentialViolation(f"key not present in {r1.name}")
        r_rows = read_rows(r1, r_ords, counter, phase)
        fkidx = self.s.fk_index.get(self.fk_cols[0])
        if fkidx is None:
            build_fk_index(self.s, self.fk_cols[0])
            fkidx = self.s.fk_index[self.fk_cols[0]]
        s_ords, group = fkidx.gather(r1_keys)
        s_rows = read_rows(self.s, s_ords, counter, phase)
        groups = np.empty((len(s_rows), len(self.tables)), dtype=np.int64)
        groups[:, 0] = group
        for i, (fk, (_, oidx)) in enumerate(zip(self.fk_cols[1:], others), start=1):
            p, f = oidx.locate(s_rows.fks[fk])
            if not f.all():
                raise ReferentialViolation(f"{self.s.name}.{fk} has dangling values")
            groups[:, i] = p
        tables = [r_rows.features] + [o[0] for o in others]
        return StarBlock(-1, tables, None, iter([StarChunk(s_rows, groups)]))

    def fetch(self, ordinals):
        """Joined feature rows for the given S ordinals (no counting)."""
        s_rows = read_rows(self.s, ordinals)
        parts = [s_rows.features]
        for t, fk in zip(self.tables, self.fk_cols):
            if t.key_index is None:
                build_key_index(t)
            r_ords, found = t.key_index.locate(s_rows.fks[fk])
            if not found.all():
                raise ReferentialViolation(f"{self.s.name}.{fk} has dangling values")
            parts.append(read_rows(t, r_ords).features)
        return np.hstack(parts)


def concat_chunk(block, chunk):
    """Materialize [x_S | x_R1[g1] | ... ] for one chunk."""
    parts = [chunk.xs] + [tab[chunk.groups[:, i]] for i, tab in enumerate(block.tables)]
    return np.hstack(parts)


# ---------------------------------------------------------------------------
# materialization


def joined_schema(catalog, spec):
    s = catalog.open(spec.s)
    cols = [Column(s.schema.key_name, "key")]
    if s.schema.target_name is not None:
        cols.append(Column(s.schema.target_name, "target"))
    cols += [Column(f, "feature") for f in s.schema.feature_names]
    for t in spec.attribute_tables:
        cols += [Column(f"{t}.{f}", "feature") for f in catalog.open(t).schema.feature_names]
    for fk in (spec.fk_for(t) for t in spec.attribute_tables):
        cols.append(Column(fk, FOREIGN_KEY, spec.fk_columns[fk]))
    return Schema(tuple(cols))


def materialize_join(spec, catalog, name="T", counter=None, phase="materialize"):
    """Write the join result as relation ``name``; rows follow S storage order."""
    star = StarJoin(catalog, spec)
    schema = joined_schema(catalog, spec)
    page_rows = star.s.page_size_rows
    t = catalog.create(name, schema, page_rows)
    catalog.set_meta(name, {"join": spec.to_dict(), "widths": star.widths})
    allocate_rows(t, star.n_rows)
    if star.n_rows == 0:
        return t
    mm = t.raw("r+")
    key_j = schema.index(schema.key_name)
    tgt_j = schema.target_index
    feat_j = schema.feature_indices
    fk_j = [schema.index(fk) for fk in star.fk_cols]
    for block in star.blocks(counter, phase):
        for chunk in block.chunks:
            x = concat_chunk(block, chunk)
            raw = np.empty((len(chunk), schema.width), dtype="<u8")
            raw[:, key_j] = chunk.s.keys
            if tgt_j is not None:
                raw[:, tgt_j] = chunk.s.targets.view("<u8")
            raw[:, feat_j] = np.ascontiguousarray(x).view("<u8")
            for j, fk in zip(fk_j, star.fk_cols):
                raw[:, j] = chunk.s.fks[fk]
            mm[chunk.ordinals] = raw
    mm.flush()
    del mm
    if counter is not None:
        counter.add(phase, pages_written=t.n_pages)
    return t


# ---------------------------------------------------------------------------
# strategy-facing sources


@dataclass
class DirectChunk:
    ordinals: np.ndarray
    x: np.ndarray
    y: np.ndarray | None = None

    def __len__(self):
        return len(self.ordinals)


class MaterializedSource:
    """Feeds learners from a stored join result T (strategy M)."""

    kind = "M"

    def __init__(self, catalog, t_name, block_size_pages):
        self.t = catalog.open(t_name)
        meta = catalog.meta(t_name)
        if not meta or "widths" not in meta:
            raise SchemaError(f"{t_name} was not produced by materialize_join")
        self.widths = list(meta["widths"])
        self.spec = JoinSpec.from_dict(meta["join"])
        self.fk_col = self.spec.fk_for(self.spec.attribute_tables[0])
        self.block = block_size_pages

    @property
    def n_rows(self):
        return self.t.n_rows

    @property
    def has_target(self):
        return self.t.schema.target_index is not None

    def passes(self, counter=None, phase="io"):
        for b in scan_batches(self.t, self.block, counter, phase):
            yield DirectChunk(b.row_ordinals, b.features, b.targets)

    def fetch(self, ordinals):
        return read_rows(self.t, ordinals).features

    def fk_values(self):
        if self.fk_col not in self.t.fk_index:
            build_fk_index(self.t, self.fk_col)
        return self.t.fk_index[self.fk_col].values

    def group_chunk(self, r1_keys, counter=None, phase="io"):
        self.fk_values()
        ords, _ = self.t.fk_index[self.fk_col].gather(r1_keys)
        b = read_rows(self.t, ords, counter, phase)
        return DirectChunk(b.row_ordinals, b.features, b.targets)


class StreamSource:
    """Joins on the fly and hands out concatenated rows (strategy S)."""

    kind = "S"

    def __init__(self, catalog, spec):
        self.star = StarJoin(catalog, spec)
        self.widths = self.star.widths
        self._others = None

    @property
    def n_rows(self):
        return self.star.n_rows

    @property
    def has_target(self):
        return self.star.has_target

    def passes(self, counter=None, phase="io"):
        for block in self.star.blocks(counter, phase):
            for chunk in block.chunks:
                yield DirectChunk(chunk.ordinals, concat_chunk(block, chunk), chunk.y)

    def fetch(self, ordinals):
        return self.star.fetch(ordinals)

    def fk_values(self):
        return self.star.fk_values()

    def begin_epoch(self, counter=None, phase="io"):
        self._others = self.star.load_tables(counter, phase)

    def group_chunk(self, r1_keys, counter=None, phase="io"):
        if self._others is None:
            self.begin_epoch(counter, phase)
        block = self.star.group_block(r1_keys, self._others, counter, phase)
        chunk = next(block.chunks)
        return DirectChunk(chunk.ordinals, concat_chunk(block, chunk), chunk.y)


class FactorizedSource:
    """Hands out S rows with R-tuple blocks and group indexes (strategy F)."""

    kind = "F"

    def __init__(self, catalog, spec):
        self.star = StarJoin(catalog, spec)
        self.widths = self.star.widths
        self._others = None

    @property
    def n_rows(self):
        return self.star.n_rows

    @property
    def has_target(self):
        return self.star.has_target

    def passes(self, counter=None, phase="io"):
        return self.star.blocks(counter, phase)

    def fetch(self, ordinals):
        return self.star.fetch(ordinals)

    def fk_values(self):
        return self.star.fk_values()

    def begin_epoch(self, counter=None, phase="io"):
        self._others = self.star.load_tables(counter, phase)

    def group_block(self, r1_keys, counter=None, phase="io"):
        if self._others is None:
            self.begin_epoch(counter, phase)
        return self.star.group_block(r1_keys, self._others, counter, phase)


def make_source(strategy, catalog, spec, t_name="T"):
    """Source for ``strategy`` in {"m", "s", "f"}; M materializes T if absent."""
    strategy = strategy.lower()
    if strategy == "m":
        if t_name not in catalog:
            materialize_join(spec, catalog, t_name)
        return MaterializedSource(catalog, t_name, spec.block_size_pages)
    if strategy == "s":
        return StreamSource(catalog, spec)
    if strategy == "f":
        return FactorizedSource(catalog, spec)
    raise ValueError(f"unknown strategy {strategy!r}; expected m, s or f")
