"""Paged storage of normalized relations and PK/FK star joins."""

from .catalog import Catalog
from .join import (
    DirectChunk,
    FactorizedSource,
    MaterializedSource,
    StarBlock,
    StarChunk,
    StarJoin,
    StreamSource,
    concat_chunk,
    make_source,
    materialize_join,
    probe_matching,
)
from .schema import Column, JoinSpec, Schema
from .storage import (
    DEFAULT_BLOCK_PAGES,
    DEFAULT_PAGE_ROWS,
    Batch,
    FkIndex,
    KeyIndex,
    RelationHandle,
    append_batch,
    build_fk_index,
    build_key_index,
    create_relation,
    open_relation,
    read_all,
    read_rows,
    scan_batches,
)
