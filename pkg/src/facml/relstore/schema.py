"""Schemas and join descriptions for normalized relations."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import SchemaError

KEY = "key"
FOREIGN_KEY = "foreign_key"
FEATURE = "feature"
TARGET = "target"
_KINDS = (KEY, FOREIGN_KEY, FEATURE, TARGET)


@dataclass(frozen=True)
class Column:
    name: str
    kind: str
    references: str | None = None  # target relation, foreign keys only

    def to_dict(self):
        d = {"name": self.name, "kind": self.kind}
        if self.references is not None:
            d["references"] = self.references
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["kind"], d.get("references"))


@dataclass(frozen=True)
class Schema:
    """Ordered columns of a relation.

    Keys and foreign keys are stored as 64-bit unsigned integers, features
    and the optional target as 64-bit floats.
    """

    columns: tuple

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        self.validate()

    def validate(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate column names in {names}")
        for c in self.columns:
            if c.kind not in _KINDS:
                raise SchemaError(f"column {c.name!r}: unknown kind {c.kind!r}")
            if c.kind == FOREIGN_KEY and not c.references:
                raise SchemaError(f"foreign key {c.name!r} names no relation")
        n_keys = sum(c.kind == KEY for c in self.columns)
        if n_keys != 1:
            raise SchemaError(f"expected exactly one key column, found {n_keys}")
        if sum(c.kind == TARGET for c in self.columns) > 1:
            raise SchemaError("at most one target column allowed")

    @classmethod
    def build(cls, key, features=(), fks=None, target=None):
        """Convenience constructor: key first, then target, features, fks."""
        cols = [Column(key, KEY)]
        if target is not None:
            cols.append(Column(target, TARGET))
        cols.extend(Column(f, FEATURE) for f in features)
        for name, rel in (fks or {}).items():
            cols.append(Column(name, FOREIGN_KEY, rel))
        return cls(tuple(cols))

    @property
    def names(self):
        return [c.name for c in self.columns]

    @property
    def width(self):
        return len(self.columns)

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"no column named {name!r}") from None

    def column(self, name):
        return self.columns[self.index(name)]

    def _idx(self, kind):
        return [i for i, c in enumerate(self.columns) if c.kind == kind]

    @property
    def key_index(self):
        return self._idx(KEY)[0]

    @property
    def key_name(self):
        return self.columns[self.key_index].name

    @property
    def feature_indices(self):
        return self._idx(FEATURE)

    @property
    def feature_names(self):
        return [self.columns[i].name for i in self.feature_indices]

    @property
    def n_features(self):
        return len(self.feature_indices)

    @property
    def fk_names(self):
        return [self.columns[i].name for i in self._idx(FOREIGN_KEY)]

    @property
    def target_index(self):
        t = self._idx(TARGET)
        return t[0] if t else None

    @property
    def target_name(self):
        i = self.target_index
        return None if i is None else self.columns[i].name

    def to_list(self):
        return [c.to_dict() for c in self.columns]

    @classmethod
    def from_list(cls, items):
        try:
            return cls(tuple(Column.from_dict(d) for d in items))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema description: {exc}") from None


@dataclass(frozen=True)
class JoinSpec:
    """A PK/FK star join: fact relation ``s`` and attribute tables R_1..R_q.

    ``fk_columns`` maps each FK column of S to the attribute table it
    references, in the same order as ``attribute_tables``.
    """

    s: str
    attribute_tables: tuple
    fk_columns: dict = field(default_factory=dict)
    block_size_pages: int = 16

    def __post_init__(self):
        object.__setattr__(self, "attribute_tables", tuple(self.attribute_tables))
        object.__setattr__(self, "fk_columns", dict(self.fk_columns))
        if len(self.attribute_tables) < 1:
            raise SchemaError("a join needs at least one attribute table")
        if self.block_size_pages < 1:
            raise SchemaError("block_size_pages must be >= 1")
        targets = list(self.fk_columns.values())
        if len(set(targets)) != len(targets):
            raise SchemaError("two FK columns map to the same attribute table")
        if sorted(targets) != sorted(self.attribute_tables):
            raise SchemaError(
                f"fk_columns {self.fk_columns} do not cover attribute tables "
                f"{list(self.attribute_tables)}"
            )

    @property
    def q(self):
        return len(self.attribute_tables)

    def fk_for(self, table):
        for fk, t in self.fk_columns.items():
            if t == table:
                return fk
        raise SchemaError(f"no FK references {table!r}")

    def to_dict(self):
        return {
            "s": self.s,
            "attribute_tables": list(self.attribute_tables),
            "fk_columns": dict(self.fk_columns),
            "block_size_pages": self.block_size_pages,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["s"], d["attribute_tables"], d["fk_columns"], d.get("block_size_pages", 16))

    def with_block(self, block_size_pages):
        return JoinSpec(self.s, self.attribute_tables, self.fk_columns, block_size_pages)
