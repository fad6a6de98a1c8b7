"""A catalog is a directory of relation files plus ``manifest.json``."""

from __future__ import annotations

import json
import os

from ..errors import AlreadyExists, SchemaError, StorageError
from .schema import JoinSpec, Schema
from .storage import DEFAULT_PAGE_ROWS, create_relation, open_relation

MANIFEST = "manifest.json"


class Catalog:
    """Name -> relation mapping persisted as JSON next to the ``.rel`` files.

    Manifest layout::

        {"relations": {name: {"path": "name.rel", "schema": [...],
                              "page_size_rows": n}},
         "joins": {name: JoinSpec-as-dict}}
    """

    def __init__(self, root):
        self.root = os.fspath(root)
        os.makedirs(self.root, exist_ok=True)
        self._manifest_path = os.path.join(self.root, MANIFEST)
        if os.path.exists(self._manifest_path):
            try:
                with open(self._manifest_path) as fh:
                    self._manifest = json.load(fh)
            except (OSError, ValueError) as exc:
                raise StorageError(f"{self._manifest_path}: {exc}") from exc
        else:
            self._manifest = {"relations": {}, "joins": {}}
            self._save()
        self._open = {}

    def _save(self):
        tmp = self._manifest_path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(self._manifest, fh, indent=2, sort_keys=True)
        os.replace(tmp, self._manifest_path)

    @property
    def relations(self):
        return sorted(self._manifest["relations"])

    def __contains__(self, name):
        return name in self._manifest["relations"]

    def path_of(self, name):
        return os.path.join(self.root, self._manifest["relations"][name]["path"])

    def create(self, name, schema, page_size_rows=DEFAULT_PAGE_ROWS):
        if name in self:
            raise AlreadyExists(f"relation {name!r} already in catalog {self.root}")
        rel_path = f"{name}.rel"
        handle = create_relation(schema, os.path.join(self.root, rel_path), page_size_rows, name)
        self._manifest["relations"][name] = {
            "path": rel_path,
            "schema": schema.to_list(),
            "page_size_rows": page_size_rows,
        }
        self._save()
        self._open[name] = handle
        return handle

    def open(self, name):
        """Return a handle; cached so indexes built once are reused."""
        if name not in self:
            raise SchemaError(f"relation {name!r} not in catalog {self.root}")
        h = self._open.get(name)
        if h is None:
            h = open_relation(self.path_of(name), name)
            entry = self._manifest["relations"][name]
            if h.schema != Schema.from_list(entry["schema"]):
                raise StorageError(f"{name}: manifest schema disagrees with file header")
            self._open[name] = h
        return h

    def drop(self, name):
        if name not in self:
            return
        path = self.path_of(name)
        del self._manifest["relations"][name]
        self._open.pop(name, None)
        self._save()
        if os.path.exists(path):
            os.remove(path)

    def set_meta(self, name, meta):
        """Attach free-form JSON metadata to a relation."""
        self._manifest["relations"][name]["meta"] = meta
        self._save()

    def meta(self, name):
        if name not in self:
            raise SchemaError(f"relation {name!r} not in catalog {self.root}")
        return self._manifest["relations"][name].get("meta")

    # joins -----------------------------------------------------------------
    def add_join(self, name, spec):
        self._manifest["joins"][name] = spec.to_dict()
        self._save()

    def join(self, name="default"):
        try:
            return JoinSpec.from_dict(self._manifest["joins"][name])
        except KeyError:
            raise SchemaError(f"join {name!r} not in catalog {self.root}") from None

    @property
    def joins(self):
        return sorted(self._manifest["joins"])

    def check_join(self, spec):
        """Verify every relation and FK named by ``spec`` exists."""
        s = self.open(spec.s)
        for fk, table in spec.fk_columns.items():
            col = s.schema.column(fk)
            if col.references != table:
                raise SchemaError(f"{spec.s}.{fk} references {col.references!r}, not {table!r}")
            if table not in self:
                raise SchemaError(f"attribute table {table!r} not in catalog")
        return s
