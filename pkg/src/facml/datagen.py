"""Seeded synthetic star-join datasets and CSV ingestion.

Features come from a Gaussian mixture over the joined space.  Each R_1 row
draws a component and its R-side features from that component's marginal;
S rows referencing it draw their own features from the conditional given
the R-side values, so the join looks like samples of a single mixture.
Further attribute tables draw from the marginals independently.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, SchemaError
from .relstore.schema import FEATURE, FOREIGN_KEY, KEY, TARGET, Column, JoinSpec, Schema
from .relstore.storage import DEFAULT_BLOCK_PAGES, DEFAULT_PAGE_ROWS, Batch, append_batch, read_all


@dataclass(frozen=True)
class SynthSpec:
    """Shape and seed of a synthetic dataset.

    ``n_R`` and ``d_R`` are ints for a binary join or equal-length lists for
    a multi-way join.
    """

    n_S: int
    n_R: object
    d_S: int
    d_R: object
    K_true: int = 3
    noise_sigma: float = 0.1
    seed: int = 0
    with_target: bool = False

    def __post_init__(self):
        n_r, d_r = self.n_R_list, self.d_R_list
        if len(n_r) != len(d_r):
            raise SchemaError("n_R and d_R must list the same number of tables")
        if self.n_S < 1 or any(n < 1 or n > self.n_S for n in n_r):
            raise SchemaError("need n_S >= n_R >= 1 for every attribute table")
        if self.d_S < 1 or any(d < 1 for d in d_r):
            raise SchemaError("feature widths must be >= 1")
        if self.K_true < 1:
            raise SchemaError("K_true must be >= 1")
        if self.noise_sigma < 0:
            raise SchemaError("noise_sigma must be >= 0")

    @property
    def n_R_list(self):
        return [int(v) for v in np.atleast_1d(self.n_R)]

    @property
    def d_R_list(self):
        return [int(v) for v in np.atleast_1d(self.d_R)]

    @property
    def q(self):
        return len(self.n_R_list)

    @property
    def d(self):
        return self.d_S + sum(self.d_R_list)

    def to_dict(self):
        return {
            "n_S": self.n_S, "n_R": self.n_R if np.isscalar(self.n_R) else list(self.n_R),
            "d_S": self.d_S, "d_R": self.d_R if np.isscalar(self.d_R) else list(self.d_R),
            "K_true": self.K_true, "noise_sigma": self.noise_sigma,
            "seed": self.seed, "with_target": self.with_target,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d)
        except TypeError as exc:
            raise FormatError(f"bad SynthSpec: {exc}") from None


@dataclass
class GenTruth:
    """Ground truth kept for test oracles."""

    means: np.ndarray                 # K x d
    covs: np.ndarray                  # K x d x d
    s_component: np.ndarray           # per S row, component of its R_1 tuple
    r_component: list                 # per table, per R row
    fk_counts: list                   # per table, S rows referencing each R row
    coef: np.ndarray | None = None    # linear teacher for targets
    intercept: float = 0.0
    relations: dict = field(default_factory=dict)


def random_mixture(rng, K, d):
    """K means in [-5, 5]^d and SPD covariances A A^T + I with unit mean variance."""
    means = rng.uniform(-5.0, 5.0, size=(K, d))
    covs = np.empty((K, d, d))
    for k in range(K):
        a = rng.standard_normal((d, d))
        c = a @ a.T + np.eye(d)
        covs[k] = c * (d / np.trace(c))
    return means, covs


def _assign_fks(rng, n_s, n_r):
    """Every R ordinal once, the rest uniform, then shuffled."""
    idx = np.concatenate([np.arange(n_r), rng.integers(0, n_r, n_s - n_r)])
    rng.shuffle(idx)
    return idx


def _conditional_sample(rng, mean, cov, given, s_dim, r_slice):
    """Draw the first ``s_dim`` coordinates given the ``r_slice`` ones."""
    mu_s, mu_r = mean[:s_dim], mean[r_slice]
    c_ss = cov[:s_dim, :s_dim]
    c_sr = cov[:s_dim, r_slice]
    c_rr = cov[r_slice, r_slice]
    gain = np.linalg.solve(c_rr, c_sr.T).T
    cond_cov = c_ss - gain @ c_sr.T
    chol = np.linalg.cholesky(cond_cov + 1e-12 * np.eye(s_dim))
    m = mu_s + (given - mu_r) @ gain.T
    return m + rng.standard_normal(m.shape) @ chol.T


def _generate(spec, table_names, fk_names):
    rng = np.random.default_rng(spec.seed)
    d_r = spec.d_R_list
    n_r = spec.n_R_list
    offs = np.concatenate([[spec.d_S], spec.d_S + np.cumsum(d_r)]).astype(int)
    means, covs = random_mixture(rng, spec.K_true, spec.d)

    tables, r_comp, r_keys = [], [], []
    for i, (n, d) in enumerate(zip(n_r, d_r)):
        sl = slice(offs[i], offs[i] + d)
        z = rng.integers(0, spec.K_true, n)
        x = np.empty((n, d))
        for k in range(spec.K_true):
            m = z == k
            chol = np.linalg.cholesky(covs[k][sl, sl])
            x[m] = means[k][sl] + rng.standard_normal((m.sum(), d)) @ chol.T
        tables.append(x)
        r_comp.append(z)
        r_keys.append(rng.permutation(n).astype(np.uint64) + np.uint64(10**6 * (i + 1)))

    fk_idx = [_assign_fks(rng, spec.n_S, n) for n in n_r]
    s_comp = r_comp[0][fk_idx[0]]
    sl0 = slice(offs[0], offs[1])
    x_s = np.empty((spec.n_S, spec.d_S))
    for k in range(spec.K_true):
        m = s_comp == k
        x_s[m] = _conditional_sample(rng, means[k], covs[k], tables[0][fk_idx[0][m]], spec.d_S, sl0)

    if spec.noise_sigma > 0:
        x_s += spec.noise_sigma * rng.standard_normal(x_s.shape)
        for x in tables:
            x += spec.noise_sigma * rng.standard_normal(x.shape)

    s_keys = rng.permutation(spec.n_S).astype(np.uint64) + np.uint64(1)
    targets = coef = None
    intercept = 0.0
    if spec.with_target:
        coef = rng.uniform(-1.0, 1.0, spec.d)
        intercept = float(rng.uniform(-1.0, 1.0))
        joined = np.hstack([x_s] + [t[f] for t, f in zip(tables, fk_idx)])
        targets = joined @ coef + intercept + spec.noise_sigma * rng.standard_normal(spec.n_S)

    truth = GenTruth(
        means=means, covs=covs, s_component=s_comp, r_component=r_comp,
        fk_counts=[np.bincount(f, minlength=n) for f, n in zip(fk_idx, n_r)],
        coef=coef, intercept=intercept,
    )
    s_batch = Batch.from_arrays(
        s_keys, x_s, {fk: r_keys[i][fk_idx[i]] for i, fk in enumerate(fk_names)}, targets
    )
    r_batches = [Batch.from_arrays(k, x) for k, x in zip(r_keys, tables)]
    return s_batch, r_batches, truth


def _write(spec, catalog, s_name, table_names, fk_names, page_size_rows, block_size_pages,
           join_name):
    s_batch, r_batches, truth = _generate(spec, table_names, fk_names)
    handles = []
    for t, b, d in zip(table_names, r_batches, spec.d_R_list):
        schema = Schema.build("rid", [f"{t.lower()}{j}" for j in range(d)])
        handles.append(append_batch(catalog.create(t, schema, page_size_rows), b))
    s_schema = Schema.build(
        "sid", [f"s{j}" for j in range(spec.d_S)], dict(zip(fk_names, table_names)),
        target="y" if spec.with_target else None,
    )
    s = append_batch(catalog.create(s_name, s_schema, page_size_rows), s_batch)
    join = JoinSpec(s_name, table_names, dict(zip(fk_names, table_names)), block_size_pages)
    catalog.add_join(join_name, join)
    truth.relations = {"S": s_name, "R": list(table_names), "join": join_name}
    return s, handles, truth


def gen_binary(spec, catalog, s_name="S", r_name="R", page_size_rows=DEFAULT_PAGE_ROWS,
               block_size_pages=DEFAULT_BLOCK_PAGES, join_name="default"):
    """Write S and R for a binary join; returns ``(S, R, truth)``."""
    if spec.q != 1:
        raise SchemaError("gen_binary needs a single attribute table; use gen_multiway")
    s, (r,), truth = _write(spec, catalog, s_name, [r_name], ["fk"], page_size_rows,
                            block_size_pages, join_name)
    return s, r, truth


def gen_multiway(spec, catalog, s_name="S", r_prefix="R", page_size_rows=DEFAULT_PAGE_ROWS,
                 block_size_pages=DEFAULT_BLOCK_PAGES, join_name="default"):
    """Write S and R_1..R_q; returns ``(S, [R_1, ..., R_q], truth)``."""
    if spec.q < 2:
        raise SchemaError("gen_multiway needs q >= 2 attribute tables")
    names = [f"{r_prefix}{i + 1}" for i in range(spec.q)]
    fks = [f"fk{i + 1}" for i in range(spec.q)]
    return _write(spec, catalog, s_name, names, fks, page_size_rows, block_size_pages,
                  join_name)


# ---------------------------------------------------------------------------
# CSV


def _parse_key(text, line, col):
    try:
        v = int(text)
    except ValueError:
        raise FormatError(f"column {col!r}: {text!r} is not an integer key", line) from None
    if v < 0 or v >= 2**64:
        raise FormatError(f"column {col!r}: key {v} out of range", line)
    return v


def _parse_float(text, line, col):
    try:
        return float(text)
    except ValueError:
        raise FormatError(f"column {col!r}: {text!r} is not numeric", line) from None


def import_csv(path, schema, catalog, name, delimiter=",", one_hot=(),
               page_size_rows=DEFAULT_PAGE_ROWS, header=True):
    """Load a CSV into a new relation.

    Without a ``header`` row the columns are taken to be the schema's names
    followed by the ``one_hot`` columns, in that order.

    Columns listed in ``one_hot`` are categorical in the file and become one
    indicator feature per distinct value (``col=value``, sorted), appended
    after the schema's own features.  Returns the relation handle.
    """
    one_hot = list(one_hot)
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh, delimiter=delimiter)
            if header:
                header = next(reader, None)
                if header is None:
                    raise FormatError("empty file", 1)
                header = [h.strip() for h in header]
            else:
                header = list(schema.names) + one_hot
            expected = set(schema.names) | set(one_hot)
            if set(header) != expected or len(header) != len(expected):
                raise FormatError(
                    f"header {header} does not match columns {sorted(expected)}", 1)
            pos = {h: i for i, h in enumerate(header)}
            keys, feats, fks, targets, cats = [], [], {n: [] for n in schema.fk_names}, [], []
            for row in reader:
                line = reader.line_num
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) != len(header):
                    raise FormatError(f"expected {len(header)} fields, got {len(row)}", line)
                row = [c.strip() for c in row]
                keys.append(_parse_key(row[pos[schema.key_name]], line, schema.key_name))
                feats.append([_parse_float(row[pos[f]], line, f) for f in schema.feature_names])
                for fk in schema.fk_names:
                    fks[fk].append(_parse_key(row[pos[fk]], line, fk))
                if schema.target_name is not None:
                    targets.append(_parse_float(row[pos[schema.target_name]], line,
                                                schema.target_name))
                cats.append([row[pos[c]] for c in one_hot])
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from None

    features = np.array(feats, dtype=np.float64).reshape(len(keys), schema.n_features)
    if one_hot:
        cols = list(schema.columns)
        blocks = []
        for j, c in enumerate(one_hot):
            vals = np.array([r[j] for r in cats], dtype=object)
            levels = sorted(set(vals.tolist()))
            blocks.append((vals[:, None] == np.array(levels, dtype=object)[None, :]).astype(float))
            cols += [Column(f"{c}={v}", FEATURE) for v in levels]
        schema = Schema(tuple(_reorder(cols)))
        features = np.hstack([features] + blocks)
    handle = catalog.create(name, schema, page_size_rows)
    if keys:
        batch = Batch.from_arrays(
            np.array(keys, dtype=np.uint64), features,
            {k: np.array(v, dtype=np.uint64) for k, v in fks.items()},
            np.array(targets) if schema.target_name is not None else None,
        )
        append_batch(handle, batch)
    return handle


def _reorder(cols):
    """Key, target, features, foreign keys: the order ``Batch`` encoding expects."""
    order = {KEY: 0, TARGET: 1, FEATURE: 2, FOREIGN_KEY: 3}
    return sorted(cols, key=lambda c: order[c.kind])


def export_csv(handle, path, delimiter=","):
    """Write a relation as headered CSV in schema column order."""
    b = read_all(handle)
    schema = handle.schema
    fi = {n: j for j, n in enumerate(schema.feature_names)}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(schema.names)
        for r in range(len(b)):
            out = []
            for c in schema.columns:
                if c.kind == KEY:
                    out.append(int(b.keys[r]))
                elif c.kind == FOREIGN_KEY:
                    out.append(int(b.fks[c.name][r]))
                elif c.kind == TARGET:
                    out.append(repr(float(b.targets[r])))
                else:
                    out.append(repr(float(b.features[r, fi[c.name]])))
            w.writerow(out)
