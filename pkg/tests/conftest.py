import numpy as np
import pytest

from facml.datagen import SynthSpec, gen_binary, gen_multiway
from facml.relstore import Catalog


@pytest.fixture
def catalog(tmp_path):
    return Catalog(tmp_path / "cat")


def make_binary(root, n_S=600, n_R=12, d_S=2, d_R=3, seed=0, with_target=True,
                page_rows=64, block_pages=2, K_true=3):
    cat = Catalog(root)
    spec = SynthSpec(n_S=n_S, n_R=n_R, d_S=d_S, d_R=d_R, K_true=K_true, seed=seed,
                     with_target=with_target)
    s, r, truth = gen_binary(spec, cat, page_size_rows=page_rows, block_size_pages=block_pages)
    return cat, cat.join(), truth


def make_multiway(root, n_S=600, n_R=(12, 5), d_S=2, d_R=(3, 2), seed=0, with_target=True,
                  page_rows=64, block_pages=2, K_true=3):
    cat = Catalog(root)
    spec = SynthSpec(n_S=n_S, n_R=list(n_R), d_S=d_S, d_R=list(d_R), K_true=K_true, seed=seed,
                     with_target=with_target)
    gen_multiway(spec, cat, page_size_rows=page_rows, block_size_pages=block_pages)
    return cat, cat.join()


@pytest.fixture
def binary(tmp_path):
    return make_binary(tmp_path / "bin")


@pytest.fixture
def multiway(tmp_path):
    return make_multiway(tmp_path / "multi")


def brute_join(cat, spec):
    """In-memory nested-loop join in S storage order: (x, y, keys)."""
    from facml.relstore import read_all

    s = read_all(cat.open(spec.s))
    parts = [s.features]
    for table in spec.attribute_tables:
        r = read_all(cat.open(table))
        fk = s.fks[spec.fk_for(table)]
        rows = np.empty((len(s), r.features.shape[1]))
        for i, v in enumerate(fk):
            (j,) = np.nonzero(r.keys == v)[0]
            rows[i] = r.features[j]
        parts.append(rows)
    return np.hstack(parts), s.targets, s.keys
