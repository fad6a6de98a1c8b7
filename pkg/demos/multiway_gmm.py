"""Mixture over a three-relation star join (S with two attribute tables).

    python3 demos/multiway_gmm.py
"""

import tempfile

from facml.bench import run_strategy
from facml.datagen import SynthSpec, gen_multiway
from facml.gmm import GmmConfig
from facml.relstore import Catalog
from facml.verify import verify_gmm


def main():
    cat = Catalog(tempfile.mkdtemp(prefix="facml_mw_"))
    gen_multiway(SynthSpec(n_S=100_000, n_R=[100, 10], d_S=5, d_R=[15, 5], K_true=4), cat)
    spec = cat.join()
    print("attribute tables:", spec.attribute_tables)
    cfg = GmmConfig(K=4, max_iters=5, tol=-1.0)
    run_strategy("gmm", "f", cat, spec, GmmConfig(K=4, max_iters=1))
    for s in "msf":
        rec = run_strategy("gmm", s, cat, spec, cfg)[2]
        print(f"{rec.strategy}: {rec.seconds:.3f}s  loglik {rec.final:.4f}")
    rep = verify_gmm(cat, spec, cfg)
    print(f"max relative difference vs M: {rep['max_rel_diff']:.1e}")


if __name__ == "__main__":
    main()
