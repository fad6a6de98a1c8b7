"""Train one mixture three ways over a generated star join and compare.

    python3 demos/binary_gmm.py [n_S] [n_R]
"""

import sys
import tempfile

from facml.bench import compare_report, run_strategy
from facml.datagen import SynthSpec, gen_binary
from facml.gmm import GmmConfig
from facml.relstore import Catalog
from facml.verify import verify_gmm


def main(n_s=50_000, n_r=50):
    cat = Catalog(tempfile.mkdtemp(prefix="facml_gmm_"))
    gen_binary(SynthSpec(n_S=n_s, n_R=n_r, d_S=5, d_R=15, K_true=3, seed=0), cat)
    spec = cat.join()
    cfg = GmmConfig(K=3, max_iters=10, tol=-1.0)

    # warm the compiled kernels so the first timing is not a compile
    run_strategy("gmm", "f", cat, spec, GmmConfig(K=3, max_iters=1))
    records = {}
    for s in "msf":
        _, trace, rec = run_strategy("gmm", s, cat, spec, cfg)
        records[s.upper()] = rec
        print(f"{rec.strategy}: {rec.seconds:.3f}s  final loglik {rec.final:.6f}  "
              f"mults {rec.counts['mults']:,}  pages read {rec.counts['pages_read']:,}")

    check = verify_gmm(cat, spec, GmmConfig(K=3, max_iters=10, tol=-1.0))
    rep = compare_report(records, check)
    print("speedups:", {k: round(v, 2) for k, v in rep["speedup"].items()})
    print(f"M/S/F agree to {check['max_rel_diff']:.1e} (pass={check['pass']})")


if __name__ == "__main__":
    main(*(int(a) for a in sys.argv[1:3]))
