"""MLP regression over a star join: losses, field reads and timings per strategy.

    python3 demos/nn_strategies.py [batch|minibatch|sgd]
"""

import sys
import tempfile

from facml.bench import run_strategy
from facml.datagen import SynthSpec, gen_binary
from facml.nn import NnConfig
from facml.relstore import Catalog


def main(mode="batch"):
    cat = Catalog(tempfile.mkdtemp(prefix="facml_nn_"))
    gen_binary(SynthSpec(n_S=100_000, n_R=100, d_S=5, d_R=15, seed=1, with_target=True), cat)
    spec = cat.join()
    cfg = NnConfig(epochs=5, hidden=(50,), lr=0.01, batch_mode=mode, batch_groups=8, seed=3)

    run_strategy("nn", "f", cat, spec, NnConfig(epochs=1, hidden=(50,)))
    for s in "msf":
        _, trace, rec = run_strategy("nn", s, cat, spec, cfg)
        losses = " ".join(f"{v:.5f}" for v in trace.losses)
        print(f"{rec.strategy}: {rec.seconds:.3f}s  field reads/epoch "
              f"{trace.epochs[0]['field_reads']:,}  losses {losses}")


if __name__ == "__main__":
    main(*sys.argv[1:2])
