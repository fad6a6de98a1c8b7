"""Where streaming the join beats materializing it, and how much arithmetic F saves.

    python3 demos/cost_model.py
"""

from fractions import Fraction

from facml.bench import CostModelInputs, io_cost_model, saving_rate


def main():
    S, R, T, it = Fraction(10_000), Fraction(100), Fraction(10_000), 10
    thr = io_cost_model(CostModelInputs(S, R, T, 1, it))["crossover_block_size"]
    print(f"|S|={S} |R|={R} |T|={T} pages, {it} iterations: S beats M for B > {float(thr):.1f}")
    for B in (1, 10, 50, 100, 200):
        out = io_cost_model(CostModelInputs(S, R, T, Fraction(B), it))
        print(f"  B={B:4d}  M={float(out['m_cost']):>12,.0f}  S={float(out['s_cost']):>12,.0f}")

    print("saving rate of the factorized covariance pass (d_S=5):")
    for d_r in (1, 5, 15, 40):
        row = [saving_rate(CostModelInputs(1, 1, 1, 1, 1, n_S=rr, n_R=1, d_S=5, d_R=d_r))
               for rr in (1, 10, 100, 1000)]
        print(f"  d_R={d_r:2d}  rr=1,10,100,1000 -> " + "  ".join(f"{v:.3f}" for v in row))


if __name__ == "__main__":
    main()
