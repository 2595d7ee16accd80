"""Measured mixed-precision error against the analytic bound on Gaussian data."""

import numpy as np

from resq.projection import CalibStats, accumulate, build_resq_basis, mixed_fake_quant, theorem1_bound
from resq.quant import PER_TENSOR, QuantConfig


def main(trials=100, n=256, d=64, r=8):
    cfg = QuantConfig(4, symmetric=True, granularity=PER_TENSOR)
    rows = []
    for t in range(trials):
        x = np.random.default_rng(t).standard_normal((n, d))
        b = build_resq_basis(accumulate(CalibStats(d), x), r, seed=t)
        rows.append((np.linalg.norm(x @ b.u - mixed_fake_quant(x, b, 4, 8, cfg)), theorem1_bound(x, b, 4, 8)))
    m, bnd = np.array(rows).T
    print(f"trials {trials}: mean measured {m.mean():.3f}, mean bound {bnd.mean():.3f}")
    print(f"ratio measured/bound: min {np.min(m / bnd):.3f} max {np.max(m / bnd):.3f}")
    print(f"within bound: {np.sum(m <= bnd)}/{trials}")


if __name__ == "__main__":
    main()
