"""Quantization SNR of one activation matrix under each basis family.

Activations have a decaying spectrum plus four channels scaled by 20.
Low-precision groups use 4 bits, the high-precision group 8 bits.
"""

import numpy as np

from resq.linalg import random_orthogonal
from resq.projection import KINDS, CalibStats, accumulate, build_baseline_basis, mixed_fake_quant
from resq.quant import PER_TOKEN, QuantConfig, quant_snr

D, R, N = 64, 8, 512


def activations(seed, sample_seed):
    spec = 1.0 / np.arange(1, D + 1)
    x = np.random.default_rng(sample_seed).standard_normal((N, D)) * np.sqrt(spec * D / spec.sum())
    x = x @ random_orthogonal(D, seed).T
    x[:, [3, 17, 30, 50]] *= 20
    return x


def main():
    cfg = QuantConfig(4, symmetric=False, granularity=PER_TOKEN)
    res = {k: [] for k in KINDS}
    for seed in range(20):
        x, calib = activations(seed, 1000 + seed), activations(seed, 2000 + seed)
        stats = accumulate(CalibStats(D), calib)
        for k in KINDS:
            b = build_baseline_basis(k, stats, D, R, seed=seed)
            res[k].append(quant_snr(x @ b.u, mixed_fake_quant(x, b, 4, 8, cfg)))
    print(f"{'basis':<15}{'SNR dB':>8}{'std':>7}")
    for k, v in sorted(res.items(), key=lambda kv: -np.mean(kv[1])):
        print(f"{k:<15}{np.mean(v):8.2f}{np.std(v):7.2f}")


if __name__ == "__main__":
    main()
