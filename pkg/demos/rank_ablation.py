"""Rank sweep and per-site projection ablation on the toy decoder at 4 bits."""

import numpy as np

from resq.calib import collect
from resq.model import DecoderConfig, QuantMode, generate, init_toy_model
from resq.pipeline import build

SEEDS = (0, 1, 2)


def main():
    model = init_toy_model(DecoderConfig(), seed=0)
    calib = generate(model, 64, 128, seed=1)
    evals = generate(model, 16, 128, seed=2)
    bundle = collect(model, calib, n_samples=64, n_hessian=32, seed=0)
    mode = QuantMode(4, 4, 4)

    def ppl(**kw):
        v = [build(model, bundle, mode, seed=s, **kw).perplexity(evals) for s in SEEDS]
        return np.mean(v), np.std(v)

    for label, frac in (("d/16", 1 / 16), ("d/8", 1 / 8), ("d/4", 1 / 4)):
        print(f"rank {label:<5} ppl %.3f +- %.3f" % ppl(rank_frac=frac))
    for drop in ((), ("u_a",), ("u_d",), ("u_b", "u_c")):
        name = "+".join(drop) or "none"
        print(f"drop {name:<8} ppl %.3f +- %.3f" % ppl(drop=drop))


if __name__ == "__main__":
    main()
