"""Calibrate, quantize and evaluate the toy decoder with several bases.

Mirrors the CLI flow (toy -> calibrate -> quantize -> eval) in-process.
"""

import numpy as np

from resq.calib import collect
from resq.model import DecoderConfig, QuantMode, generate, init_toy_model, perplexity
from resq.pipeline import build


def main():
    model = init_toy_model(DecoderConfig(), seed=0)
    calib = generate(model, 64, 128, seed=1)
    evals = generate(model, 16, 128, seed=2)
    bundle = collect(model, calib, n_samples=64, n_hessian=32, seed=0)
    print(f"float ppl {perplexity(evals, model):.3f}")
    for bits in (4, 3):
        mode = QuantMode(bits, bits, bits)
        for kind in ("identity", "rotation-only", "outlier-linf", "resq"):
            ppl = [build(model, bundle, mode, kind=kind, seed=s).perplexity(evals) for s in range(3)]
            print(f"W{bits}A{bits}KV{bits} {kind:<14} ppl {np.mean(ppl):8.3f} +- {np.std(ppl):.3f}")


if __name__ == "__main__":
    main()
