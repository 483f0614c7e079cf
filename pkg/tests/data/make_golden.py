"""Regenerate golden_logits.npy with plain-Python loops (independent of shedlab.engine)."""

from pathlib import Path

import numpy as np


def main():
    rng = np.random.Generator(np.random.PCG64(1234))
    w1 = rng.standard_normal((4, 5))
    b1 = rng.standard_normal(4)
    w2 = rng.standard_normal((3, 4))
    b2 = rng.standard_normal(3)
    x = rng.standard_normal((6, 5))
    out = np.zeros((6, 3))
    for n in range(6):
        h = [max(0.0, sum(w1[j, i] * x[n, i] for i in range(5)) + b1[j]) for j in range(4)]
        for k in range(3):
            out[n, k] = sum(w2[k, j] * h[j] for j in range(4)) + b2[k]
    np.save(Path(__file__).with_name("golden_logits.npy"), out)


if __name__ == "__main__":
    main()
