#!/usr/bin/env python3
"""Writes kernel test vectors for `coarsefine kernel-verify`.

Pure-Python scalar loops, no numpy, so the expected values share no code
with the Rust implementation.

    python3 scripts/gen_kernel_fixtures.py [out_dir]
"""

import json
import math
import random
import sys
from pathlib import Path

DEFAULT_OUT = Path(__file__).resolve().parent.parent / "crates/core/fixtures/kernel"
ALPHAS = [0.0, 0.25, 0.3, 0.5, 0.75, 1.0]


def act(name, v):
    if name == "relu":
        return v if v > 0.0 else 0.0
    return v / (1.0 + math.exp(-v))


def fused(d, D, activation, w1, w2, x, zv, alpha):
    out = [0.0] * d
    # vanilla: sum over hidden units of phi(sum_r x[r] w1[r][i]) * w2[c][i]
    for i in range(D):
        pre = 0.0
        for r in range(d):
            pre += x[r] * w1[r][i]
        g = act(activation, pre)
        for c in range(d):
            out[c] += (1.0 - alpha) * g * w2[c][i]
    for z in zv:
        pre = 0.0
        for r in range(d):
            pre += x[r] * z[r]
        g = act(activation, pre)
        for c in range(d):
            out[c] += alpha * g * z[c]
    return out


def mat(rng, rows, cols, scale):
    return [[rng.gauss(0.0, scale) for _ in range(cols)] for _ in range(rows)]


def main():
    out_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else DEFAULT_OUT
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = random.Random(20240611)
    n = 0
    for activation in ("relu", "silu"):
        for alpha in ALPHAS:
            for _ in range(2):
                d = rng.randint(1, 8)
                D = rng.randint(1, 32)
                m = 0 if n % 5 == 4 else rng.randint(1, 6)
                w1 = mat(rng, d, D, 1.0 / math.sqrt(d))
                w2 = mat(rng, d, D, 1.0 / math.sqrt(D))
                x = [rng.gauss(0.0, 1.0) for _ in range(d)]
                zv = mat(rng, m, d, 1.0 / math.sqrt(d))
                fixture = {
                    "d": d,
                    "D": D,
                    "activation": activation,
                    "w1": w1,
                    "w2": w2,
                    "x": x,
                    "zv": zv,
                    "alpha": alpha,
                    "expected": fused(d, D, activation, w1, w2, x, zv, alpha),
                }
                path = out_dir / f"case_{n:03d}.json"
                path.write_text(json.dumps(fixture, indent=1) + "\n")
                n += 1
    print(f"wrote {n} fixtures to {out_dir}")


if __name__ == "__main__":
    main()
