"""Brute-force Hopf-Lax reference for h = p^2/2, P = 0, phi = cos(2 pi x).

    u(x, t) = min_y cos(2 pi y) + |x - y|^2 / (2 t)

The minimizer satisfies |x - y|^2/(2t) <= phi(x) - phi(y) <= 2, so the
search window y in [x - 2 sqrt(t), x + 2 sqrt(t)] is exhaustive.  Each point
scans 10^5 uniformly spaced candidates.  Independent of the package: numpy only.

    python3 scripts/hopf_lax_oracle.py --n-x 256 --n-t 128 --t 0.25 > configs/hopf_lax_oracle.csv
"""

import argparse
import sys

import numpy as np


def hopf_lax(x: np.ndarray, t: float, candidates: int = 100_000) -> np.ndarray:
    half = 2.0 * np.sqrt(t)
    offsets = np.linspace(-half, half, candidates)
    out = np.empty_like(x)
    for j, xj in enumerate(x):
        y = xj + offsets
        out[j] = np.min(np.cos(2 * np.pi * y) + (xj - y) ** 2 / (2 * t))
    return out


def main() -> None:
    p = argparse.ArgumentParser()
    p.add_argument("--n-x", type=int, default=256)
    p.add_argument("--n-t", type=int, default=128)
    p.add_argument("--t", type=float, default=0.25)
    p.add_argument("--candidates", type=int, default=100_000)
    a = p.parse_args()
    x = np.arange(a.n_x) / a.n_x
    u = hopf_lax(x, a.t, a.candidates)
    w = sys.stdout
    w.write("component,k,ix,t,x,value\n")
    for j in range(a.n_x):
        w.write(f"1,{a.n_t},{j},{a.t:.17g},{x[j]:.17g},{u[j]:.17g}\n")


if __name__ == "__main__":
    main()
