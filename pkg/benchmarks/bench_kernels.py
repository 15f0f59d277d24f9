"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeats 5]
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from rxnflow.chemgraph import fingerprint_inputs, parse_smiles
from rxnflow.kernels import backend_module


def best_of(fn, repeats):
    out = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out = min(out, time.perf_counter() - t0)
    return out


def field_case(rows, d=64, hidden=128, steps=100, seed=0):
    rng = np.random.default_rng(seed)
    w0z = rng.standard_normal((d, hidden)) * 0.1
    w1 = rng.standard_normal((hidden, hidden)) * 0.1
    b1 = rng.standard_normal(hidden) * 0.1
    w2 = rng.standard_normal((hidden, d)) * 0.1
    b2 = rng.standard_normal(d) * 0.1
    tbias = rng.standard_normal((2 * steps + 1, hidden)) * 0.1
    z0 = rng.standard_normal((rows, d)).astype(np.float32)
    gamma1 = 1.0 + 0.1 * rng.standard_normal((rows, d))
    beta = 0.1 * rng.standard_normal((rows, d))
    return (z0, tbias, w0z, w1, b1, w2, b2, gamma1, beta)


def main(argv=None):
    p = argparse.ArgumentParser()
    p.add_argument("--repeats", type=int, default=5)
    args = p.parse_args(argv)
    py, cy = backend_module("python"), backend_module("cython")
    results = []

    mols = [parse_smiles(s) for s in ("CC(=O)Oc1ccccc1C(=O)O", "CN(C)C=O", "C1CCOC1", "ClCCl", "c1ccc2ccccc2c1")]
    inputs = [fingerprint_inputs(m) for m in mols]

    def fps(mod):
        return lambda: [mod.fingerprint_bits(*x, 2, 512) for x in inputs * 40]
    tp, tc = best_of(fps(py), args.repeats), best_of(fps(cy), args.repeats)
    results.append({"kernel": "fingerprint x200", "python_s": tp, "cython_s": tc, "speedup": tp / tc})

    for rows in (14, 140, 1400):
        case = field_case(rows)
        for scheme in ("heun", "rk4"):
            def run(mod):
                return lambda: mod.integrate_mlp(*case, scheme, 100, 10)
            tp, tc = best_of(run(py), args.repeats), best_of(run(cy), args.repeats)
            a = py.integrate_mlp(*case, scheme, 100, 10)[1]
            b = cy.integrate_mlp(*case, scheme, 100, 10)[1]
            results.append({"kernel": f"integrate {scheme} N=100 rows={rows}", "python_s": tp, "cython_s": tc,
                            "speedup": tp / tc, "max_abs_diff": float(np.abs(a - b).max())})
    for r in results:
        print(json.dumps(r))


if __name__ == "__main__":
    main()
