"""Compare the compiled kernels with their NumPy fallbacks.

Checks that both backends agree on random inputs, then times each kernel.

    python3 benchmarks/bench_kernels.py [--repeats 20] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from sessalign import _kernels_py as py
from sessalign.kernels import compiled_backend as cy


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def ctc_case(rng, T, V, L):
    lp = np.ascontiguousarray(_log_softmax(rng.normal(size=(T, V))))
    target = rng.integers(1, V, size=L).astype(np.int64)
    return lp, target


def edit_case(rng, n, m, k=10):
    a = rng.integers(0, k, size=n).astype(np.int64)
    b = rng.integers(0, k, size=m).astype(np.int64)
    return a, b


def check_agreement(rng, n_cases=50) -> dict:
    worst_ll = worst_occ = 0.0
    edit_mismatch = 0
    for _ in range(n_cases):
        T = int(rng.integers(5, 60))
        lp, tgt = ctc_case(rng, T, int(rng.integers(3, 12)), int(rng.integers(1, max(2, T // 3))))
        ll_p, occ_p = py.ctc_forward_backward(lp, tgt)
        ll_c, occ_c = cy.ctc_forward_backward(lp, tgt)
        if np.isfinite(ll_p):
            worst_ll = max(worst_ll, abs(ll_p - ll_c))
            worst_occ = max(worst_occ, float(np.abs(occ_p - occ_c).max()))
        a, b = edit_case(rng, int(rng.integers(0, 30)), int(rng.integers(0, 30)))
        edit_mismatch += int(not np.array_equal(py.edit_table(a, b), cy.edit_table(a, b)))
    return {"ctc_loglik_maxdiff": worst_ll, "ctc_occupancy_maxdiff": worst_occ,
            "edit_table_mismatches": edit_mismatch}


def time_kernels(rng, repeats: int) -> list[dict]:
    rows = []
    for T, V, L in [(50, 9, 10), (200, 9, 40), (800, 41, 120)]:
        lp, tgt = ctc_case(rng, T, V, L)
        row = {"kernel": "ctc_forward_backward", "size": f"T={T} V={V} L={L}"}
        for name, mod in (("python", py), ("cython", cy)):
            row[name] = min(timeit.repeat(lambda: mod.ctc_forward_backward(lp, tgt),
                                          number=1, repeat=repeats))
        rows.append(row)
    for n in (20, 100, 400):
        a, b = edit_case(rng, n, n)
        row = {"kernel": "edit_table", "size": f"{n}x{n}"}
        for name, mod in (("python", py), ("cython", cy)):
            row[name] = min(timeit.repeat(lambda: mod.edit_table(a, b), number=1, repeat=repeats))
        rows.append(row)
    for r in rows:
        r["speedup"] = r["python"] / r["cython"]
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    if cy is None:
        print("compiled backend not built; run `pip install -e . --no-build-isolation`",
              file=sys.stderr)
        return 1
    rng = np.random.default_rng(args.seed)
    agree = check_agreement(rng)
    print("agreement:", ", ".join(f"{k}={v:.3g}" for k, v in agree.items()))
    rows = time_kernels(rng, args.repeats)
    print(f"{'kernel':<22}{'size':<18}{'python [ms]':>12}{'cython [ms]':>13}{'speedup':>9}")
    for r in rows:
        print(f"{r['kernel']:<22}{r['size']:<18}{1e3 * r['python']:>12.3f}"
              f"{1e3 * r['cython']:>13.3f}{r['speedup']:>8.1f}x")
    if args.json:
        with open(args.json, "w") as f:
            json.dump({"agreement": agree, "timings": rows}, f, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
