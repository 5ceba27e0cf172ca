"""Time the numba-compiled grid kernels against their numpy versions.

    python3 benchmarks/bench_kernels.py [--grids 16 32 64] [--repeat 5]

Also times one full forward solve in a subprocess with and without
``DILO_DISABLE_NUMBA=1`` so the switch itself is exercised.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from dilo.physics._kernels import JIT_KERNELS, NUMPY_KERNELS, diagonal, face_weights
from dilo.physics.data import blob_field

SOLVE_SNIPPET = (
    "import time, numpy as np;"
    "from dilo.physics import eit_solve, trig_patterns, blob_field;"
    "n={n}; s=blob_field(np.random.default_rng(0), n); p=trig_patterns(n);"
    "eit_solve(s, p); t=time.perf_counter();"
    "[eit_solve(s, p) for _ in range({k})];"
    "print((time.perf_counter()-t)/{k})"
)


def bench_grid(n: int, repeat: int) -> list[tuple[str, float, float]]:
    rng = np.random.default_rng(n)
    sigma = blob_field(rng, n)
    sx, sy, dxa, dxb, dya, dyb = face_weights(sigma)
    gc = 1.0 / (n * n)
    diag = diagonal(sx, sy, gc)
    u, w = rng.standard_normal((2, n, n))
    f = u - u.mean()
    cases = {
        "apply": lambda k: k(sx, sy, gc, u),
        "pcg": lambda k: k(sx, sy, gc, diag, f, 1e-12, 10 * n * n),
        "face_product": lambda k: k(dxa, dxb, dya, dyb, u, w),
    }
    rows = []
    for name, call in cases.items():
        jit, ref = JIT_KERNELS[name], NUMPY_KERNELS[name]
        call(jit)  # compile outside the timed region
        a, b = call(jit), call(ref)
        first = lambda r: r[0] if isinstance(r, tuple) else r  # noqa: E731
        assert np.allclose(first(a), first(b), rtol=1e-9, atol=1e-12), f"{name} kernels disagree at n={n}"
        loops = 20 if name == "pcg" else 200
        t_jit = min(timeit.repeat(lambda: call(jit), number=loops, repeat=repeat)) / loops
        t_np = min(timeit.repeat(lambda: call(ref), number=loops, repeat=repeat)) / loops
        rows.append((name, t_jit, t_np))
    return rows


def bench_solve(n: int, k: int = 5) -> tuple[float, float]:
    out = []
    for disable in ("0", "1"):
        env = dict(os.environ, DILO_DISABLE_NUMBA=disable)
        res = subprocess.run(
            [sys.executable, "-c", SOLVE_SNIPPET.format(n=n, k=k)], env=env, capture_output=True, text=True, check=True
        )
        out.append(float(res.stdout.strip()))
    return out[0], out[1]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grids", type=int, nargs="+", default=[16, 32, 64])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--no-solve", action="store_true", help="skip the subprocess solve timing")
    args = ap.parse_args(argv)

    print(f"{'grid':>5} {'kernel':>13} {'numba us':>10} {'numpy us':>10} {'speedup':>8}")
    for n in args.grids:
        for name, t_jit, t_np in bench_grid(n, args.repeat):
            print(f"{n:>5} {name:>13} {1e6 * t_jit:>10.1f} {1e6 * t_np:>10.1f} {t_np / t_jit:>8.2f}")
    if not args.no_solve:
        print(f"\n{'grid':>5} {'eit_solve numba ms':>19} {'numpy ms':>9}")
        for n in args.grids:
            a, b = bench_solve(n)
            print(f"{n:>5} {1e3 * a:>19.2f} {1e3 * b:>9.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
