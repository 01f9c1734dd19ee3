"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--n 200000] [--repeat 7]

Part 1 times each kernel from both tables in this process. Part 2 times a
full ``simulate_cohort`` run in two fresh interpreters, one with
``SRTKIT_DISABLE_NUMBA=1``, and checks that both produce the same cohort.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from srtkit import kernels

E2E = r"""
import hashlib, time
from srtkit import kernels
from srtkit.design import builtin_percs
from srtkit.simulator import make_profiles, percs_like_model, simulate_cohort
d, m = builtin_percs(), percs_like_model()
prof = make_profiles({"IN": N // 2, "US": N - N // 2})
h = kernels.hash_ids([p.learner_id for p in prof])
simulate_cohort(d, prof, m, 0, id_hashes=h)
best = float("inf")
for s in range(REPEAT):
    t = time.perf_counter()
    c = simulate_cohort(d, prof, m, s, id_hashes=h).cohort
    best = min(best, time.perf_counter() - t)
digest = hashlib.sha256(c.arms.tobytes() + c.activity.tobytes()).hexdigest()[:16]
print(kernels.BACKEND, best, digest)
"""


def kernel_inputs(n, rng):
    P, G, C = 3, 7, 2
    arms = rng.integers(0, G, (n, P))
    return {
        "substream_uniforms": (kernels.hash_ids([f"L{i}" for i in range(n)]),
                               kernels.seed_word(1, 2, 0)),
        "draw_arms": (rng.random(n), np.cumsum(np.full(7, 1 / 7))),
        "assemble_logits": (3, rng.integers(0, C, n), arms,
                            rng.integers(0, 2, n).astype(np.int8), rng.normal(size=(P + 1, C)),
                            rng.normal(size=(P, C)), rng.normal(size=(P, G, C)),
                            rng.normal(size=(P, G, C)), rng.normal(size=(P, P + 1, G, C))),
        "bernoulli": (rng.random(n), rng.random(n)),
        "cell_counts": (rng.integers(0, 14, n), rng.integers(0, 2, n), 14),
    }


def bench(fn, args, repeat):
    fn(*args)  # compile / warm caches
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--skip-e2e", action="store_true")
    a = ap.parse_args()

    inputs = kernel_inputs(a.n, np.random.default_rng(0))
    print(f"kernels, n={a.n}, best of {a.repeat} (ms)")
    print(f"{'kernel':<20}{'numpy':>10}{'numba':>10}{'speedup':>10}  identical")
    for name, args in inputs.items():
        t_np = bench(kernels.NUMPY_KERNELS[name], args, a.repeat)
        if kernels.NUMBA_KERNELS:
            t_nb = bench(kernels.NUMBA_KERNELS[name], args, a.repeat)
            same = np.array_equal(kernels.NUMPY_KERNELS[name](*args),
                                  kernels.NUMBA_KERNELS[name](*args))
            print(f"{name:<20}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>9.1f}x  {same}")
        else:
            print(f"{name:<20}{t_np * 1e3:>10.2f}{'n/a':>10}")

    if a.skip_e2e:
        return
    print(f"\nsimulate_cohort, PERCS, n={a.n}, best of {a.repeat} (s)")
    code = E2E.replace("N //", f"{a.n} //").replace("N -", f"{a.n} -").replace(
        "REPEAT", str(a.repeat))
    rows = []
    for flag in ("0", "1"):
        env = dict(os.environ, SRTKIT_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", code], env=env, check=True,
                             capture_output=True, text=True).stdout.split()
        rows.append(out)
        print(f"{out[0]:<8}{float(out[1]):>10.3f}  digest {out[2]}")
    if len(rows) == 2:
        print("outputs identical:", rows[0][2] == rows[1][2])


if __name__ == "__main__":
    main()
