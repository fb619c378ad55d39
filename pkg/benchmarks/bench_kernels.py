"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel is called once untimed (JIT compilation), then timed ``repeat``
times; the best wall time is reported.  Outputs of the two paths are checked
for agreement before timing.
"""
import argparse
import time

import numpy as np

from drive2vec import _kernels as K
from drive2vec import synth


def best_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases():
    rng = np.random.default_rng(0)
    brake = rng.random(9000) * 100
    scores = rng.integers(0, 50, 20000).astype(float)
    X = rng.normal(size=(1030, 8))
    D2 = ((X[:, None] - X[None]) ** 2).sum(-1)
    P = rng.random((1030, 1030))
    P = P + P.T
    np.fill_diagonal(P, 0)
    P /= P.sum()
    Y = rng.normal(size=(1030, 2))
    cfg = synth.SynthConfig(n_drivers=2, sessions_per_driver=1, duration_s=900.0)
    prof = synth.make_profile(cfg, 0)

    def session(kernel):
        def run():
            saved = K.simulate_vehicle
            K.simulate_vehicle = kernel
            try:
                return synth.generate_session(prof, cfg, 0)[0].values
            finally:
                K.simulate_vehicle = saved
        return run

    return [
        ("sliding_range (9000 samples, w=4)", lambda k: (lambda: k["sliding_range"](brake, 4))),
        ("average_ranks (20000 ties)", lambda k: (lambda: k["average_ranks"](scores))),
        ("perplexity_search (1030 points)", lambda k: (lambda: k["perplexity_search"](D2, np.log(30.0), 1e-5, 200))),
        ("tsne_kl_grad (1030 points)", lambda k: (lambda: k["tsne_kl_grad"](P, Y, 1.0))),
        ("simulate 15 min session", lambda k: session(k["simulate_vehicle"])),
    ]


def first(x):
    return x[0] if isinstance(x, tuple) else x


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not K.HAS_NUMBA:
        raise SystemExit("numba unavailable or disabled; nothing to compare")
    print(f"{'kernel':38s} {'numpy s':>10s} {'numba s':>10s} {'speedup':>8s}")
    for name, make in cases():
        fast, slow = make(K.NUMBA_KERNELS), make(K.NUMPY_KERNELS)
        np.testing.assert_allclose(first(fast()), first(slow()), rtol=1e-9, atol=1e-9)
        t_np, t_nb = best_time(slow, args.repeat), best_time(fast, args.repeat)
        print(f"{name:38s} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
