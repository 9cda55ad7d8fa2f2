"""Compare the compiled compositing kernel against the numpy fallback.

    python3 benchmarks/bench_raster.py [--size 160] [--repeats 5] [--gaussians-per-part 48]

Both kernels are fed identical tile lists; the script checks that their outputs
agree before timing them.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from nestfield import raster
from nestfield.raster import _fallback, composite_weights
from nestfield.scene import SyntheticSceneSpec, generate_synthetic, orbit_cameras


def _time(fn, repeats: int) -> float:
    fn()  # warmup
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=160)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--gaussians-per-part", type=int, default=48)
    args = ap.parse_args()

    scene, _ = generate_synthetic(SyntheticSceneSpec(2, 2, 2, args.gaussians_per_part, 2.5, 0))
    cam = orbit_cameras(scene, 1, args.size, args.size, 65.0, 2.0)[0]
    print(f"{len(scene)} Gaussians, {args.size}x{args.size} pixels")

    backends = {"python": _fallback}
    try:
        from nestfield.raster import _composite

        backends["compiled"] = _composite
    except ImportError:
        print("compiled extension not built; timing the fallback only")

    ref = None
    times = {}
    for name, kernel in backends.items():
        w = composite_weights(scene, cam, backend=kernel)
        if ref is None:
            ref = w
        else:
            assert np.array_equal(ref.indptr, w.indptr) and np.array_equal(ref.indices, w.indices)
            assert np.allclose(ref.weights, w.weights, atol=1e-12)
        times[name] = _time(lambda: composite_weights(scene, cam, backend=kernel), args.repeats)
        print(f"{name:>9}: {times[name] * 1e3:8.2f} ms per view (median of {args.repeats})")
    if len(times) == 2:
        print(f"  speedup: {times['python'] / times['compiled']:.1f}x (default backend: {raster.KERNEL_BACKEND})")


if __name__ == "__main__":
    main()
