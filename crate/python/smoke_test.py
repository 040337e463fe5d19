#!/usr/bin/env python3
"""Smoke test for the bitesim_py extension module.

Builds the cdylib with cargo, copies it next to this script under the
importable name, then exercises each binding once with known-answer checks.
Run from anywhere: `python3 python/smoke_test.py`.
"""

import math
import random
import shutil
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def build_and_import():
    subprocess.run(
        ["cargo", "build", "--release", "-p", "bitesim-py"], cwd=ROOT, check=True
    )
    built = ROOT / "target" / "release" / "libbitesim_py.so"
    dest = Path(__file__).resolve().parent / "bitesim_py.so"
    shutil.copyfile(built, dest)
    sys.path.insert(0, str(dest.parent))
    import bitesim_py

    return bitesim_py


def main():
    m = build_and_import()
    print(f"bitesim_py {m.__version__}")

    # A pure sinusoid has Hjorth complexity 1 regardless of frequency.
    sig = [math.sin(2 * math.pi * 10 * t / 1000.0) for t in range(4000)]
    _, mobility, complexity = m.hjorth(sig)
    assert abs(complexity - 1.0) < 0.02, complexity
    print(f"hjorth: sinusoid complexity {complexity:.4f}")

    # All AC energy of a 10 Hz tone lands in a band containing 10 Hz.
    low, high = m.band_energies(sig, 1000.0, [(5.0, 15.0), (100.0, 200.0)])
    assert low > 1e3 * max(high, 1e-12), (low, high)
    print(f"band_energies: in-band {low:.3f}, out-of-band {high:.3e}")

    # Registration recovers a known rigid motion despite 30% gross outliers.
    rng = random.Random(7)
    model = [[rng.uniform(-80, 80) for _ in range(3)] for _ in range(60)]
    s, c = math.sin(0.4), math.cos(0.4)
    world = []
    for i, (x, y, z) in enumerate(model):
        wx, wy, wz = c * x - s * y + 5.0, s * x + c * y - 12.0, z + 30.0
        if i % 3 == 0 and i < 60 * 0.9:
            wx, wy, wz = (rng.uniform(-250, 250) for _ in range(3))
        world.append([wx, wy, wz])
    r = m.register(model, world)
    t = r["translation_mm"]
    terr = math.dist(t, [5.0, -12.0, 30.0])
    assert r["converged"] and terr < 1.0, r
    print(f"register: translation error {terr:.4f} mm, {r['inlier_count']} inliers")

    # A static oracle episode ends with the utensil placed and retracted.
    summary = m.episode_summary("static", awareness="D", seed=3)
    assert summary["final_state"] == "Done", summary
    assert summary["max_force_n"] < 15.0, summary
    print(
        f"episode_summary: final state {summary['final_state']}, "
        f"max force {summary['max_force_n']:.2f} N"
    )

    print("smoke test OK")


if __name__ == "__main__":
    main()
