"""Forward-render timing harness.

    python3 -m handsplat.bench --gaussians 60000 --size 256 --threads 1 4

Each thread count runs in a fresh interpreter with NUMBA_NUM_THREADS set,
since numba fixes its pool size at import.
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np
import torch

from .renderer import Camera, render_tensors


def random_scene(n: int, seed: int = 0):
    """``n`` small Gaussians filling a hand-sized box 0.45 m in front of the camera."""
    rng = np.random.default_rng(seed)
    pos = rng.uniform([-0.09, -0.09, 0.40], [0.09, 0.09, 0.50], (n, 3))
    return (torch.from_numpy(pos).float(), torch.from_numpy(rng.uniform(0, 1, (n, 3))).float(),
            torch.from_numpy(rng.uniform(0.3, 0.95, n)).float(),
            torch.from_numpy(rng.uniform(0.001, 0.003, n)).float())


def time_render(n: int, size: int, repeats: int = 5, seed: int = 0) -> dict:
    """Median wall time of a forward render, after one warm-up call."""
    scene = random_scene(n, seed)
    cam = Camera(fx=size * 1.2, fy=size * 1.2, cx=(size - 1) / 2, cy=(size - 1) / 2, width=size, height=size)
    with torch.no_grad():
        render_tensors(cam, *scene)
        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            render_tensors(cam, *scene)
            times.append(time.perf_counter() - start)
    return {"gaussians": n, "size": size, "median_s": float(np.median(times)), "min_s": float(min(times))}


def run_isolated(n: int, size: int, threads: int, repeats: int = 5) -> dict:
    """time_render in a subprocess with ``threads`` numba workers."""
    env = dict(os.environ, NUMBA_NUM_THREADS=str(threads))
    code = ("import json, handsplat.bench as b, handsplat.renderer as r;"
            f"used = r.set_threads({threads});"
            f"res = b.time_render({n}, {size}, {repeats}); res['threads'] = used;"
            "print(json.dumps(res))")
    proc = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    res = json.loads(proc.stdout.strip().splitlines()[-1])
    res["cpus"] = os.cpu_count()
    return res


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python3 -m handsplat.bench", description=__doc__.splitlines()[0])
    p.add_argument("--gaussians", type=int, default=60_000)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--threads", type=int, nargs="+", default=[1, 4])
    p.add_argument("--repeats", type=int, default=5)
    args = p.parse_args(argv)
    base = None
    for t in args.threads:
        res = run_isolated(args.gaussians, args.size, t, args.repeats)
        base = base or res["median_s"]
        print(f"threads {t} (numba pool {res['threads']}, {res['cpus']} cpus): "
              f"median {res['median_s'] * 1e3:.1f} ms, speedup {base / res['median_s']:.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
