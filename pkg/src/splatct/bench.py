"""Rendering throughput benchmark and backend comparison.

``python3 -m splatct.bench`` primes a scene from the synthetic phantom,
renders it from an orbit camera and reports per-stage timings, frames per
second across thread counts, and the compiled-versus-Python backend ratio
(checking on the way that both backends produce bit-identical output in
double precision).

The defaults (100k Gaussians at 512x512) match the workload the package's
throughput targets are stated against.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import dataclass, replace

import numpy as np

from .camera import Camera, make_camera
from .phantom import make_phantom
from .priming import PrimingConfig, Scene, agp_initialize
from .raster import (
    RenderConfig,
    RenderStats,
    active_backend,
    bin_splats,
    composite_splats,
    prepare_scene,
    project_scene,
    render,
    select_rows,
)
from .volume import build_input_channels, consolidate_labels, load_preset, normalize_hu


def benchmark_scene(n_gaussians: int = 100_000, dims=(88, 88, 88)) -> Scene:
    """Phantom-primed scene truncated to exactly ``n_gaussians`` rows.

    The phantom dims must put at least ``n_gaussians`` voxels in the
    foreground; 88^3 primes about 134k.
    """
    vol, labels = make_phantom(dims)
    groups = consolidate_labels(labels)
    in6 = build_input_channels(normalize_hu(vol, labels), groups,
                               load_preset("seen"), vol)
    scene = agp_initialize(in6, groups, PrimingConfig(stride=1))
    if len(scene) < n_gaussians:
        raise ValueError(f"phantom dims {dims} prime only {len(scene)} "
                         f"Gaussians, need {n_gaussians}")
    return scene.take(np.arange(n_gaussians))


def benchmark_camera(scene: Scene, width: int = 512, height: int = 512) -> Camera:
    """Orbit camera framing the whole scene."""
    lo = scene.mu_p.min(axis=0)
    hi = scene.mu_p.max(axis=0)
    center = (lo + hi) / 2.0
    radius = float(np.linalg.norm(hi - lo)) / 2.0
    fov_y = 0.8
    distance = 1.2 * radius / np.tan(fov_y / 2.0)
    position = center + distance * np.array([0.45, 0.35, 0.82])
    return make_camera(position, center, fov_y=fov_y, width=width, height=height)


@dataclass
class StageTimes:
    """One frame's wall-clock split across the pipeline stages, in seconds."""

    select: float
    project: float
    bin: float
    composite: float
    n_drawn: int
    n_entries: int

    @property
    def total(self) -> float:
        return self.select + self.project + self.bin + self.composite


def time_stages(scene: Scene, camera: Camera, config: RenderConfig) -> StageTimes:
    """Time each pipeline stage of a single frame."""
    prep = prepare_scene(scene, config.w_mode)  # cached across frames
    stats = RenderStats()
    t0 = time.perf_counter()
    rows = select_rows(scene, prep, None, config, stats)
    t1 = time.perf_counter()
    splats = project_scene(scene, prep, rows, camera, config, stats)
    t2 = time.perf_counter()
    entries = bin_splats(splats, camera, config.tile_size)
    t3 = time.perf_counter()
    composite_splats(splats, entries, camera, config)
    t4 = time.perf_counter()
    return StageTimes(select=t1 - t0, project=t2 - t1, bin=t3 - t2,
                      composite=t4 - t3, n_drawn=len(splats),
                      n_entries=len(entries.entry_splat))


def time_render(scene: Scene, camera: Camera, config: RenderConfig,
                frames: int = 10, warmup: int = 1) -> float:
    """Median seconds per frame over ``frames`` renders."""
    for _ in range(warmup):
        render(scene, camera, config=config)
    times = []
    for _ in range(frames):
        t0 = time.perf_counter()
        render(scene, camera, config=config)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def thread_sweep(scene: Scene, camera: Camera, base: RenderConfig,
                 thread_counts, frames: int = 10):
    """[(threads, seconds per frame)] for each requested thread count."""
    out = []
    for threads in thread_counts:
        config = replace(base, threads=threads)
        out.append((threads, time_render(scene, camera, config, frames=frames)))
    return out


def backend_compare(n_gaussians: int = 2000, size: int = 128, frames: int = 3):
    """Compiled vs Python backend on a small frame.

    Returns (cython seconds, python seconds) and raises if the two double
    precision renders differ anywhere.
    """
    scene = benchmark_scene(n_gaussians, dims=(24, 24, 24))
    camera = benchmark_camera(scene, width=size, height=size)
    cy = RenderConfig(precision="f64", threads=1, backend="cython")
    py = RenderConfig(precision="f64", threads=1, backend="python")
    image_cy = render(scene, camera, config=cy)
    image_py = render(scene, camera, config=py)
    if not np.array_equal(image_cy, image_py):
        raise AssertionError("backends disagree in double precision")
    t_cy = time_render(scene, camera, cy, frames=frames)
    t_py = time_render(scene, camera, py, frames=1, warmup=0)
    return t_cy, t_py


def _parse_threads(text: str):
    counts = [int(t) for t in text.split(",") if t.strip()]
    if not counts or any(t < 1 for t in counts):
        raise argparse.ArgumentTypeError("thread counts must be positive")
    return counts


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="splatct.bench", description="splatct rendering benchmark")
    parser.add_argument("--gaussians", type=int, default=100_000)
    parser.add_argument("--size", type=int, default=512,
                        help="frame width and height (default 512)")
    parser.add_argument("--frames", type=int, default=10)
    parser.add_argument("--threads", type=_parse_threads, default=None,
                        help="comma-separated thread counts (default 1..cpu)")
    parser.add_argument("--precision", choices=("f32", "f64"), default="f32")
    parser.add_argument("--skip-python", action="store_true",
                        help="skip the slow pure-Python backend comparison")
    args = parser.parse_args(argv)

    cpus = os.cpu_count() or 1
    thread_counts = args.threads
    if thread_counts is None:
        thread_counts = sorted({1, 2, 4, 8, cpus} & set(range(1, cpus + 1)))

    print(f"backend: {active_backend()}, {cpus} cpu(s) visible")
    print(f"scene: {args.gaussians} Gaussians (phantom priming), "
          f"{args.size}x{args.size}, {args.precision}")
    scene = benchmark_scene(args.gaussians)
    camera = benchmark_camera(scene, width=args.size, height=args.size)
    config = RenderConfig(precision=args.precision, threads=1)

    stages = time_stages(scene, camera, config)
    print(f"stage profile (1 thread): select {stages.select * 1e3:.1f} ms, "
          f"project {stages.project * 1e3:.1f} ms, "
          f"bin {stages.bin * 1e3:.1f} ms, "
          f"composite {stages.composite * 1e3:.1f} ms "
          f"({stages.n_drawn} splats drawn, {stages.n_entries} tile entries)")

    print(f"{'threads':>8} {'ms/frame':>10} {'fps':>8}")
    sweep = thread_sweep(scene, camera, config, thread_counts, frames=args.frames)
    for threads, seconds in sweep:
        print(f"{threads:>8} {seconds * 1e3:>10.1f} {1.0 / seconds:>8.2f}")
    if len(sweep) > 1:
        base = sweep[0][1]
        best_threads, best = min(sweep, key=lambda pair: pair[1])
        print(f"speedup {sweep[0][0]} -> {best_threads} threads: {base / best:.2f}x")

    if not args.skip_python:
        t_cy, t_py = backend_compare()
        print(f"backend comparison (2000 Gaussians, 128x128, f64): "
              f"cython {t_cy * 1e3:.1f} ms, python {t_py * 1e3:.1f} ms "
              f"({t_py / t_cy:.0f}x slower, output bit-identical)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
