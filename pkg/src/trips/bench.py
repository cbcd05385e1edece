"""Stage timing of a full render and helpers for the scaling experiments."""
from __future__ import annotations

import numpy as np

from .pipeline import ModelConfig, SplatModel
from .scene import Camera, PointCloud

STAGE_KEYS = ("count_alloc", "splat", "sort_blend", "ms_raster", "ms_net", "ms_tonemap")
WARMUP_RUNS = 3


def benchmark_render(model: SplatModel, camera: Camera, repetitions=5, warmup=WARMUP_RUNS):
    """Median stage times (ms) over ``repetitions`` renders after ``warmup`` discarded ones.

    Keys: count_alloc, splat, sort_blend (rasterizer internals), ms_raster,
    ms_net (decoder), ms_tonemap (shading and tone mapping), total, plus the
    fragment statistics of the last render.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be positive")
    for _ in range(warmup):
        model.render(camera=camera)
    samples = {k: [] for k in STAGE_KEYS}
    cache = None
    for _ in range(repetitions):
        _, cache = model.render(camera=camera)
        for k in STAGE_KEYS:
            samples[k].append(cache.timings[k])
    out = {k: float(np.median(v)) for k, v in samples.items()}
    totals = [sum(samples[k][i] for k in ("ms_raster", "ms_net", "ms_tonemap")) for i in range(repetitions)]
    out["total"] = float(np.median(totals))
    out.update(cache.raster.fragment_stats())
    out["n_points"] = model.n_points
    out["n_layers"] = model.config.n_layers
    return out


def compare_render(models, camera: Camera, repetitions=9, warmup=WARMUP_RUNS):
    """Median total frame time (ms) per model, with renders interleaved.

    Alternating the models within each repetition spreads slow drifts in
    machine speed evenly over them.
    """
    for m in models:
        for _ in range(warmup):
            m.render(camera=camera)
    totals = [[] for _ in models]
    for r in range(repetitions):
        order = range(len(models)) if r % 2 == 0 else reversed(range(len(models)))
        for k in order:
            _, cache = models[k].render(camera=camera)
            totals[k].append(sum(cache.timings[s] for s in ("ms_raster", "ms_net", "ms_tonemap")))
    return [float(np.median(t)) for t in totals]


def benchmark_raster(cloud: PointCloud, camera: Camera, config: ModelConfig | None = None,
                     repetitions=5, warmup=WARMUP_RUNS):
    """Median rasterization time (ms) without the decoder."""
    import time

    from .raster import rasterize_forward

    config = config or ModelConfig(n_features=cloud.n_features)
    for _ in range(warmup):
        rasterize_forward(cloud, camera, config.raster)
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        rasterize_forward(cloud, camera, config.raster)
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def compare_raster(clouds, camera: Camera, repetitions=7, warmup=WARMUP_RUNS):
    """Median rasterization time (ms) per cloud, with the clouds timed in rotation.

    Rotating keeps slow drifts in machine load from landing on a single cloud.
    """
    import time

    from .raster import rasterize_forward

    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    configs = [ModelConfig(n_features=c.n_features).raster for c in clouds]
    for cloud, cfg in zip(clouds, configs):
        for _ in range(warmup):
            rasterize_forward(cloud, camera, cfg)
    times = [[] for _ in clouds]
    for r in range(repetitions):
        order = range(len(clouds)) if r % 2 == 0 else reversed(range(len(clouds)))
        for i in order:
            t0 = time.perf_counter()
            rasterize_forward(clouds[i], camera, configs[i])
            times[i].append((time.perf_counter() - t0) * 1e3)
    return [float(np.median(t)) for t in times]


def linear_fit_residuals(x, y):
    """Least-squares line through ``(x, y)``; returns (slope, intercept, relative residuals)."""
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    return float(slope), float(intercept), (y - pred) / pred


def format_table(rows, columns=None):
    """CSV text for a list of result dicts."""
    columns = columns or list(rows[0])
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join(f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in columns))
    return "\n".join(lines) + "\n"
