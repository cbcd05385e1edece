"""Differentiable trilinear point splatting with a neural pyramid decoder."""
import os

# the TBB layer is not available everywhere; OpenMP is
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"


def max_threads():
    import numba

    return numba.config.NUMBA_NUM_THREADS


def set_threads(n=None):
    """Set the numba thread count; BLAS is kept single-threaded.

    BLAS splits its sums differently per thread count, which would make
    results depend on it, so only the rasterizer kernels run in parallel.
    ``None`` falls back to ``TRIPS_THREADS`` and then to every available core.
    Returns the thread count in effect.
    """
    import numba
    from threadpoolctl import threadpool_limits

    if n is None:
        env = os.environ.get("TRIPS_THREADS")
        n = int(env) if env else max_threads()
    n = int(n)
    if n < 1:
        raise ValueError(f"thread count must be positive, got {n}")
    n = min(n, max_threads())
    numba.set_num_threads(n)
    threadpool_limits(1)
    return n


from .estimator import SplatRenderer  # noqa: E402
from .pipeline import ModelConfig, SplatModel  # noqa: E402
from .scene import Camera, EnvironmentMap, Frame, FrameSet, PointCloud  # noqa: E402

__all__ = [
    "Camera", "EnvironmentMap", "Frame", "FrameSet", "ModelConfig", "PointCloud",
    "SplatModel", "SplatRenderer", "max_threads", "set_threads",
]
