"""Keypoint-driven Gaussian hand avatars: kinematics, skinning, splatting, shadows."""
import numba as _numba

# TBB in many distro images is too old for numba; prefer OpenMP, then workqueue.
_numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

__version__ = "0.1.0"
