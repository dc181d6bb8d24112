"""PreMixer: MLP-only pre-training plus an MLP-Mixer forecaster for
large sensor-network traffic forecasting, with hand-derived gradients.
"""

import os

# Must run before numpy loads BLAS.
_threads = os.environ.get("PREMIXER_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

from premixer.errors import (  # noqa: E402
    CheckpointError,
    ConfigError,
    DataError,
    FormatError,
    NumericError,
    PremixerError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "FormatError",
    "NumericError",
    "PremixerError",
    "ShapeError",
    "__version__",
]
