"""
Version has unique source in pyproject.toml.
importlib fetches version from distribution metadata files
(in dist-info or egg-info dirs).
"""

from importlib import metadata

try:
    __version__ = metadata.version("pointshape")
except metadata.PackageNotFoundError:  # running from a source checkout
    __version__ = "0.0.0"

DEFAULT_POINTS = 512
DEFAULT_EXACT_CAP = 512
DEFAULT_ROTATION_FEATURES = 256
DEFAULT_SIGNATURE_FEATURES = 1024
DEFAULT_LOSS_WEIGHTS = (1.0, 1.0, 10.0)
DEFAULT_SPLIT = (0.70, 0.15, 0.15)
DEFAULT_SYNTH_SIZES = (50, 100, 200, 400, 600, 1000)
THREADS_ENV_VAR = "PSHAPE_THREADS"
