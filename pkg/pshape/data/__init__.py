from pshape.data.io import load_cloud, normalize, resample, write_csv, write_ply
from pshape.data.manifest import (
    DatasetManifest,
    LoadedSample,
    Sample,
    load_samples,
    split,
)
from pshape.data.phantom import PhantomSpec, make_phantom_dataset, recorded_caps

__all__ = [
    "DatasetManifest",
    "LoadedSample",
    "PhantomSpec",
    "Sample",
    "load_cloud",
    "load_samples",
    "make_phantom_dataset",
    "normalize",
    "recorded_caps",
    "resample",
    "split",
    "write_csv",
    "write_ply",
]
