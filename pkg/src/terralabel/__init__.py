"""terralabel: deterministic land-cover label synthesis.

Harmonizes coarse legacy land-cover labels with fine-resolution multispectral
scenes via agreement filtering, trains per-scene random forests on stratified
samples, predicts dense class + probability rasters, and aggregates a year of
scenes into annual labels — all reproducible from a single master seed.
"""

__version__ = "0.1.0"

from .raster import GridSpec, RasterGrid, Scene, SceneManifest, read_rbin, write_rbin
from .forest import ForestModel, ForestParams, ScenePrediction
from .pipeline import AnnualLabel, Metrics, RunConfig, aggregate, evaluate, run_scene
from .synth import SynthSpec, reference_spec

__all__ = [
    "GridSpec",
    "RasterGrid",
    "Scene",
    "SceneManifest",
    "read_rbin",
    "write_rbin",
    "ForestModel",
    "ForestParams",
    "ScenePrediction",
    "AnnualLabel",
    "Metrics",
    "RunConfig",
    "aggregate",
    "evaluate",
    "run_scene",
    "SynthSpec",
    "reference_spec",
    "__version__",
]
