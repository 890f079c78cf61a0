"""Unsupervised mosaic/PAN hyperspectral fusion with conditional flow matching."""
from .degradation import PAPER_SRF, Observation, SfaPattern, SpectralResponse
from .pipeline import RunConfig, SceneSpec, run_two_stage, simulate

__version__ = "0.1.0"

__all__ = ["PAPER_SRF", "Observation", "SfaPattern", "SpectralResponse", "RunConfig",
           "SceneSpec", "run_two_stage", "simulate", "__version__"]
