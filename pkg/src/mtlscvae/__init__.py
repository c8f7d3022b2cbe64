"""Multi-task semi-conditional VAE for pressure-field reconstruction and leak-rate classification."""

__version__ = "0.1.0"

from .errors import DataError, MTLSCVAEError, NumericalError, ShapeError
from .estimator import MTLSCVAE
from .leaksim import (PermeabilityModel, PressureSeries, ScenarioSpec, generate_heterogeneity,
                      simulate_many, simulate_scenario, stability_dt)
from .metrics import confusion, macro_roc, relative_l2, roc_ovr
from .pipeline import (DatasetSplit, Downsampler, Instance, WellSampler, make_instances,
                       read_dataset, sample_wells, split, write_dataset)
from .posterior import PosteriorConfig, classify, summarize
from .scvae import Architecture, HyperParams, SCVAENetwork

__all__ = [
    "Architecture", "DataError", "DatasetSplit", "Downsampler", "HyperParams", "Instance", "MTLSCVAE",
    "MTLSCVAEError", "NumericalError", "PermeabilityModel", "PosteriorConfig",
    "PressureSeries", "SCVAENetwork", "ScenarioSpec", "ShapeError", "classify", "confusion",
    "generate_heterogeneity", "macro_roc", "make_instances", "read_dataset", "relative_l2",
    "roc_ovr", "sample_wells", "simulate_many", "simulate_scenario", "split", "stability_dt", "summarize",
    "WellSampler", "write_dataset",
]
