"""Benchmark problem definitions: datasets, adapters, recovery detection."""

from .base import (Problem, Sample, SplitDataset, load_archive,
                   recovery_check, save_dataset)
from .elastica import ElasticaProblem, elastica_dataset, fit_parameter
from .elasticity import (ElasticityProblem, ElasticityUntypedProblem,
                         deformation_gradient, divergence, elasticity_dataset,
                         frame_indifference_penalty)
from .poisson import PoissonProblem, poisson_dataset

__all__ = [
    "Problem", "Sample", "SplitDataset", "load_archive", "recovery_check",
    "save_dataset", "ElasticaProblem", "elastica_dataset", "fit_parameter",
    "ElasticityProblem", "ElasticityUntypedProblem", "deformation_gradient",
    "divergence", "elasticity_dataset", "frame_indifference_penalty",
    "PoissonProblem", "poisson_dataset",
]
