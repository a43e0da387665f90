"""Parameter estimation for interacting hypoelliptic particle systems.

Locally Gaussian (LG) contrasts for complete observations, a Kalman marginal
likelihood for partial observations, plug-in asymptotic precision matrices and
an experiment CLI.
"""
from .contrast import (AdamConfig, EMContrast, EstimationResult, LGContrast, adam_minimize, contrast_gradient,
                       em_contrast, estimate, lg_contrast)
from .errors import *  # noqa: F401,F403
from .lg_transition import LGMoments, lg_log_density, lg_moments, standardized_residual
from .model_core import (FunctionModel, InteractingFHN, InteractingLangevin1D, MeanFieldEllipticOU, ModelSpec,
                         ParameterVector, ParticleSystemState, available_models, default_bounds, get_model,
                         register_model)
from .simulator import ExperimentDesign, TrajectoryDataset, simulate_ips

__version__ = "0.1.0"
