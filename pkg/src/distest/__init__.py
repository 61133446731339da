"""Distributed parameter estimation with consensus+innovations recursions."""
from .graph import (
    ConsensusProjector,
    GraphError,
    LaplacianMatrix,
    LinkFailureModel,
    algebraic_connectivity,
    consensus_split,
    laplacian_from_edges,
    mean_laplacian,
    named_laplacian,
    sample_laplacian,
)
from .quantizer import QuantizerSpec, dithered_quantize, quantize
from .models import LinearModel, SeparableModel, check_observability, cubic_model, scalar_model
from .schedules import NluSchedulePair, WeightSchedule
from .estimators import DivergenceError, EstimatorState, Problem, Trace, run_trial, run_trials

__version__ = "0.1.0"
