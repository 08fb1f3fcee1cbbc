"""gentopo: conditional diffusion for structural topology generation, with SIMP refinement."""

from .diffusion import NoiseSchedule, make_schedule, respace, sample
from .exceptions import (
    DatasetError,
    EmptySplitError,
    GentopoError,
    IllPosedProblemError,
    InfeasibleVolumeError,
    InvalidBaselineError,
    InvalidConfigurationError,
    InvalidInputError,
    SolverError,
    TrainingDivergedError,
)
from .fea import analyze, assemble_stiffness, compliance, solve_displacement
from .guidance import Guidance, make_guidance
from .io import load_dataset, save_dataset, synth_dataset
from .kernels import KernelConditioner, KernelParams, build_stack
from .metrics import EvaluationRecord, aggregate, evaluate_topology
from .model import DiffusionModel
from .pipeline import generate_and_refine, run_benchmark
from .problem import BoundaryConditions, Grid, Loads, Material, ProblemSpec, cantilever
from .simp import SIMPOptimizer, SimpConfig, refine, run_simp

__version__ = "0.1.0"

__all__ = [
    "BoundaryConditions", "DatasetError", "DiffusionModel", "EmptySplitError", "EvaluationRecord",
    "GentopoError", "Grid", "Guidance", "IllPosedProblemError", "InfeasibleVolumeError",
    "InvalidBaselineError", "InvalidConfigurationError", "InvalidInputError", "KernelConditioner",
    "KernelParams", "Loads", "Material", "NoiseSchedule", "ProblemSpec", "SIMPOptimizer", "SimpConfig",
    "SolverError", "TrainingDivergedError", "aggregate", "analyze", "assemble_stiffness", "build_stack",
    "cantilever", "compliance", "evaluate_topology", "generate_and_refine", "load_dataset", "make_guidance",
    "make_schedule", "refine", "respace", "run_benchmark", "run_simp", "sample", "save_dataset", "solve_displacement", "synth_dataset",
]
