"""Dynamic texture and material synthesis with learned appearance ODEs."""

from .data import load_exemplar, synth_exemplar
from .exemplar import Exemplar
from .field import FieldConfig, VectorField, init_params
from .losses import FeatureBank
from .metrics import MetricsReport, non_straightness, realism, relight_eval
from .ode import SolverError, SolveStats, StiffnessError, solve_adaptive, solve_dense
from .synthesis import Model, generate, transfer
from .train import TrainConfig, Trainer, train

__version__ = "0.1.0"
