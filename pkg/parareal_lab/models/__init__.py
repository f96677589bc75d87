from .config import ExperimentConfig, IntegratorSpec, Precision, Scheme, load_experiment_config
from .phase import PhaseState
from .tableau import PararealTableau
