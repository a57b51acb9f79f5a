"""Multi-step consistency flow matching with adaptive gradient allocation, on numpy."""
from .aga import AgaState, alpha_closed_form, c_validity, combine, pcgrad_project, update_c
from .fileio import Dataset, load_dataset, save_dataset
from .flow import Codebook, rollout_targets, sample
from .harness import Checkpoint, TrainConfig, evaluate, train
from .velocity import VelocityModel

__version__ = "0.1.0"
