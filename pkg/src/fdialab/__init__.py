"""fdialab: a laboratory for false-data-injection attacks on DC state estimation.

Pipeline: parse a MATPOWER-style case, build the DC measurement model, train
a multi-label neural locator on synthetic normal/attacked samples, then search
for physically consistent adversarial perturbations that defeat both the
chi-square bad-data test and the locator.
"""

from . import attacks, estimation, fdia, gridcase, neural
from .attacks import (AttackConfig, AttackResult, build_variant,
                      perturbation_metrics, run_attack)
from .estimation import bdd_detect, bdd_statistic, chi_square_threshold, wls_estimate
from .fdia import (Dataset, FdiaSpec, GenerationConfig, calibrate_noise,
                   generate_dataset, labels_from_attack, make_measurements,
                   random_fdia, sample_state)
from .gridcase import (GridModel, MeterConfig, RawCase, build_grid_model,
                       load_bundled_case, parse_matpower_case)
from .neural import NalModel, TrainConfig, default_architecture, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackResult", "Dataset", "FdiaSpec", "GenerationConfig",
    "GridModel", "MeterConfig", "NalModel", "RawCase", "TrainConfig",
    "attacks", "bdd_detect", "bdd_statistic", "build_grid_model",
    "build_variant", "calibrate_noise", "chi_square_threshold",
    "default_architecture", "estimation", "evaluate", "fdia",
    "generate_dataset", "gridcase", "labels_from_attack", "load_bundled_case",
    "make_measurements", "neural", "parse_matpower_case",
    "perturbation_metrics", "random_fdia", "run_attack", "sample_state",
    "train", "wls_estimate",
]
