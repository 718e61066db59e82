"""Counterfactual effects of road and behaviour factors on ordinal crash severity."""

__version__ = "0.1.0"

from .dataset import (CalibrationSpec, CrashRecord, Dataset, DEFAULT_SCHEMA, VariableSpec,
                      calibrate_continuous, calibrate_ordinal, load_dataset, split_dataset,
                      split_indices, write_dataset)
from .effects import (EffectEstimate, Grouping, estimate_effects, grouping_preset, ite_level,
                      ite_probability, stratified_report)
from .errors import CfxError, ContractError, DataError, NumericalError
from .network import ModelConfig, NetworkParams, TrainedModel, forward, init_params, predict
from .propensity import (LabeledDataset, MatchPolicy, PropensityModel, assign_preliminary_labels,
                         fit_propensity, propensity_score)
from .scenario import Scenario
from .synthbench import (GroundTruth, SynthConfig, evaluate, generate_synthetic, matching_baseline,
                         oracle_effects)
from .training import LossWeights, TrainConfig, batch_loss, gradient_check, train
