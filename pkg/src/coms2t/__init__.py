"""Complementary spatiotemporal learning: a stable backbone core frozen after
warm-up, a plastic remainder fine-tuned with environment prompts, and
test-time prompt adaptation."""
from .backbone import BackboneConfig, STBackbone
from .data import SpatioTemporalDataset, SynthConfig, load_dataset, save_dataset, synth_generate
from .disentangle import ParameterPartition, VariationLedger, build_partition
from .errors import ComS2TError, ConfigError, NumericsError
from .experiment import ExperimentConfig, count_updated_params, mae, run_ablation, run_experiment
from .prompt import PromptBank, PromptConfig
from .training import StagePlan, predict, run_finetune, run_warmup, test_time_adapt

__version__ = "0.1.0"
