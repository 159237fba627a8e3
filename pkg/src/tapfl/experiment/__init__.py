from .config import ExperimentConfig, load_config
from .data import SynthDatasetSpec, synth_dataset
from .runner import emit_metrics, run_config

__all__ = ["ExperimentConfig", "SynthDatasetSpec", "emit_metrics", "load_config",
           "run_config", "synth_dataset"]
