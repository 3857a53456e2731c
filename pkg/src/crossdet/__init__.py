"""Cross-domain multi-modal few-shot object detection at desk scale."""

from .autograd import NumericError, Tensor
from .config import ConfigError, RunConfig, load_config
from .data import (DataError, Dataset, Episode, FeatureGrid, SynthConfig,
                   TextRegistry, TokenSeq, benchmark_synth_config)
from .model import DetectionModel, ModelConfig, episode_loss, infer
from .train import (DataBundle, TrainState, benchmark_run, evaluate_model,
                    fine_tune, make_synthetic_bundle, meta_train, run_ablation)

__version__ = "0.1.0"
