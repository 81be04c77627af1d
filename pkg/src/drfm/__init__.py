"""Diffusion random feature models: a random-feature noise predictor with
learned per-timestep feature weights, trained by denoising score matching."""

import os as _os

# DRFM_THREADS caps BLAS worker threads.  It only takes effect when numpy has
# not been imported yet, so it is applied before any submodule import.
_threads = _os.environ.get("DRFM_THREADS", "").strip()
if _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from drfm.errors import ConfigError, DataFormatError, DrfmError, NumericalError
from drfm.model import ModelMode, RandomFeatures, RhoSpec, TrainableParams, predict_noise
from drfm.sampler import NoiseRule, SamplerVariant, denoise, denoise_corrupted, sample
from drfm.schedule import VarianceSchedule, default_schedule, linear_schedule
from drfm.training import LossWeighting, TrainConfig, train

__all__ = [
    "ConfigError", "DataFormatError", "DrfmError", "NumericalError",
    "ModelMode", "RandomFeatures", "RhoSpec", "TrainableParams", "predict_noise",
    "NoiseRule", "SamplerVariant", "denoise", "denoise_corrupted", "sample",
    "VarianceSchedule", "default_schedule", "linear_schedule",
    "LossWeighting", "TrainConfig", "train",
]
__version__ = "0.1.0"
