"""Multi-scale attention flow forecaster for multivariate time series."""

from .data import CorruptionSpec, SeriesFrame, load_csv, synth_generate, write_csv
from .metrics import ScoreReport, crps_samples, crps_sum, mse
from .model import ForecastSamples, ManfConfig, ManfModel, load_model, save_model
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"
