"""Population-aware diffusion for multivariate time-series generation."""

from .backbone import Backbone, BackboneConfig, build_backbone, load_checkpoint, save_checkpoint
from .data import Dataset, RawTable, Scaler, denormalize, load_dataset, load_table, make_sines, save_dataset, window
from .evaluation import (
    MetricReport,
    discriminative_accuracy,
    evaluate,
    fdds,
    feature_distance_report,
    predictive_score,
    vds,
)
from .schedule import (
    NoiseSchedule,
    cosine_schedule,
    forward_sample,
    generate,
    posterior_mean,
    reparam_x0,
    reverse_step,
    sample_steps,
)
from .stats import cc_vector, hist_divergence, l_pop, mmd, pearson
from .train import TrainConfig, TrainLog, loss_l0, loss_total, train

__version__ = "0.1.0"
