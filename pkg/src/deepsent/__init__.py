"""Multi-temporal, multi-spectral super-resolution of Sentinel-2 band stacks."""

from .bands import BANDS, canonical, group_of, parse_band_list
from .degradation import Dataset, DegradationParams, SplitSpec, build_dataset, simulate_lr_stack
from .metrics import MetricsReport, artifact_heatmap, cpsnr, cssim, sam, sam_consistency
from .network import DeepSent, NetworkConfig, forward, forward_all_bands, load_model, save_model
from .scene import BandSeries, BandStatistics, SceneStack, load_scene, save_scene
from .training import Checkpoint, TrainConfig, cmse_loss, evaluate_split, train

__version__ = "0.1.0"
