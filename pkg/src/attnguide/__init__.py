"""Aggregation and isolation guidance for cross-attention maps.

Region identification, centroid losses with analytic gradients, spatial
metrics and a small latent-update simulator, all on numpy arrays.
"""
from .core import (ATTRIBUTE, BACKGROUND, SUBJECT, AttentionMap, AttentionStack, Coord, TokenSpec,
                   compute_attention, map_centroid, max_activation, softmax_tokens, weighted_centroid)
from .errors import (AttnGuideError, ConfigError, MapFileError, ShapeError, SimulationError,
                     UndefinedMetricError, ValidationError, ZeroMassError, ZeroVectorError)
from .grad import (GradCheckReport, GradientField, finite_diff_gradient, gradcheck, gradcheck_sweep,
                   latent_gradient, loss_gradient, softmax_backward)
from .io import (load_config, parse_map_file, pgm_bytes, trajectory_csv, write_map_file,
                 write_outputs)
from .losses import (COSINE, EUCLIDEAN, LossBreakdown, LossWeights, Metrics, agg_attr_loss,
                     agg_sub_loss, agg_sub_loss_cos, iso_loss, iso_loss_all, iso_loss_cos, max_loss,
                     multi_encoder_weights, total_loss)
from .metrics import centroid_spread, morans_i, overlap_ratio, top_mass_cells
from .regions import (DEFAULT_REGION_CONFIGS, CircularMask, GroupingRegion, RegionConfig,
                      identify_regions, radius_schedule)
from .sim import Blob, Experiment, Latent, SimConfig, Trajectory, init_latent, run, sim_step

__version__ = "0.1.0"
