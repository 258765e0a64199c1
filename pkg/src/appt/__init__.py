"""Adaptive point-prompt tuning of frozen transformers on point clouds.

Modules: ``numerics`` (autograd), ``pointcloud`` (I/O, FPS, kNN, synthetic
shapes), ``embed`` (group embedder, PosIn), ``backbone`` (frozen blocks),
``prompt`` (prompted propagation), ``model``, ``train``, ``checkpoint``,
``properties`` and ``cli``.
"""

from .backbone import Backbone, BackboneConfig
from .embed import PointEmbedConfig
from .errors import APPTError, CheckpointError, ConfigError, ContractError, FormatError, IntegrityError
from .model import APPTModel, ModelConfig, param_partition
from .numerics import Tensor, backward, no_grad
from .pointcloud import PointCloud, fps, gen_synthetic, group_cloud, knn_group
from .train import TrainConfig, evaluate, fit

__version__ = "0.1.0"
