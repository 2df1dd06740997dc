"""Cascaded multi-scale segmentation on volumetric data, built on a
minimal numpy autograd engine. See README.md for the pipeline overview."""

from .autograd import (GraphConsumedError, Tensor, backward, concat_channels,
                       elementwise, grad_check, reduce, split_channels)
from .data import (PhantomSpec, Volume, brain_mask, generate_phantom,
                   normalize, read_volume, write_volume)
from .evaluation import MetricsReport, RegionMask, dice, evaluate, hd95, region_masks
from .inference import (EnsembleConfig, PostprocConfig, derive_threshold,
                        ensemble_predict, postprocess, predict_volume)
from .layers import (Conv2d, ConvTranspose2d, GaussianKernel, InstanceNorm,
                     conv2d, gaussian_blurpool, maxpool2d, norm_layer,
                     softmax_channels, spatial_dropout, transpose_conv2d)
from .network import (CascadeNet, DLAStage, DLAStageConfig, HDATree, IDAChain,
                      cascade_forward, dla_forward, load_checkpoint,
                      save_checkpoint)
from .training import (AdamW, TrainConfig, augment_patch, cascade_loss,
                       cross_entropy_masked, sample_patch, schedule_value,
                       train)

__version__ = "0.1.0"
