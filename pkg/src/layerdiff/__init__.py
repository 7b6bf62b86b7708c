"""Layered multi-resolution text-to-image diffusion.

One U-Net ingests noisy images at several resolutions at once, trains on a
summed per-resolution denoising objective with a shared sinc-downsampled
noise pyramid and per-level shifted cosine schedules, and samples final
images in a single pass.
"""

from .crops import CropPlan, make_crop_plan
from .noise import (ImagePyramid, NoiseField, NoisePyramid,
                    bilinear_downsample, build_image_pyramid,
                    build_noise_pyramid, sample_gaussian, sinc_downsample)
from .params import ParamStore, backward, finite_diff_check
from .sampler import SamplerConfig, sample, sample_grid
from .schedule import (SchedulePoint, ShiftConfig, cosine_logsnr,
                       schedule_table, shifted_logsnr)
from .tensor import Tensor
from .train import Adam, StepMetrics, TrainConfig, fit, layered_loss, train_step
from .unet import (LayeredModel, ModelConfig, build_model, count_flops,
                   single_resolution_config, stack_init)

__version__ = "0.1.0"
