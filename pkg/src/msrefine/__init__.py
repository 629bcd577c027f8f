"""Inference-time multiscale featuremap refinement for image inpainting."""

from .image_ops import build_pyramid, downscale, downscale_mask, erode_mask
from .net import InpaintNet, NetConfig, TrainingConfig, load_weights, save_weights, train
from .refine import RefinementConfig, multiscale_inpaint, predict_and_refine

__version__ = "0.1.0"
