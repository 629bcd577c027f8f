"""Coarse-to-fine featuremap refinement for inpainting at high resolution.

The coarsest pyramid level is inpainted with one plain forward pass. At every
finer level the encoder output ``z`` is treated as a free variable: the decoder
prediction is downscaled to the previous level's geometry and ``z`` is updated
with Adam to minimize the masked L1 distance to the previous level's result.
Network weights are never touched.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import DegenerateMaskError, ParameterError
from .image_ops import build_pyramid, default_sigma, downscale, downscale_mask, erode_mask
from .optim import Adam

log = logging.getLogger(__name__)

REFINED = "refined"
UNREFINED = "unrefined"      # n_iters == 0
SKIPPED = "skipped"          # comparison mask empty after erosion
ABORTED = "aborted"          # non-finite values during optimization
BASE = "base"                # coarsest level, plain forward pass


@dataclass
class RefinementConfig:
    n_iters: int = 15
    lr: float = 0.002
    factor: float = 2.0
    smallest_scale: Optional[int] = None  # None: the model's training resolution
    erosion_radius: int = 15
    sigma_policy: Callable[[float], float] = default_sigma
    composite_output: bool = True

    def __post_init__(self):
        if self.n_iters < 0:
            raise ParameterError("n_iters must be >= 0")
        if not self.lr > 0:
            raise ParameterError("lr must be positive")
        if not self.factor > 1:
            raise ParameterError("factor must exceed 1")
        if self.erosion_radius < 0:
            raise ParameterError("erosion_radius must be >= 0")
        if self.smallest_scale is not None and self.smallest_scale < 1:
            raise ParameterError("smallest_scale must be positive")


@dataclass
class LevelResult:
    prediction: np.ndarray
    losses: list
    status: str
    seconds: float = 0.0
    z: Optional[np.ndarray] = None  # featuremap behind ``prediction``

    def __iter__(self):
        # allows ``pred, losses = predict_and_refine(...)``
        return iter((self.prediction, self.losses))


@dataclass
class RefinementReport:
    levels: list = field(default_factory=list)

    @property
    def trajectories(self):
        return [lv["losses"] for lv in self.levels if lv["status"] != BASE]

    def to_dict(self):
        return {"levels": self.levels}


# ----------------------------------------------------------------- helpers


def _pad_to_multiple(image, mask, multiple):
    H, W = image.shape[-2:]
    ph, pw = (-H) % multiple, (-W) % multiple
    if ph == 0 and pw == 0:
        return image, mask
    image = np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="edge")
    mask = np.pad(mask, ((0, ph), (0, pw)), mode="edge")
    return image, mask


def predict(model, image, mask):
    """Plain forward pass at the image's own resolution (pads to the stride, crops back)."""
    H, W = image.shape[-2:]
    pim, pm = _pad_to_multiple(np.asarray(image), np.asarray(mask), model.config.stride)
    with T.no_grad():
        out = model.forward(pim, pm).data
    return np.ascontiguousarray(out[:, :H, :W])


def comparison_mask(mask, guide_size, erosion_radius):
    """Region where the consistency loss is evaluated, at guide resolution."""
    small = downscale_mask(mask, *guide_size)
    return erode_mask(small, erosion_radius)


# ------------------------------------------------------------------- core


def predict_and_refine(image, mask, inpainted_low_res, model, cfg=None):
    """Refine the encoder featuremap at this scale against a coarser result.

    Returns a ``LevelResult``; ``losses`` holds ``n_iters + 1`` values, the
    consistency loss before the first update and after every update.
    """
    cfg = cfg or RefinementConfig()
    t0 = time.perf_counter()
    image = np.asarray(image)
    mask = (np.asarray(mask) > 0).astype(np.uint8)
    guide = np.asarray(T._array(inpainted_low_res))
    H, W = image.shape[-2:]
    guide_size = guide.shape[-2:]
    cmask = comparison_mask(mask, guide_size, cfg.erosion_radius)

    pim, pm = _pad_to_multiple(image, mask, model.config.stride)
    with model.frozen():
        with T.no_grad():
            z0 = model.front(pim, pm).data
        z = T.Tensor(z0, requires_grad=True)

        def forward():
            return T.crop(model.rear(z), 0, 0, H, W)

        def consistency(pred):
            down = downscale(pred, cfg.factor, cfg.sigma_policy, size=guide_size)
            return T.l1_masked(down, guide, cmask)

        def unrefined(status):
            with T.no_grad():
                z.data = z0
                out = forward().data
            return LevelResult(out, [], status, time.perf_counter() - t0, z0)

        if not cmask.any():
            log.warning("comparison mask empty after erosion (radius %d); skipping refinement at %dx%d",
                        cfg.erosion_radius, H, W)
            return unrefined(SKIPPED)
        if cfg.n_iters == 0:
            with T.no_grad():
                pred = forward()
                loss = consistency(pred).item()
            return LevelResult(pred.data, [loss], UNREFINED, time.perf_counter() - t0, z0)

        opt = Adam([z], lr=cfg.lr)
        losses = []
        try:
            for _ in range(cfg.n_iters):
                opt.zero_grad()
                loss = consistency(forward())
                losses.append(loss.item())
                loss.backward()
                opt.step()
            with T.no_grad():
                pred = forward()
                losses.append(consistency(pred).item())
        except (FloatingPointError, DegenerateMaskError) as exc:
            log.error("refinement aborted at %dx%d: %s", H, W, exc)
            return unrefined(ABORTED)
        if not all(math.isfinite(v) for v in losses):
            return unrefined(ABORTED)
    return LevelResult(pred.data, losses, REFINED, time.perf_counter() - t0, z.data.copy())


def multiscale_inpaint(image, mask, model, cfg=None):
    """Inpaint ``image`` (3xHxW in [0,1]) where ``mask`` (HxW) is nonzero.

    Returns ``(output, report)``.
    """
    cfg = cfg or RefinementConfig()
    image = np.asarray(image)
    mask = (np.asarray(mask) > 0).astype(np.uint8)
    if image.ndim != 3 or mask.shape != image.shape[-2:]:
        raise ParameterError(f"image {image.shape} and mask {mask.shape} are not congruent")
    smallest = cfg.smallest_scale or model.config.training_resolution
    pyr = build_pyramid(image, mask, smallest, cfg.factor, cfg.sigma_policy)
    report = RefinementReport()

    t0 = time.perf_counter()
    inpainted = predict(model, pyr.images[0], pyr.masks[0])
    h, w = pyr.sizes[0]
    report.levels.append({"level": 0, "height": h, "width": w, "status": BASE,
                          "losses": [], "seconds": time.perf_counter() - t0})
    for i in range(1, len(pyr)):
        res = predict_and_refine(pyr.images[i], pyr.masks[i], inpainted, model, cfg)
        inpainted = res.prediction
        h, w = pyr.sizes[i]
        report.levels.append({"level": i, "height": h, "width": w, "status": res.status,
                              "losses": res.losses, "seconds": res.seconds})

    if cfg.composite_output:
        inpainted = np.where(mask[None] > 0, inpainted.astype(image.dtype), image)
    return inpainted, report
