"""Small encoder/decoder inpainting network with an explicit front/rear split.

The front is the downscaler (three stride-2 convolutions); its output is the
featuremap ``z`` that refinement optimizes. The rear holds the residual blocks,
the transposed-convolution upscaler and a sigmoid head, so predictions always
lie in [0, 1].
"""

from __future__ import annotations

import contextlib
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import FormatError, ShapeError, TrainingError, UnsupportedVersionError
from .optim import Adam

log = logging.getLogger(__name__)

MAGIC = b"RFNW"
FORMAT_VERSION = 1
_META_PREFIX = "meta."


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 16
    z_channels: int = 64
    n_res_blocks: int = 4
    slope: float = 0.2
    training_resolution: int = 128

    @property
    def stride(self):
        return 8


class InpaintNet:
    """Parameters live in an ordered ``name -> Tensor`` dict.

    ``front(image, mask)`` accepts ``3xHxW`` / ``HxW`` or batched
    ``Nx3xHxW`` / ``NxHxW`` inputs; ``H`` and ``W`` must be multiples of 8.
    """

    def __init__(self, config=None, seed=0, dtype=np.float32):
        self.config = config or NetConfig()
        self.params = _init_params(self.config, np.random.default_rng(seed), dtype)

    # -- parameters

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self):
        return list(self.params.values())

    def to(self, dtype):
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    @contextlib.contextmanager
    def frozen(self):
        """Exclude the weights from graphs built on the current thread."""
        with T.frozen(self.params.values()):
            yield self

    # -- forward

    def front(self, image, mask):
        image = T._array(image)
        mask = T._array(mask)
        s = self.config.stride
        if image.ndim not in (3, 4) or image.shape[-3] != 3:
            raise ShapeError(f"front: expected 3xHxW or Nx3xHxW image, got {image.shape}")
        H, W = image.shape[-2:]
        if mask.shape[-2:] != (H, W):
            raise ShapeError(f"front: mask {mask.shape} not congruent with image {image.shape}")
        if H % s or W % s:
            raise ShapeError(f"front: spatial size {(H, W)} not divisible by stride {s}")
        dtype = self.params["front.0.weight"].dtype
        m = mask.astype(dtype)[..., None, :, :]
        x = np.concatenate([image.astype(dtype) * (1 - m), m], axis=-3)
        h = T.Tensor._wrap(np.ascontiguousarray(x))
        p = self.params
        for i in range(3):
            h = T.conv2d(h, p[f"front.{i}.weight"], p[f"front.{i}.bias"], stride=2, padding=1)
            h = T.leaky_relu(h, self.config.slope)
        return h

    def rear(self, z):
        z = T.as_tensor(z)
        cfg, p = self.config, self.params
        if z.ndim not in (3, 4) or z.shape[-3] != cfg.z_channels:
            raise ShapeError(f"rear: expected {cfg.z_channels}-channel featuremap, got {z.shape}")
        h = z
        for i in range(cfg.n_res_blocks):
            r = T.conv2d(h, p[f"rear.res{i}.conv1.weight"], p[f"rear.res{i}.conv1.bias"], padding=1)
            r = T.leaky_relu(r, cfg.slope)
            r = T.conv2d(r, p[f"rear.res{i}.conv2.weight"], p[f"rear.res{i}.conv2.bias"], padding=1)
            h = T.add(h, r)
        for i in range(3):
            h = T.transposed_conv2d(h, p[f"rear.up{i}.weight"], p[f"rear.up{i}.bias"],
                                    stride=2, padding=1)
            h = T.leaky_relu(h, cfg.slope)
        h = T.conv2d(h, p["rear.head.weight"], p["rear.head.bias"])
        return T.sigmoid(h)

    def forward(self, image, mask):
        return self.rear(self.front(image, mask))

    __call__ = forward


def _init_params(cfg, rng, dtype):
    b, zc = cfg.base_channels, cfg.z_channels
    gain = math.sqrt(2.0 / (1 + cfg.slope ** 2))
    params = {}

    def conv(name, cout, cin, k, fan_in=None, mult=1.0):
        std = mult * gain / math.sqrt(fan_in or cin * k * k)
        w = rng.standard_normal((cout, cin, k, k)) * std
        params[name + ".weight"] = T.Tensor(w, requires_grad=True, dtype=dtype)
        bias_len = cout
        params[name + ".bias"] = T.Tensor(np.zeros(bias_len), requires_grad=True, dtype=dtype)

    for i, (cin, cout) in enumerate([(4, b), (b, 2 * b), (2 * b, zc)]):
        conv(f"front.{i}", cout, cin, 4)
    for i in range(cfg.n_res_blocks):
        conv(f"rear.res{i}.conv1", zc, zc, 3)
        conv(f"rear.res{i}.conv2", zc, zc, 3, mult=0.1)
    for i, (cin, cout) in enumerate([(zc, 2 * b), (2 * b, b), (b, b // 2)]):
        # transposed conv weights are C_in x C_out x k x k; each output sees
        # cin * k*k / stride**2 inputs
        w = rng.standard_normal((cin, cout, 4, 4)) * gain / math.sqrt(cin * 4)
        params[f"rear.up{i}.weight"] = T.Tensor(w, requires_grad=True, dtype=dtype)
        params[f"rear.up{i}.bias"] = T.Tensor(np.zeros(cout), requires_grad=True, dtype=dtype)
    conv("rear.head", 3, b // 2, 1, mult=1.0 / gain)
    return params


# ------------------------------------------------------------------ training


@dataclass
class TrainingConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    training_resolution: int = 128
    hole_weight: float = 1.0
    global_weight: float = 0.1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1, learning_rate > 0")


def reconstruction_loss(pred, truth, mask, cfg):
    hole = T.l1_masked(pred, truth, mask)
    full = T.l1_masked(pred, truth, np.ones(mask.shape, dtype=pred.dtype))
    return T.add(T.scale(hole, cfg.hole_weight), T.scale(full, cfg.global_weight))


def train(model, dataset, cfg, on_epoch=None):
    """Fit ``model`` on ``dataset`` with Adam; returns ``(model, history)``.

    ``dataset`` is a sequence of ``(image, mask, truth)`` triples of numpy
    arrays at the training resolution. ``history`` holds the mean batch loss
    of every epoch. ``on_epoch(epoch, loss)`` is called after each epoch.
    """
    history = []
    if cfg.epochs == 0:
        return model, history
    n = len(dataset)
    if n == 0:
        raise TrainingError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.learning_rate)
    dtype = model.params["front.0.weight"].dtype

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            images, masks, truths = zip(*(dataset[int(i)] for i in idx))
            image = np.stack(images).astype(dtype)
            mask = np.stack(masks).astype(dtype)
            truth = np.stack(truths).astype(dtype)
            if not mask.any():
                continue
            opt.zero_grad()
            try:
                pred = model.forward(image, mask)
                loss = reconstruction_loss(pred, truth, mask, cfg)
            except FloatingPointError as exc:
                raise TrainingError(f"non-finite values during training: {exc}", epoch) from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError("loss diverged", epoch)
            loss.backward()
            opt.step()
            total += value
            batches += 1
        history.append(total / max(batches, 1))
        log.info("epoch=%d loss=%.6f", epoch, history[-1])
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    return model, history


# ----------------------------------------------------------- serialization


def save_weights(model, path):
    """Write all named tensors as little-endian float32 in the RFNW format."""
    entries = [(n, p.data) for n, p in model.named_parameters()]
    entries.append((_META_PREFIX + "training_resolution",
                    np.asarray(model.config.training_resolution, dtype=np.float32)))
    entries.append((_META_PREFIX + "slope", np.asarray(model.config.slope, dtype=np.float32)))
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", FORMAT_VERSION, len(entries))
    for name, arr in entries:
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def _read_tensors(blob):
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise FormatError("not an RFNW weight file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported RFNW version {version}")
    pos = 12
    out = {}

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError("truncated weight file")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        if rank > 8:
            raise FormatError(f"tensor {name!r}: implausible rank {rank}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        if name in out:
            raise FormatError(f"duplicate tensor {name!r}")
        out[name] = arr.astype(np.float32)
    if pos != len(blob):
        raise FormatError("trailing bytes after last tensor")
    return out


def load_weights(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    tensors = _read_tensors(blob)
    # float32 scalars come back through their shortest repr (0.2, not 0.2000000029)
    meta = {k[len(_META_PREFIX):]: float(str(np.float32(v))) for k, v in tensors.items()
            if k.startswith(_META_PREFIX)}
    weights = {k: v for k, v in tensors.items() if not k.startswith(_META_PREFIX)}
    try:
        n_res = len({k.split(".")[1] for k in weights if k.startswith("rear.res")})
        cfg = NetConfig(
            base_channels=weights["front.0.weight"].shape[0],
            z_channels=weights["front.2.weight"].shape[0],
            n_res_blocks=n_res,
            slope=meta.get("slope", NetConfig.slope),
            training_resolution=int(meta.get("training_resolution", NetConfig.training_resolution)),
        )
    except KeyError as exc:
        raise FormatError(f"missing tensor {exc}") from None
    model = InpaintNet(cfg)
    expected = {n: p.shape for n, p in model.named_parameters()}
    if set(expected) != set(weights):
        raise FormatError("tensor names do not match the network layout")
    for name, shape in expected.items():
        if weights[name].shape != shape:
            raise FormatError(f"tensor {name!r}: shape {weights[name].shape} != {shape}")
        model.params[name].data = weights[name].copy()
    return model
