"""Image encoder, RoI pooling and proposal embeddings.

Encoder: four {3x3 conv, relu, 2x2 max pool} blocks, so spatial dims
shrink by 16 and a 3x64x64 image becomes a 64x4x4 feature map. Each
proposal box is max-pooled on that map into a fixed grid and projected
through two fully-connected layers to a length-d vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, conv2d_3x3, maxpool2x2, parameter, roi_max_pool
from .errors import ArgumentError, ConfigurationError
from .seeds import OFF_PARAM_INIT, rng_for

DEFAULT_CHANNELS = (16, 32, 64, 64)
DEFAULT_POOL = 4


@dataclass
class FeatureMap:
    values: Tensor              # (D_f, W_f, H_f)
    spatial_scale: float        # W_f / W of the source image

    def __post_init__(self):
        if not (0.0 < self.spatial_scale <= 1.0):
            raise ArgumentError(f"spatial_scale {self.spatial_scale} outside (0, 1]")


@dataclass
class EncoderParams:
    convs: list                 # [(w: (Co,Ci,3,3), b: (Co,)) Tensors]
    w1: Tensor                  # (pooled_dim, d)
    b1: Tensor
    w2: Tensor                  # (d, d)
    b2: Tensor
    d: int
    pool_size: int = DEFAULT_POOL

    @property
    def pooled_dim(self) -> int:
        return self.w1.value.shape[0]

    @property
    def out_channels(self) -> int:
        return self.convs[-1][0].value.shape[0]

    def parameters(self) -> list:
        named = []
        for i, (w, b) in enumerate(self.convs):
            named.append((f"enc.conv{i}.w", w))
            named.append((f"enc.conv{i}.b", b))
        named += [("enc.proj.w1", self.w1), ("enc.proj.b1", self.b1),
                  ("enc.proj.w2", self.w2), ("enc.proj.b2", self.b2)]
        return named


def _uniform_fan_in(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder(seed: int, d: int = 128, in_channels: int = 3,
                 channels: tuple = DEFAULT_CHANNELS, pool_size: int = DEFAULT_POOL) -> EncoderParams:
    """Fan-in uniform weights, zero biases, from the run seed."""
    rng = rng_for(seed, OFF_PARAM_INIT)
    convs = []
    ci = in_channels
    for co in channels:
        w = parameter(_uniform_fan_in(rng, (co, ci, 3, 3), ci * 9))
        b = parameter(np.zeros(co))
        convs.append((w, b))
        ci = co
    pooled_dim = channels[-1] * pool_size * pool_size
    w1 = parameter(_uniform_fan_in(rng, (pooled_dim, d), pooled_dim))
    b1 = parameter(np.zeros(d))
    w2 = parameter(_uniform_fan_in(rng, (d, d), d))
    b2 = parameter(np.zeros(d))
    return EncoderParams(convs=convs, w1=w1, b1=b1, w2=w2, b2=b2,
                         d=d, pool_size=pool_size)


def encode(params: EncoderParams, image) -> FeatureMap:
    """Run the conv stack; output spatial dims are ceil(input / 16)."""
    pixels = np.asarray(getattr(image, "pixels", image), dtype=np.float64)
    if pixels.ndim != 3 or pixels.shape[0] != params.convs[0][0].value.shape[1]:
        raise ArgumentError(f"expected (3, W, H) image, got {pixels.shape}")
    halvings = len(params.convs)
    if pixels.shape[1] < 2 ** halvings or pixels.shape[2] < 2 ** halvings:
        raise ArgumentError(
            f"image {pixels.shape[1]}x{pixels.shape[2]} smaller than the "
            f"{2 ** halvings}x downsampling of the encoder")
    x = Tensor(pixels)
    for w, b in params.convs:
        x = maxpool2x2(conv2d_3x3(x, w, b).relu())
    return FeatureMap(values=x, spatial_scale=x.value.shape[1] / pixels.shape[1])


def roi_pool(fmap: FeatureMap, box, out_size: int | None = None) -> Tensor:
    """Pool one box to (D_f, out, out)."""
    out = DEFAULT_POOL if out_size is None else out_size
    pooled = roi_max_pool(fmap.values, [list(box.as_list() if hasattr(box, "as_list") else box)],
                          fmap.spatial_scale, out)
    c = fmap.values.value.shape[0]
    return pooled.reshape(c, out, out)


def roi_pool_batch(fmap: FeatureMap, boxes, out_size: int | None = None) -> Tensor:
    """Pool many boxes to (B, D_f * out * out), channel-major."""
    out = DEFAULT_POOL if out_size is None else out_size
    arr = np.asarray([b.as_list() if hasattr(b, "as_list") else list(b) for b in boxes],
                     dtype=np.float64)
    return roi_max_pool(fmap.values, arr, fmap.spatial_scale, out)


def proposal_representation(params: EncoderParams, pooled: Tensor) -> Tensor:
    """(B, pooled_dim) -> (B, d) through two fully-connected layers."""
    if pooled.value.ndim != 2 or pooled.value.shape[1] != params.pooled_dim:
        raise ConfigurationError(
            f"pooled shape {pooled.value.shape} does not match projection "
            f"input {params.pooled_dim}")
    hidden = (pooled @ params.w1 + params.b1).relu()
    return hidden @ params.w2 + params.b2


def proposal_features(params: EncoderParams, image, boxes) -> Tensor:
    """Full path image + boxes -> (B, d) proposal features."""
    fmap = encode(params, image)
    pooled = roi_pool_batch(fmap, boxes, params.pool_size)
    return proposal_representation(params, pooled)
