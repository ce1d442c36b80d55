"""Shared residual CNN backbone with image/patch projection heads."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from . import ops
from .jigsaw import ImageSample, JigsawSample
from .tensor import ShapeError, Tensor, parameter


@dataclass
class EncoderConfig:
    channels: Tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 1
    cbam: bool = False
    embed_dim: int = 128
    grid: int = 3
    input_size: int = 96
    # first stage downsampling; later stages always stride 2
    stem_kernel: int = 8
    stem_stride: int = 8
    cbam_reduction: int = 8
    cbam_kernel: int = 7

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) < 2:
            raise ValueError("encoder needs at least 2 stages")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError(f"channels must be strictly increasing, got {self.channels}")
        if self.input_size % self.grid:
            raise ValueError(f"input size {self.input_size} not divisible by grid {self.grid}")

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    @property
    def m(self) -> int:
        return self.grid * self.grid

    @property
    def patch_size(self) -> int:
        return self.input_size // self.grid


class EncoderParams:
    """Named parameter tensors: backbone, optional CBAM blocks, heads f and g."""

    def __init__(self, config: EncoderConfig, tensors: "OrderedDict[str, Tensor]"):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    def names(self) -> List[str]:
        return list(self.tensors)

    def backbone_names(self) -> List[str]:
        return [n for n in self.tensors if not n.startswith("head_")]

    def state(self) -> Dict[str, np.ndarray]:
        return OrderedDict((k, v.data.copy()) for k, v in self.tensors.items())

    def load_state(self, state: Dict[str, np.ndarray], names: Optional[List[str]] = None) -> None:
        from .checkpoint import CheckpointError

        for name in names if names is not None else self.names():
            if name not in state:
                raise CheckpointError(f"checkpoint is missing tensor {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != self.tensors[name].shape:
                raise CheckpointError(
                    f"tensor {name!r}: checkpoint shape {arr.shape} != model shape {self.tensors[name].shape}"
                )
            self.tensors[name].data = arr.copy()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


def _kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_params(config: EncoderConfig, seed: int = 0) -> EncoderParams:
    rng = np.random.default_rng(seed)
    t: "OrderedDict[str, Tensor]" = OrderedDict()

    def conv(name, cout, cin, k):
        t[f"{name}.w"] = parameter(_kaiming(rng, (cout, cin, k, k), cin * k * k), f"{name}.w")
        t[f"{name}.b"] = parameter(np.zeros(cout), f"{name}.b")

    cin = 3
    for s, cout in enumerate(config.channels):
        k = config.stem_kernel if s == 0 else 3
        conv(f"stage{s}.down", cout, cin, k)
        for b in range(config.blocks_per_stage):
            conv(f"stage{s}.block{b}", cout, cout, 3)
        if config.cbam:
            hidden = max(1, cout // config.cbam_reduction)
            t[f"stage{s}.cbam.mlp1"] = parameter(_kaiming(rng, (cout, hidden), cout), f"stage{s}.cbam.mlp1")
            t[f"stage{s}.cbam.mlp2"] = parameter(_kaiming(rng, (hidden, cout), hidden), f"stage{s}.cbam.mlp2")
            ks = config.cbam_kernel
            t[f"stage{s}.cbam.spatial"] = parameter(
                _kaiming(rng, (1, 2, ks, ks), 2 * ks * ks), f"stage{s}.cbam.spatial"
            )
        cin = cout

    feat, e = config.feature_dim, config.embed_dim
    t["head_f.w"] = parameter(_kaiming(rng, (feat, e), feat), "head_f.w")
    t["head_f.b"] = parameter(np.zeros(e), "head_f.b")
    t["head_g.w"] = parameter(_kaiming(rng, (config.m * feat, e), config.m * feat), "head_g.w")
    t["head_g.b"] = parameter(np.zeros(e), "head_g.b")
    return EncoderParams(config, t)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------
def cbam_maps(params: EncoderParams, x: Tensor, prefix: str) -> Tuple[Tensor, Tensor, Tensor]:
    """CBAM on an N x C x H x W map; returns (output, channel map, spatial map).

    The channel map is N x C x 1 x 1 and the spatial map N x 1 x H x W, both
    in (0, 1); output = x * channel_map * spatial_map.
    """
    n, c, h, w = x.shape
    w1, w2 = params[f"{prefix}.mlp1"], params[f"{prefix}.mlp2"]
    pooled = ops.concat([ops.global_avg_pool(x), ops.global_max_pool(x)], axis=0)
    mlp = ops.matmul(ops.relu(ops.matmul(pooled, w1)), w2)
    chan = ops.sigmoid(ops.add(mlp[:n], mlp[n:]))
    chan = ops.reshape(chan, (n, c, 1, 1))
    x1 = ops.mul(x, ops.expand(chan, x.shape))

    desc = ops.concat([ops.mean(x1, axis=1, keepdims=True), ops.amax(x1, axis=1, keepdims=True)], axis=1)
    k = params[f"{prefix}.spatial"].shape[-1]
    spatial = ops.sigmoid(ops.conv2d(desc, params[f"{prefix}.spatial"], padding=k // 2))
    out = ops.mul(x1, ops.expand(spatial, x.shape))
    return out, chan, spatial


def cbam_block(params: EncoderParams, x: Tensor, prefix: str) -> Tensor:
    single = x.ndim == 3
    x4 = ops.reshape(x, (1,) + x.shape) if single else x
    out = cbam_maps(params, x4, prefix)[0]
    return ops.reshape(out, x.shape) if single else out


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------
def backbone(params: EncoderParams, x: Tensor) -> Tensor:
    """N x 3 x H x W -> N x feature_dim (global average pooled)."""
    cfg = params.config
    for s in range(len(cfg.channels)):
        if s == 0:
            k, stride = cfg.stem_kernel, cfg.stem_stride
            pad = (k - stride + 1) // 2 if k > stride else 0
        else:
            stride, pad = 2, 1
        x = ops.relu(ops.conv2d(x, params[f"stage{s}.down.w"], params[f"stage{s}.down.b"], stride, pad))
        for b in range(cfg.blocks_per_stage):
            y = ops.conv2d(x, params[f"stage{s}.block{b}.w"], params[f"stage{s}.block{b}.b"], 1, 1)
            x = ops.relu(ops.add(x, y))
        if cfg.cbam:
            x = cbam_maps(params, x, f"stage{s}.cbam")[0]
    return ops.global_avg_pool(x)


def _as_input(x) -> np.ndarray:
    if isinstance(x, ImageSample):
        return x.pixels
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def encode_image(params: EncoderParams, image: Union[ImageSample, np.ndarray, Tensor]) -> Tensor:
    """Backbone feature of one image (3 x H x W) or a batch (N x 3 x H x W)."""
    cfg = params.config
    arr = _as_input(image)
    single = arr.ndim == 3
    batch = arr[None] if single else arr
    if batch.ndim != 4 or batch.shape[1:] != (3, cfg.input_size, cfg.input_size):
        raise ShapeError(
            f"encode_image: expected 3 x {cfg.input_size} x {cfg.input_size} input, got {arr.shape}"
        )
    feats = backbone(params, Tensor(batch))
    return ops.reshape(feats, (cfg.feature_dim,)) if single else feats


def encode_patches(params: EncoderParams, sample: Union[JigsawSample, np.ndarray]) -> Tensor:
    """Per-patch backbone features concatenated in shuffled order.

    Accepts a JigsawSample, an m x 3 x p x p stack, or a batch B x m x 3 x p x p;
    returns [m * feature_dim] or [B, m * feature_dim].
    """
    cfg = params.config
    arr = np.stack(sample.patches) if isinstance(sample, JigsawSample) else np.asarray(sample, dtype=np.float64)
    single = arr.ndim == 4
    batch = arr[None] if single else arr
    p = cfg.patch_size
    if batch.ndim != 5 or batch.shape[1:] != (cfg.m, 3, p, p):
        raise ShapeError(f"encode_patches: expected {cfg.m} x 3 x {p} x {p} patches, got {arr.shape}")
    b = batch.shape[0]
    feats = backbone(params, Tensor(batch.reshape(b * cfg.m, 3, p, p)))
    cat = ops.reshape(feats, (b, cfg.m * cfg.feature_dim))
    return ops.reshape(cat, (cfg.m * cfg.feature_dim,)) if single else cat


def project_f(params: EncoderParams, feature: Tensor) -> Tensor:
    """Image head: linear layer then projection to the unit sphere."""
    return ops.l2_normalize(ops.linear(feature, params["head_f.w"], params["head_f.b"]))


def project_g(params: EncoderParams, concat_feature: Tensor) -> Tensor:
    """Patch head over the concatenated patch features."""
    return ops.l2_normalize(ops.linear(concat_feature, params["head_g.w"], params["head_g.b"]))
