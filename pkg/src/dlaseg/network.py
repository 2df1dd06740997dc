"""Multi-scale aggregation stage and the three-stage cascade.

Each stage runs a stem, a hierarchical aggregation tree per scale with
2x downsampling between scales, then an iterative upsample-and-aggregate
chain back to full resolution, and a 1x1 classifier head. Later cascade
stages consume the raw input concatenated with the previous stage's
pre-head features and softmax probabilities.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, concat_channels, relu
from .layers import (Conv2d, ConvTranspose2d, GaussianKernel, InstanceNorm,
                     Module, ModuleList, gaussian_blurpool, maxpool2d,
                     softmax_channels, spatial_dropout)

DOWNSAMPLERS = ("pool", "gconv")

CHECKPOINT_MAGIC = b"DLC1"
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


@dataclass
class DLAStageConfig:
    """Shape of one aggregation stage; `downsampler` switches between
    plain strided max pooling and the blur-pooled variant."""
    in_channels: int
    base_width: int = 8
    num_scales: int = 3
    hda_depth: int = 2
    num_classes: int = 4
    downsampler: str = "gconv"

    def __post_init__(self):
        if self.num_scales < 2:
            raise ValueError("num_scales must be >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.base_width < 1:
            raise ValueError("base_width must be positive")
        if self.hda_depth < 1:
            raise ValueError("hda_depth must be >= 1")
        if self.downsampler not in DOWNSAMPLERS:
            raise ValueError(f"downsampler must be one of {DOWNSAMPLERS}")

    @property
    def scale_widths(self):
        return [self.base_width * (1 << s) for s in range(self.num_scales)]

    @property
    def feature_width(self):
        # width of the pre-head feature map handed to the next stage
        return self.base_width


class ConvBlock(Module):
    """conv 3x3 (pad 1) -> instance norm -> relu."""

    def __init__(self, in_channels, out_channels, rng, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel=3, padding=1,
                           bias=False, rng=rng, dtype=dtype)
        self.norm = InstanceNorm(out_channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.norm(self.conv(x)))


class AggNode(Module):
    """Aggregation node: concatenate inputs, then a conv block down to the
    configured width."""

    def __init__(self, in_channels_total, width, rng, dtype=np.float32):
        super().__init__()
        self.width = width
        self.block = ConvBlock(in_channels_total, width, rng, dtype)

    def forward(self, features) -> Tensor:
        features = list(features)
        if not features:
            raise ValueError("aggregate needs at least one input")
        fused = features[0] if len(features) == 1 else concat_channels(features)
        return self.block(fused)


def aggregate(features, node: AggNode) -> Tensor:
    """Fuse equal-resolution feature maps through an aggregation node."""
    return node(features)


class HDATree(Module):
    """Binary aggregation tree over a chain of basic blocks.

    Each aggregation node fuses its two children together with the
    children's own input, so feature channels from shallower depths are
    preserved while being combined. A tree of the given depth holds
    2**depth basic blocks and 2**depth - 1 aggregation nodes.
    """

    def __init__(self, depth, in_channels, width, rng, dtype=np.float32):
        super().__init__()
        if depth < 1:
            raise ValueError("hda depth must be >= 1")
        self.depth = depth
        self.in_channels = in_channels
        self.width = width
        if depth == 1:
            self.left = ConvBlock(in_channels, width, rng, dtype)
            self.right = ConvBlock(width, width, rng, dtype)
        else:
            self.left = HDATree(depth - 1, in_channels, width, rng, dtype)
            self.right = HDATree(depth - 1, width, width, rng, dtype)
        self.agg = AggNode(width + width + in_channels, width, rng, dtype)

    @property
    def num_blocks(self):
        return 1 << self.depth

    @property
    def num_agg_nodes(self):
        return (1 << self.depth) - 1

    def forward(self, x: Tensor) -> Tensor:
        left = self.left(x)
        right = self.right(left)
        return self.agg([left, right, x])


def build_hda(depth, in_channels, width, rng, dtype=np.float32) -> HDATree:
    return HDATree(depth, in_channels, width, rng, dtype)


class IDAChain(Module):
    """Iterative upsample-and-aggregate chain from the coarsest scale up.

    Takes per-scale features ordered finest first, each following scale
    exactly half the resolution of the one before. Upsampling is a 3x3
    stride-2 transpose convolution that doubles the extent.
    """

    def __init__(self, widths, rng, dtype=np.float32):
        super().__init__()
        if not widths:
            raise ValueError("IDAChain needs at least one scale width")
        self.widths = list(widths)
        self.ups = ModuleList()
        self.aggs = ModuleList()
        if len(widths) == 1:
            self.single = AggNode(widths[0], widths[0], rng, dtype)
        else:
            self.single = None
            for s in range(len(widths) - 1, 0, -1):
                self.ups.append(ConvTranspose2d(widths[s], widths[s - 1],
                                                rng=rng, dtype=dtype))
                self.aggs.append(AggNode(2 * widths[s - 1], widths[s - 1],
                                         rng, dtype))

    def forward(self, features) -> Tensor:
        features = list(features)
        if len(features) != len(self.widths):
            raise ValueError(f"expected {len(self.widths)} scales, "
                             f"got {len(features)}")
        for i in range(len(features) - 1):
            fine, coarse = features[i], features[i + 1]
            if (fine.shape[2] != 2 * coarse.shape[2]
                    or fine.shape[3] != 2 * coarse.shape[3]):
                raise ValueError(
                    "non-dyadic scale chain: "
                    f"{fine.shape[2:]} does not double {coarse.shape[2:]}")
        if self.single is not None:
            return self.single([features[0]])
        current = features[-1]
        for i, s in enumerate(range(len(features) - 1, 0, -1)):
            upsampled = self.ups[i](current)
            current = self.aggs[i]([features[s - 1], upsampled])
        return current


def build_ida(widths, rng, dtype=np.float32) -> IDAChain:
    return IDAChain(widths, rng, dtype)


class DLAStage(Module):
    """One aggregation stage: stem, per-scale trees with downsampling in
    between, the upsample chain, spatial dropout, and a 1x1 head.

    forward returns (logits, features) at the input resolution; `features`
    is the aggregation output feeding both the head and the next cascade
    stage.
    """

    def __init__(self, cfg: DLAStageConfig, rng, dtype=np.float32,
                 dropout_p: float = 0.25):
        super().__init__()
        self.cfg = cfg
        self.dropout_p = dropout_p
        widths = cfg.scale_widths
        self.stem = ConvBlock(cfg.in_channels, widths[0], rng, dtype)
        scales = []
        for s in range(cfg.num_scales):
            in_ch = widths[0] if s == 0 else widths[s - 1]
            scales.append(HDATree(cfg.hda_depth, in_ch, widths[s], rng, dtype))
        self.scales = ModuleList(scales)
        self.ida = IDAChain(widths, rng, dtype)
        self.head = Conv2d(cfg.feature_width, cfg.num_classes, kernel=1,
                           bias=True, rng=rng, dtype=dtype)
        self.gauss = GaussianKernel()

    def _downsample(self, x: Tensor) -> Tensor:
        if self.cfg.downsampler == "pool":
            return maxpool2d(x, kernel=2, stride=2)
        return gaussian_blurpool(x, self.gauss)

    def forward(self, x: Tensor, training: bool = False, rng=None):
        factor = 1 << (self.cfg.num_scales - 1)
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ValueError(
                f"spatial extents {x.shape[2]}x{x.shape[3]} must be "
                f"divisible by {factor}")
        current = self.stem(x)
        per_scale = []
        for s, tree in enumerate(self.scales):
            if s > 0:
                current = self._downsample(current)
            current = tree(current)
            per_scale.append(current)
        features = self.ida(per_scale)
        features = spatial_dropout(features, self.dropout_p, training, rng)
        logits = self.head(features)
        return logits, features


def dla_forward(x: Tensor, stage: DLAStage, training: bool = False, rng=None):
    return stage(x, training, rng)


class CascadeNet(Module):
    """Three identical-topology stages; stage s > 1 consumes the raw input
    concatenated with stage s-1 features and probabilities."""

    NUM_STAGES = 3

    def __init__(self, in_channels: int, num_classes: int = 4,
                 base_width: int = 8, num_scales: int = 3, hda_depth: int = 2,
                 downsampler: str = "gconv", dropout_p: float = 0.25,
                 loss_weights=(0.3, 0.4, 1.0), seed: int = 0,
                 dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.base_width = base_width
        self.num_scales = num_scales
        self.hda_depth = hda_depth
        self.downsampler = downsampler
        self.dropout_p = dropout_p
        self.loss_weights = tuple(loss_weights)
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        feature_width = base_width
        self.stage_in_channels = [in_channels] + [
            in_channels + feature_width + num_classes] * (self.NUM_STAGES - 1)
        stages = []
        for stage_in in self.stage_in_channels:
            cfg = DLAStageConfig(in_channels=stage_in, base_width=base_width,
                                 num_scales=num_scales, hda_depth=hda_depth,
                                 num_classes=num_classes,
                                 downsampler=downsampler)
            stages.append(DLAStage(cfg, rng, self.dtype, dropout_p))
        self.stages = ModuleList(stages)

    def forward(self, mri: Tensor, training: bool = False, rng=None):
        if mri.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, "
                             f"got {mri.shape[1]}")
        outputs = []
        stage_input = mri
        for i, stage in enumerate(self.stages):
            logits, features = stage(stage_input, training, rng)
            probs = softmax_channels(logits)
            outputs.append((logits, probs))
            if i + 1 < len(self.stages):
                stage_input = concat_channels([mri, features, probs])
        return outputs

    def config_dict(self):
        return {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "base_width": self.base_width,
            "num_scales": self.num_scales,
            "hda_depth": self.hda_depth,
            "downsampler": self.downsampler,
            "dropout_p": self.dropout_p,
            "loss_weights": list(self.loss_weights),
            "seed": self.seed,
            "dtype": "float64" if self.dtype == np.float64 else "float32",
        }


def cascade_forward(mri: Tensor, net: CascadeNet, training: bool = False,
                    rng=None):
    return net.forward(mri, training, rng)


def save_checkpoint(net: CascadeNet, path) -> None:
    """Write config plus named parameter arrays, raw little-endian.

    Layout: magic "DLC1", uint32 config length, config JSON (utf-8), uint32
    parameter count, then per parameter: uint16 name length, name (utf-8),
    uint8 dtype code (1=f32, 2=f64), uint8 ndim, uint32 dims, raw data.
    """
    params = list(net.named_parameters())
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    cfg = json.dumps(net.config_dict(), sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(cfg))
    blob += cfg
    blob += struct.pack("<I", len(params))
    for name, p in params:
        name_b = name.encode("utf-8")
        blob += struct.pack("<H", len(name_b))
        blob += name_b
        blob += struct.pack("<BB", _DTYPE_CODES[p.data.dtype], p.data.ndim)
        blob += struct.pack(f"<{p.data.ndim}I", *p.data.shape)
        blob += np.ascontiguousarray(p.data).astype(
            p.data.dtype.newbyteorder("<"), copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path) -> CascadeNet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file: bad magic {raw[:4]!r}")
    off = 4
    (cfg_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    cfg = json.loads(raw[off:off + cfg_len].decode("utf-8"))
    off += cfg_len
    dtype = np.float64 if cfg.pop("dtype") == "float64" else np.float32
    net = CascadeNet(dtype=dtype, **cfg)
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    loaded = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + name_len].decode("utf-8")
        off += name_len
        code, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(raw[off:off + nbytes], dtype=dt).reshape(shape)
        off += nbytes
        loaded[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if off != len(raw):
        raise ValueError("trailing bytes in checkpoint file")
    own = dict(net.named_parameters())
    if set(own) != set(loaded):
        missing = set(own) ^ set(loaded)
        raise ValueError(f"checkpoint/model parameter mismatch: {sorted(missing)}")
    for name, p in own.items():
        if loaded[name].shape != p.data.shape:
            raise ValueError(f"shape mismatch for {name}")
        p.data = loaded[name]
    return net
