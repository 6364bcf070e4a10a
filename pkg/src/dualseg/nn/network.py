"""Multi-head residual encoder-decoder.

Encoder levels are residual conv blocks joined by stride-2 convolutions; the
decoder upsamples trilinearly and concatenates the matching skip features.
Four heads sit on top: voxel segmentation (logistic), signed distance
(linear), per-slice tumor presence, and a projection of the bottleneck used
for contrastive learning.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence

import numpy as np

from ..errors import ConfigError, ShapeError, StateError
from ..grid import Volume
from ..objective import BranchOutputs
from .layers import (Conv3d, Dropout, InstanceNorm3d, Layer, ReLU, Sigmoid, SliceHead,
                     TrilinearUpsample)


@dataclass(frozen=True)
class NetworkConfig:
    levels: int = 2
    base_channels: int = 8
    res_blocks: int = 1
    dropout: float = 0.1
    head_channels: int = 8
    proj_dim: int = 16
    seed: int = 0
    dist_scale: float = 10.0   # mm per unit of the distance head's raw output

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.base_channels < 1 or self.head_channels < 1 or self.proj_dim < 1:
            raise ConfigError("channel counts must be >= 1")
        if self.res_blocks < 0:
            raise ConfigError("res_blocks must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if not self.dist_scale > 0:
            raise ConfigError("dist_scale must be positive")

    @property
    def factor(self) -> int:
        """Spatial downsampling between the input and the bottleneck."""
        return 2 ** (self.levels - 1)

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level


DESK = NetworkConfig()
TINY = NetworkConfig(levels=2, base_channels=2, res_blocks=1, dropout=0.0, head_channels=2, proj_dim=3)
# four residual layers, 32-channel head features
LARGE = NetworkConfig(levels=4, base_channels=32, res_blocks=4, dropout=0.1, head_channels=32, proj_dim=16)


def conv_params(cin: int, cout: int, k: int) -> int:
    return cout * cin * k ** 3 + cout


def expected_param_count(cfg: NetworkConfig) -> int:
    """Closed-form parameter count, kept independent of the layer code."""
    c = cfg.channels
    total = conv_params(1, c(0), 3) + 2 * c(0)
    total += cfg.res_blocks * 2 * (conv_params(c(0), c(0), 3) + 2 * c(0))
    for lvl in range(1, cfg.levels):
        total += conv_params(c(lvl - 1), c(lvl), 3) + 2 * c(lvl)
        total += cfg.res_blocks * 2 * (conv_params(c(lvl), c(lvl), 3) + 2 * c(lvl))
    for lvl in range(cfg.levels - 2, -1, -1):
        total += conv_params(c(lvl + 1) + c(lvl), c(lvl), 3) + 2 * c(lvl)
    h = cfg.head_channels
    total += conv_params(c(0), h, 3) + 2 * h
    total += 2 * conv_params(h, 1, 1)
    total += h + 1
    total += conv_params(c(cfg.levels - 1), cfg.proj_dim, 1)
    return total


class Seq(Layer):
    def __init__(self, *layers: Layer):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


def conv_norm_relu(cin, cout, rng, stride=1):
    return Seq(Conv3d(cin, cout, 3, stride, rng=rng), InstanceNorm3d(cout), ReLU())


class ResBlock(Layer):
    """relu(x + norm(conv(relu(norm(conv(x))))))."""

    def __init__(self, c: int, rng):
        super().__init__()
        self.body = Seq(Conv3d(c, c, 3, rng=rng), InstanceNorm3d(c), ReLU(),
                        Conv3d(c, c, 3, rng=rng), InstanceNorm3d(c))
        self.out = ReLU()

    def forward(self, x, train=False):
        return self.out.forward(x + self.body.forward(x, train), train)

    def backward(self, g):
        g = self.out.backward(g)
        return g + self.body.backward(g)


class Network:
    def __init__(self, cfg: NetworkConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c = cfg.channels
        self.encoder: List[Seq] = []
        for lvl in range(cfg.levels):
            entry = (conv_norm_relu(1, c(0), rng) if lvl == 0
                     else conv_norm_relu(c(lvl - 1), c(lvl), rng, stride=2))
            blocks = [ResBlock(c(lvl), rng) for _ in range(cfg.res_blocks)]
            self.encoder.append(Seq(entry, *blocks))
        self.dropout = Dropout(cfg.dropout, np.random.default_rng([cfg.seed, 1]))
        self.ups: List[TrilinearUpsample] = []
        self.decoder: List[Seq] = []
        for lvl in range(cfg.levels - 2, -1, -1):
            self.ups.append(TrilinearUpsample())
            self.decoder.append(conv_norm_relu(c(lvl + 1) + c(lvl), c(lvl), rng))
        self.head = conv_norm_relu(c(0), cfg.head_channels, rng)
        self.seg_head = Seq(Conv3d(cfg.head_channels, 1, 1, rng=rng), Sigmoid())
        self.dist_head = Conv3d(cfg.head_channels, 1, 1, rng=rng)
        self.slice_head = SliceHead(cfg.head_channels, rng=rng)
        self.proj_head = Conv3d(c(cfg.levels - 1), cfg.proj_dim, 1, rng=rng)
        self.training = False
        self._forward_done = False
        self._collect()

    # parameters -------------------------------------------------------
    def _named_layers(self):
        yield "encoder", self.encoder
        yield "decoder", self.decoder
        yield "head", self.head
        yield "seg_head", self.seg_head
        yield "dist_head", self.dist_head
        yield "slice_head", self.slice_head
        yield "proj_head", self.proj_head

    def _collect(self):
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.grads: "OrderedDict[str, np.ndarray]" = OrderedDict()

        def walk(prefix, obj):
            if isinstance(obj, (list, tuple)):
                for i, item in enumerate(obj):
                    walk(f"{prefix}.{i}", item)
                return
            for name in obj.params:
                self.params[f"{prefix}.{name}"] = obj.params[name]
                self.grads[f"{prefix}.{name}"] = obj.grads[name]
            if isinstance(obj, Seq):
                walk(prefix, obj.layers)
            elif isinstance(obj, ResBlock):
                walk(prefix + ".body", obj.body.layers)

        for name, obj in self._named_layers():
            walk(name, obj)

    @property
    def factor(self) -> int:
        return self.cfg.factor

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0.0

    def load_params(self, values: Dict[str, np.ndarray]):
        missing = set(self.params) - set(values)
        extra = set(values) - set(self.params)
        if missing or extra:
            raise ConfigError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in values.items():
            if self.params[k].shape != np.shape(v):
                raise ConfigError(f"shape mismatch for {k}: {self.params[k].shape} vs {np.shape(v)}")
            self.params[k][...] = v

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    # passes -------------------------------------------------------------
    def check_dims(self, dims: Sequence[int]):
        f = self.cfg.factor
        if any(n % f for n in dims):
            raise ShapeError(f"input dims {tuple(dims)} must be divisible by {f}")

    def forward_batch(self, x: np.ndarray) -> List[BranchOutputs]:
        """Forward a ``(N, D, H, W)`` or ``(N, 1, D, H, W)`` batch; one output per item."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 4:
            x = x[:, None]
        if x.ndim != 5 or x.shape[1] != 1:
            raise ShapeError(f"expected (N, 1, D, H, W) input, got {x.shape}")
        self.check_dims(x.shape[2:])
        train = self.training
        skips = []
        h = x
        for enc in self.encoder:
            h = enc.forward(h, train)
            skips.append(h)
        h = self.dropout.forward(h, train)
        proj = self.proj_head.forward(h, train)
        for i, (up, dec) in enumerate(zip(self.ups, self.decoder)):
            skip = skips[self.cfg.levels - 2 - i]
            h = dec.forward(np.concatenate([up.forward(h, train), skip], axis=1), train)
        feat = self.head.forward(h, train)
        seg = self.seg_head.forward(feat, train)[:, 0]
        dist = self.dist_head.forward(feat, train)[:, 0] * self.cfg.dist_scale
        sl = self.slice_head.forward(feat, train)
        self._forward_done = True
        self._batch = x.shape[0]
        return [BranchOutputs(seg[i], dist[i], sl[i], proj[i]) for i in range(x.shape[0])]

    def backward(self, grads: Sequence[Dict[str, np.ndarray]]):
        """Accumulate parameter gradients given per-item output gradients."""
        if not self._forward_done:
            raise StateError("backward called before forward")
        if len(grads) != self._batch:
            raise ShapeError(f"expected {self._batch} gradient dicts, got {len(grads)}")

        def stack(key, like):
            return np.stack([g[key] if key in g else np.zeros(like) for g in grads])

        seg_shape = self.seg_head.layers[-1]._cache.shape[2:]
        proj_shape = self.proj_head._cache[2]
        g_seg = stack("seg_prob", seg_shape)[:, None]
        g_dist = stack("dist_pred", seg_shape)[:, None] * self.cfg.dist_scale
        g_slice = stack("slice_prob", seg_shape[:1])
        g_proj = stack("features", (self.cfg.proj_dim,) + tuple(proj_shape))

        g_feat = (self.seg_head.backward(g_seg) + self.dist_head.backward(g_dist)
                  + self.slice_head.backward(g_slice))
        g = self.head.backward(g_feat)
        c = self.cfg.channels
        skip_grads = [None] * self.cfg.levels
        for i in range(len(self.decoder) - 1, -1, -1):
            lvl = self.cfg.levels - 2 - i
            gcat = self.decoder[i].backward(g)
            up_ch = c(lvl + 1)
            skip_grads[lvl] = gcat[:, up_ch:]
            g = self.ups[i].backward(np.ascontiguousarray(gcat[:, :up_ch]))
        g = g + self.proj_head.backward(g_proj)
        g = self.dropout.backward(g)
        for lvl in range(self.cfg.levels - 1, -1, -1):
            if skip_grads[lvl] is not None and lvl != self.cfg.levels - 1:
                g = g + skip_grads[lvl]
            g = self.encoder[lvl].backward(g)
        return g

    def forward(self, x) -> BranchOutputs:
        """Single-volume forward."""
        data = x.data if isinstance(x, Volume) else np.asarray(x)
        return self.forward_batch(data[None])[0]

    def predict(self, x: np.ndarray):
        """Eval-mode ``(seg_prob, dist_pred, slice_prob)`` for one ``(D, H, W)`` array."""
        was = self.training
        self.eval()
        try:
            out = self.forward(x)
        finally:
            self.training = was
        return out.seg_prob, out.dist_pred, out.slice_prob


def build(cfg: NetworkConfig = DESK) -> Network:
    return Network(cfg)


def forward(net: Network, x) -> BranchOutputs:
    return net.forward(x)


def config_dict(cfg: NetworkConfig) -> dict:
    return asdict(cfg)
