"""Segmentation / feature network: U-Net with residual blocks and local
binary convolutions on the skip connections. Produces kidney feature maps
in [0, 1] on the input grid; the time axis is never downsampled for
windowed frame stacks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffgraph as dg
from .errors import ConfigurationError, SizeError
from .loss import write_loss_log
from .volume import MaskVolume, Volume


@dataclass
class FeatNetConfig:
    levels: int = 3
    channels: tuple = (8, 16, 32)
    input_dims: tuple = (5, 64, 64)   # (time/depth, H, W)
    dropout: float = 0.2
    downsample_time: bool = False
    lr: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if len(self.channels) != self.levels:
            raise ConfigurationError("channels length must equal levels")
        factor = 2 ** (self.levels - 1)
        checked = self.input_dims if self.downsample_time \
            else self.input_dims[1:]
        if any(d % factor for d in checked):
            raise ConfigurationError(
                f"downsampled dims {checked} must divide {factor}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must be in [0, 1)")

    @property
    def down_factors(self) -> tuple:
        return (2, 2, 2) if self.downsample_time else (1, 2, 2)


def paper_us_config() -> FeatNetConfig:
    """Full-scale preset for windowed frame stacks (untested at desk)."""
    return FeatNetConfig(levels=5, channels=(16, 32, 64, 128, 256),
                         input_dims=(5, 256, 192))


class FeatNet(dg.Network):
    def __init__(self, cfg: FeatNetConfig):
        super().__init__(seed=cfg.seed)
        self.cfg = cfg
        ch = cfg.channels
        self._block_params("enc0", 1, ch[0])
        for i in range(1, cfg.levels):
            self._conv_params(f"down{i}", ch[i - 1], ch[i], k=3)
            self._block_params(f"enc{i}", ch[i], ch[i])
        for i in range(cfg.levels - 2, -1, -1):
            self._conv_params(f"up{i}", ch[i + 1], ch[i], k=3)
            self._block_params(f"dec{i}", 2 * ch[i], ch[i])
            self._lbc_params(f"skip{i}", ch[i])
        self._conv_params("head", ch[0], 1, k=1)

    # -- parameter groups ---------------------------------------------------

    def _conv_params(self, name, c_in, c_out, k):
        self.parameter(f"{name}.w", (c_out, c_in, k, k, k))
        self.parameter(f"{name}.b", (c_out,), init="zeros")

    def _norm_params(self, name, c):
        self.parameter(f"{name}.gamma", (c,), init="ones")
        self.parameter(f"{name}.beta", (c,), init="zeros")

    def _block_params(self, name, c_in, c_out):
        self._conv_params(f"{name}.conv1", c_in, c_out, k=3)
        self._norm_params(f"{name}.norm1", c_out)
        self._conv_params(f"{name}.conv2", c_out, c_out, k=3)
        self._norm_params(f"{name}.norm2", c_out)
        if c_in != c_out:
            self._conv_params(f"{name}.proj", c_in, c_out, k=1)

    def _lbc_params(self, name, c):
        self.constant(f"{name}.anchor",
                      dg.make_lbc_filters(self.rng, c, c))
        self._conv_params(f"{name}.mix", c, c, k=1)

    # -- forward ------------------------------------------------------------

    def _conv(self, name, x, stride=(1, 1, 1)):
        return dg.conv3d(x, self.params[f"{name}.w"], self.params[f"{name}.b"],
                         stride=stride)

    def _block(self, name, x):
        h = dg.relu(dg.instance_norm(self._conv(f"{name}.conv1", x),
                                     self.params[f"{name}.norm1.gamma"],
                                     self.params[f"{name}.norm1.beta"]))
        h = dg.instance_norm(self._conv(f"{name}.conv2", h),
                             self.params[f"{name}.norm2.gamma"],
                             self.params[f"{name}.norm2.beta"])
        skip = self._conv(f"{name}.proj", x) \
            if f"{name}.proj.w" in self.params else x
        return dg.relu(h + skip)

    def _lbc(self, name, x):
        fixed = dg.conv3d(x, self.params[f"{name}.anchor"])
        return self._conv(f"{name}.mix", dg.relu(fixed))

    def forward(self, x: dg.Tensor) -> dg.Tensor:
        cfg = self.cfg
        down = cfg.down_factors
        feats = []
        h = self._block("enc0", x)
        for i in range(1, cfg.levels):
            feats.append(h)
            h = dg.dropout(h, cfg.dropout, self.rng, self.training)
            h = self._conv(f"down{i}", h, stride=down)
            h = self._block(f"enc{i}", h)
        for i in range(cfg.levels - 2, -1, -1):
            h = dg.upsample_nearest(h, down)
            h = self._conv(f"up{i}", h)
            h = dg.concat([h, self._lbc(f"skip{i}", feats[i])], axis=0)
            h = self._block(f"dec{i}", h)
        return dg.sigmoid(self._conv("head", h))


def build_ulbnet(cfg: FeatNetConfig) -> FeatNet:
    return FeatNet(cfg)


def _check_dims(net: FeatNet, dims):
    if tuple(dims) != tuple(net.cfg.input_dims):
        raise SizeError(f"input dims {tuple(dims)} do not match "
                        f"config {tuple(net.cfg.input_dims)}")


def infer_feature(net: FeatNet, v: Volume) -> MaskVolume:
    """Feature map in [0, 1] on the input grid; dropout disabled."""
    _check_dims(net, v.dims)
    x = dg.Tensor(v.data[None].astype(np.float32))
    out = dg.forward_eval(net, x)
    return MaskVolume(np.clip(out.data[0], 0.0, 1.0).astype(np.float32),
                      v.spacing, v.orientation)


def dice_coefficient_node(pred: dg.Tensor, target: np.ndarray,
                          eps: float = 1e-6) -> dg.Tensor:
    """Global soft Dice 2*sum(p*t)/(sum(p)+sum(t)); the usual training
    objective — unlike the registration feature term it penalizes false
    positives, which segmentation training needs."""
    t = dg.Tensor(np.asarray(target, dtype=pred.data.dtype))
    num = (pred * t).sum() * 2.0
    den = pred.sum() + float(target.sum()) + eps
    return num / den


def train_segmentation(net: FeatNet, cases: list, epochs: int,
                       lr: float | None = None,
                       log_path=None) -> list[float]:
    """Minus-Dice Adam training; returns the per-epoch mean loss history."""
    if not cases:
        raise ConfigurationError("no training cases")
    lr = lr if lr is not None else net.cfg.lr
    for v, m in cases:
        _check_dims(net, v.dims)
        if v.dims != m.dims:
            raise SizeError("image and mask grids differ")
    state = dg.AdamState()
    history = []
    rows = []
    for epoch in range(epochs):
        net.training = True
        total = 0.0
        for v, m in cases:
            x = dg.Tensor(v.data[None].astype(np.float32))
            pred = net.forward(x)
            dice = dice_coefficient_node(pred.reshape(*v.dims),
                                         m.data.astype(np.float32))
            loss = -dice
            total += float(loss.data)
            net.zero_grad()
            grads = dg.backward_grads(net, loss)
            dg.adam_step(net.trainable(), grads, state, lr)
        net.training = False
        mean = total / len(cases)
        history.append(mean)
        rows.append({"epoch": epoch, "feature": mean, "image": 0.0,
                     "transform": 0.0, "total": mean})
    if log_path is not None:
        write_loss_log(log_path, rows)
    return history
