"""3D-2D registration network: two-channel encoder-decoder with
hierarchical transform-regression heads, trained without supervision
through the differentiable feature/image/motion loss.

The encoder downsamples three times (scales 1/2, 1/4, 1/8); the decoder
walks back up, and four heads regress 6*N_w rigid parameters at scales
1/8, 1/4, 1/2 and 1. Head translations are emitted in level-voxel units
and scaled to millimetres; heads are combined by rotation averaging and
resolution-weighted translation summing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg
from .errors import ConfigurationError, SizeError
from .geometry import (HEAD_TRANS_WEIGHTS, RigidParams, TransformWindow,
                       combine_hierarchical)
from .loss import LossWeights, write_loss_log
from .volume import MaskVolume, Volume, window_slab_slices


@dataclass
class RegNetConfig:
    enc_channels: tuple = (8, 16, 16)
    dec_channels: tuple = (16, 16, 16, 16, 8, 8)
    head_scales: tuple = (0.125, 0.25, 0.5, 1.0)
    n_w: int = 5
    rot_scale: float = 0.5        # radians
    trans_scale: float = 10.0     # level-voxels
    head_hidden: int = 64
    grid_dims: tuple = (32, 56, 72)
    spacing_mm: float = 3.2
    lr: float = 3e-4
    seed: int = 0

    def __post_init__(self):
        if len(self.head_scales) != 4:
            raise ConfigurationError("exactly 4 transform heads required")
        if list(self.head_scales) != sorted(self.head_scales) or \
                len(set(self.head_scales)) != 4:
            raise ConfigurationError("head scales must be strictly increasing")
        if self.n_w < 1 or self.n_w % 2 == 0:
            raise ConfigurationError("n_w must be odd and positive")
        if len(self.enc_channels) != 3 or len(self.dec_channels) != 6:
            raise ConfigurationError("encoder needs 3 levels, decoder 6 layers")


# decoder layer index after which each head taps, coarsest to finest
_HEAD_TAPS = (0, 1, 3, 5)
_UPSAMPLE_AFTER = (0, 1, 3)


class RegNet(dg.Network):
    def __init__(self, cfg: RegNetConfig):
        super().__init__(seed=cfg.seed)
        self.cfg = cfg
        ec, dc = cfg.enc_channels, cfg.dec_channels
        c_prev = 2
        for i, c in enumerate(ec):
            self._conv(f"enc{i}", c_prev, c)
            self._norm(f"encn{i}", c)
            c_prev = c
        for i, c in enumerate(dc):
            self._conv(f"dec{i}", c_prev, c)
            self._norm(f"decn{i}", c)
            c_prev = c
        for h, tap in enumerate(_HEAD_TAPS):
            c_tap = dc[tap]
            self.parameter(f"head{h}.fc1.w", (cfg.head_hidden, c_tap))
            self.parameter(f"head{h}.fc1.b", (cfg.head_hidden,), init="zeros")
            self.parameter(f"head{h}.fc2.w", (6 * cfg.n_w, cfg.head_hidden),
                           init="zeros")
            self.parameter(f"head{h}.fc2.b", (6 * cfg.n_w,), init="zeros")

    def _conv(self, name, c_in, c_out):
        self.parameter(f"{name}.w", (c_out, c_in, 3, 3, 3))
        self.parameter(f"{name}.b", (c_out,), init="zeros")

    def _norm(self, name, c):
        self.parameter(f"{name}.gamma", (c,), init="ones")
        self.parameter(f"{name}.beta", (c,), init="zeros")

    def _layer(self, name, norm, x, stride=(1, 1, 1)):
        h = dg.conv3d(x, self.params[f"{name}.w"], self.params[f"{name}.b"],
                      stride=stride)
        return dg.relu(dg.instance_norm(h, self.params[f"{norm}.gamma"],
                                        self.params[f"{norm}.beta"]))

    def _head(self, h, x) -> dg.Tensor:
        """(6*n_w,) tanh-bounded scaled parameters from one decoder tap."""
        cfg = self.cfg
        pooled = dg.global_mean(x)
        z = dg.relu(dg.dense(pooled, self.params[f"head{h}.fc1.w"],
                             self.params[f"head{h}.fc1.b"]))
        raw = dg.tanh(dg.dense(z, self.params[f"head{h}.fc2.w"],
                               self.params[f"head{h}.fc2.b"]))
        scale = np.tile(np.concatenate([
            np.full(3, cfg.rot_scale),
            np.full(3, cfg.trans_scale * cfg.spacing_mm)]),
            cfg.n_w).astype(np.float32)
        return raw * scale

    def forward(self, x: dg.Tensor):
        """Returns (combined (n_w, 6) Tensor, list of per-head Tensors)."""
        if x.shape != (2,) + tuple(self.cfg.grid_dims):
            raise SizeError(f"regnet expects (2, *{self.cfg.grid_dims}) input")
        h = x
        for i in range(3):
            h = self._layer(f"enc{i}", f"encn{i}", h, stride=(2, 2, 2))
        heads = []
        for i in range(6):
            h = self._layer(f"dec{i}", f"decn{i}", h)
            if len(heads) < 4 and i == _HEAD_TAPS[len(heads)]:
                heads.append(self._head(len(heads), h))
            if i in _UPSAMPLE_AFTER:
                h = dg.upsample_nearest(h, (2, 2, 2))
        n_w = self.cfg.n_w
        rot_w = np.tile(np.concatenate([np.full(3, 0.25), np.zeros(3)]),
                        n_w).astype(np.float32)
        combined = None
        for k, head in enumerate(heads):
            trans_w = np.tile(np.concatenate(
                [np.zeros(3), np.full(3, HEAD_TRANS_WEIGHTS[k])]),
                n_w).astype(np.float32)
            term = head * (rot_w + trans_w)
            combined = term if combined is None else combined + term
        return combined.reshape(n_w, 6), heads


def build_regnet(cfg: RegNetConfig) -> RegNet:
    return RegNet(cfg)


def _window_from_vector(vec: np.ndarray, n_w: int) -> TransformWindow:
    return TransformWindow.from_vector(np.asarray(vec, float).ravel(), n_w)


def predict_window(net: RegNet, ct_feat: MaskVolume, us_feat_slab: Volume):
    """(combined TransformWindow, per-level TransformWindows)."""
    if ct_feat.dims != tuple(net.cfg.grid_dims) or \
            us_feat_slab.dims != tuple(net.cfg.grid_dims):
        raise SizeError("inputs must live on the registration grid")
    x = dg.Tensor(np.stack([ct_feat.data, us_feat_slab.data])
                  .astype(np.float32))
    combined, heads = dg.forward_eval(net, x)
    n_w = net.cfg.n_w
    per_level = [_window_from_vector(h.data, n_w) for h in heads]
    window = combine_hierarchical(per_level)
    return window, per_level


def fim_loss_node(net: RegNet, params: dg.Tensor, pair,
                  fix_mind: np.ndarray,
                  w: LossWeights | None = None) -> dg.Tensor:
    """Differentiable loss matching loss.fim_total on the slab slices."""
    w = w or LossWeights()
    cfg = net.cfg
    zs = window_slab_slices(cfg.grid_dims[0], cfg.n_w)
    depths = list(zs)
    center = pair.fix_img.center_mm
    spacing = pair.fix_img.spacing
    warped_mask = dg.stn_slices(pair.mov_mask.data.astype(np.float64),
                                spacing, params, depths, center)
    dices = [dg.soft_dice_node(warped_mask[i], pair.fix_mask.data[z])
             for i, z in enumerate(depths)]
    feature = dices[0]
    for d in dices[1:]:
        feature = feature + d
    feature = -(feature / float(cfg.n_w))
    masked_mov = (pair.mov_img.data * pair.mov_mask.data).astype(np.float64)
    warped_img = dg.stn_slices(masked_mov, spacing, params, depths, center)
    mind = dg.mind_descriptors(warped_img)
    image = dg.absval(mind - fix_mind).mean()
    transform = dg.transform_loss_node(params, center)
    return feature + w.lambda1 * image + w.lambda2 * transform


def _pair_fix_mind(net: RegNet, pair) -> np.ndarray:
    from .mind import compute_mind
    zs = window_slab_slices(net.cfg.grid_dims[0], net.cfg.n_w)
    return compute_mind(pair.fix_img.data[zs.start:zs.stop])


def _pair_input(pair) -> dg.Tensor:
    return dg.Tensor(np.stack([pair.mov_mask.data, pair.fix_mask.data])
                     .astype(np.float32))


def _train_step(net: RegNet, pair, fix_mind, state, lr) -> float:
    net.training = True
    params, _ = net.forward(_pair_input(pair))
    loss = fim_loss_node(net, params, pair, fix_mind)
    net.zero_grad()
    grads = dg.backward_grads(net, loss)
    dg.adam_step(net.trainable(), grads, state, lr)
    net.training = False
    return float(loss.data)


def _eval_loss(net: RegNet, pair, fix_mind) -> float:
    params, _ = dg.forward_eval(net, _pair_input(pair))
    return float(fim_loss_node(net, params, pair, fix_mind).data)


def _fix_mind_cache(net: RegNet):
    """Per-run memo of the fixed-side descriptor field; generated pairs
    share one fixed image, so computing it per pair would be pure waste."""
    cache: dict[int, np.ndarray] = {}

    def get(pair):
        key = id(pair.fix_img)
        if key not in cache:
            cache[key] = _pair_fix_mind(net, pair)
        return cache[key]

    return get


def pretrain(net: RegNet, pairs: list, epochs: int,
             lr: float | None = None, val_fraction: float = 0.2,
             log_path=None, on_epoch=None, val_every: int = 1) -> dict:
    """Unsupervised training with an 80/20 train/validation split.

    Returns {"train": per-epoch mean train loss, "val": per-epoch mean
    validation loss}.  ``val_every`` thins the validation passes: epochs
    that are skipped repeat the most recent measured value, but the first
    and last epoch are always evaluated.
    """
    if not pairs:
        raise ConfigurationError("no training pairs")
    lr = lr if lr is not None else net.cfg.lr
    rng = np.random.default_rng(net.seed)
    order = rng.permutation(len(pairs))
    n_val = max(1, int(round(val_fraction * len(pairs)))) \
        if len(pairs) > 1 else 0
    val_idx = order[:n_val]
    train_idx = order[n_val:]
    fix_mind = _fix_mind_cache(net)
    minds = {i: fix_mind(pairs[i]) for i in range(len(pairs))}
    state = dg.AdamState()
    history = {"train": [], "val": []}
    rows = []
    val_mean = None
    for epoch in range(epochs):
        losses = [_train_step(net, pairs[i], minds[i], state, lr)
                  for i in train_idx]
        if epoch == 0 or epoch == epochs - 1 or epoch % val_every == 0:
            val_losses = [_eval_loss(net, pairs[i], minds[i])
                          for i in val_idx]
            val_mean = float(np.mean(val_losses)) if len(val_losses) \
                else float(np.mean(losses))
        history["train"].append(float(np.mean(losses)))
        history["val"].append(val_mean)
        rows.append({"epoch": epoch, "feature": history["val"][-1],
                     "image": 0.0, "transform": 0.0,
                     "total": history["train"][-1]})
        if on_epoch is not None:
            on_epoch(epoch, history["train"][-1], history["val"][-1])
    if log_path is not None:
        write_loss_log(log_path, rows)
    return history


def transfer_one_cycle(net: RegNet, cycle_pairs: list, epochs: int = 2,
                       lr: float | None = None) -> RegNet:
    """Fine-tune a copy of the model on one respiration cycle's windows;
    the input model is left untouched."""
    if not cycle_pairs:
        raise ConfigurationError("empty transfer cycle")
    adapted = build_regnet(net.cfg)
    adapted.load_state_dict(net.state_dict())
    lr = lr if lr is not None else net.cfg.lr
    state = dg.AdamState()
    fix_mind = _fix_mind_cache(adapted)
    for _ in range(epochs):
        for pair in cycle_pairs:
            _train_step(adapted, pair, fix_mind(pair), state, lr)
    return adapted


def sequence_pairs(ref, case, n_w: int | None = None) -> list:
    """One inference sample per frame: the reference CT side against each
    clamped frame window of the sequence."""
    from .datagen import ReferencePair
    from .volume import build_us_window
    n_w = n_w or ref.n_w
    out = []
    for t in range(case.n_frames):
        fix_img = build_us_window(case.frame_window(t, n_w), ref.fix_img.dims)
        fix_mask = build_us_window(case.frame_window(t, n_w, maps=True),
                                   ref.fix_img.dims)
        out.append(ReferencePair(ref.mov_img, ref.mov_mask, fix_img,
                                 fix_mask, n_w))
    return out


def register_sequence(net: RegNet, ct_feat: MaskVolume,
                      sequence: list) -> list[RigidParams]:
    """Middle-slot transform of each frame's window sample."""
    if len(sequence) < 1:
        raise ConfigurationError("empty sequence")
    mid = net.cfg.n_w // 2
    out = []
    for pair in sequence:
        window, _ = predict_window(net, ct_feat, pair.fix_mask)
        out.append(window.frames[mid])
    return out


def sequence_loss(net: RegNet, sequence: list) -> float:
    """Mean evaluated loss over a sequence's window samples."""
    return float(np.mean([_eval_loss(net, p, _pair_fix_mind(net, p))
                          for p in sequence]))
