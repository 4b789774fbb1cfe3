"""Minimal reverse-mode differentiable compute core.

Tensors wrap numpy arrays; every op returns a new Tensor carrying a
closure that accumulates gradients into its parents (micrograd style,
at array granularity). Stride-1 convolutions run through numba-compiled
direct kernels; strided convolutions fall back to im2col + GEMM.

The rigid spatial-transformer sampler differentiates analytically
through the trilinear weights and the Euler-angle matrix derivatives;
no gradient flows into the sampled volume.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import ConfigurationError, SizeError
from .geometry import _axis_rotation, euler_to_rotation

# ---------------------------------------------------------------------------
# tensor core


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def backward(self):
        if self.data.size != 1:
            raise SizeError("backward requires a scalar loss")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents)
        for t in order:
            t.grad = None
        self.grad = np.ones_like(self.data)
        for t in reversed(order):
            if t._backward is not None and t.grad is not None and t.requires_grad:
                t._backward(t.grad)

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            dt = np.result_type(self.data, g)
            first = np.array(g, dtype=dt)  # always a fresh buffer
            if first.shape != self.data.shape:
                first = np.broadcast_to(first, self.data.shape).astype(dt)
            self.grad = first
        else:
            self.grad += g

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)

        def bwd(g):
            self._accum(_unbroadcast(g, self.shape))
            other._accum(_unbroadcast(g, other.shape))

        return Tensor(self.data + other.data, parents=(self, other), backward=bwd)

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, parents=(self,),
                      backward=lambda g: self._accum(-g))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)

        def bwd(g):
            self._accum(_unbroadcast(g * other.data, self.shape))
            other._accum(_unbroadcast(g * self.data, other.shape))

        return Tensor(self.data * other.data, parents=(self, other), backward=bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)

        def bwd(g):
            self._accum(_unbroadcast(g / other.data, self.shape))
            other._accum(_unbroadcast(-g * self.data / other.data ** 2, other.shape))

        return Tensor(self.data / other.data, parents=(self, other), backward=bwd)

    def __getitem__(self, key):
        def bwd(g):
            full = np.zeros_like(self.data, dtype=g.dtype)
            np.add.at(full, key, g)
            self._accum(full)

        return Tensor(self.data[key], parents=(self,), backward=bwd)

    def reshape(self, *shape):
        def bwd(g):
            self._accum(g.reshape(self.shape))

        return Tensor(self.data.reshape(*shape), parents=(self,), backward=bwd)

    def sum(self):
        def bwd(g):
            self._accum(np.broadcast_to(g, self.shape).copy())

        return Tensor(self.data.sum(), parents=(self,), backward=bwd)

    def mean(self):
        n = self.data.size

        def bwd(g):
            self._accum(np.broadcast_to(g / n, self.shape).copy())

        return Tensor(self.data.mean(), parents=(self,), backward=bwd)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _unbroadcast(g, shape):
    """Sum gradient g down to a broadcast operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise nonlinearities ---------------------------------------------


def exp(t: Tensor) -> Tensor:
    out_data = np.exp(t.data)
    out = Tensor(out_data, parents=(t,), backward=lambda g: t._accum(g * out_data))
    return out


def absval(t: Tensor) -> Tensor:
    return Tensor(np.abs(t.data), parents=(t,),
                  backward=lambda g: t._accum(g * np.sign(t.data)))


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0
    return Tensor(t.data * mask, parents=(t,),
                  backward=lambda g: t._accum(g * mask))


def tanh(t: Tensor) -> Tensor:
    out_data = np.tanh(t.data)
    return Tensor(out_data, parents=(t,),
                  backward=lambda g: t._accum(g * (1.0 - out_data ** 2)))


def sigmoid(t: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-t.data))
    return Tensor(out_data, parents=(t,),
                  backward=lambda g: t._accum(g * out_data * (1.0 - out_data)))


def clamp_min(t: Tensor, lo: float) -> Tensor:
    mask = t.data > lo
    return Tensor(np.maximum(t.data, lo), parents=(t,),
                  backward=lambda g: t._accum(g * mask))


def amax(t: Tensor, axis: int, keepdims=True) -> Tensor:
    """Max along one axis; gradient goes to the (first) argmax entries."""
    idx = np.argmax(t.data, axis=axis)
    out_data = np.max(t.data, axis=axis, keepdims=keepdims)
    onehot = np.zeros_like(t.data)
    np.put_along_axis(onehot, np.expand_dims(idx, axis), 1.0, axis=axis)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        t._accum(onehot * g)

    return Tensor(out_data, parents=(t,), backward=bwd)


def concat(tensors: list[Tensor], axis=0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accum(g[tuple(sl)])

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                  parents=tuple(tensors), backward=bwd)


def stack(tensors: list[Tensor], axis=0) -> Tensor:
    def bwd(g):
        for i, t in enumerate(tensors):
            t._accum(np.take(g, i, axis=axis))

    return Tensor(np.stack([t.data for t in tensors], axis=axis),
                  parents=tuple(tensors), backward=bwd)


def pad_symmetric(t: Tensor, width: int) -> Tensor:
    """Mirror-pad all axes by ``width``; backward folds mirrored gradient back."""
    out_data = np.pad(t.data, width, mode="symmetric")
    src = [np.pad(np.arange(n), width, mode="symmetric") for n in t.shape]
    flat_idx = np.ravel_multi_index(np.meshgrid(*src, indexing="ij"), t.shape)

    def bwd(g):
        acc = np.zeros(t.data.size, dtype=g.dtype)
        np.add.at(acc, flat_idx.ravel(), g.ravel())
        t._accum(acc.reshape(t.shape))

    return Tensor(out_data, parents=(t,), backward=bwd)


def axis_conv3(t: Tensor, axis: int, kernel) -> Tensor:
    """Valid 3-tap convolution along one axis (output shrinks by 2)."""
    kernel = np.asarray(kernel, dtype=t.data.dtype)
    n = t.shape[axis] - 2
    sls = []
    for k in range(3):
        sl = [slice(None)] * t.data.ndim
        sl[axis] = slice(k, k + n)
        sls.append(tuple(sl))
    out_data = sum(kernel[k] * t.data[sls[k]] for k in range(3))

    def bwd(g):
        acc = np.zeros_like(t.data, dtype=g.dtype)
        for k in range(3):
            acc[sls[k]] += kernel[k] * g
        t._accum(acc)

    return Tensor(out_data, parents=(t,), backward=bwd)


# ---------------------------------------------------------------------------
# neural-network layers


@njit(cache=True, fastmath=True)
def _conv_fwd_s1(xp, w, out):  # pragma: no cover - exercised via conv3d
    """Stride-1 same-padded correlation; xp is the padded input."""
    c_out, d, h, wd = out.shape
    c_in, kz, ky, kx = w.shape[1], w.shape[2], w.shape[3], w.shape[4]
    tmp = np.empty((c_out, wd), dtype=xp.dtype)
    for z in range(d):
        for y in range(h):
            for oc in range(c_out):
                for x in range(wd):
                    tmp[oc, x] = 0.0
            for c in range(c_in):
                for dz in range(kz):
                    for dy in range(ky):
                        base = xp[c, z + dz, y + dy]
                        for oc in range(c_out):
                            trow = tmp[oc]
                            for dx in range(kx):
                                wv = w[oc, c, dz, dy, dx]
                                for x in range(wd):
                                    trow[x] += wv * base[x + dx]
            for oc in range(c_out):
                for x in range(wd):
                    out[oc, z, y, x] = tmp[oc, x]


@njit(cache=True, fastmath=True)
def _conv_dw_s1(xp, g, dw):  # pragma: no cover - exercised via conv3d
    """Weight gradient of the stride-1 convolution."""
    c_out, d, h, wd = g.shape
    c_in, kz, ky, kx = dw.shape[1], dw.shape[2], dw.shape[3], dw.shape[4]
    tmp = np.empty(wd, dtype=xp.dtype)
    for oc in range(c_out):
        for c in range(c_in):
            for dz in range(kz):
                for dy in range(ky):
                    for dx in range(kx):
                        for x in range(wd):
                            tmp[x] = 0.0
                        for z in range(d):
                            for y in range(h):
                                grow = g[oc, z, y]
                                base = xp[c, z + dz, y + dy]
                                for x in range(wd):
                                    tmp[x] += grow[x] * base[x + dx]
                        acc = 0.0
                        for x in range(wd):
                            acc += tmp[x]
                        dw[oc, c, dz, dy, dx] = acc


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=(1, 1, 1)) -> Tensor:
    """Same-padded (zero) 3D convolution; x is (C_in, D, H, W)."""
    c_out, c_in, kd, kh, kw = weight.shape
    if x.shape[0] != c_in:
        raise SizeError(f"conv3d expected {c_in} input channels, got {x.shape[0]}")
    stride = tuple(int(s) for s in stride)
    pads = [(k // 2, k // 2) for k in (kd, kh, kw)]
    xp = np.pad(x.data, [(0, 0)] + pads)
    out_dims = tuple(-(-n // s) for n, s in zip(x.shape[1:], stride))
    n_out = int(np.prod(out_dims))
    n_tap = kd * kh * kw
    fast = stride == (1, 1, 1) and x.data.dtype == weight.data.dtype \
        and x.data.dtype in (np.float32, np.float64)

    if fast:
        out_data = np.empty((c_out,) + out_dims, dtype=x.data.dtype)
        _conv_fwd_s1(xp, weight.data, out_data)
        if bias is not None:
            out_data += bias.data[:, None, None, None]
        cols = wmat = None
    else:
        tap_slices = []
        for tz in range(kd):
            for ty in range(kh):
                for tx in range(kw):
                    tap_slices.append((slice(None),
                                       slice(tz, tz + stride[0] * out_dims[0],
                                             stride[0]),
                                       slice(ty, ty + stride[1] * out_dims[1],
                                             stride[1]),
                                       slice(tx, tx + stride[2] * out_dims[2],
                                             stride[2])))

        # im2col: one (C_in*taps, n_out) matrix => a single GEMM per direction
        cols = np.empty((c_in, n_tap, n_out), dtype=xp.dtype)
        for t, sl in enumerate(tap_slices):
            cols[:, t] = xp[sl].reshape(c_in, n_out)
        cols = cols.reshape(c_in * n_tap, n_out)
        wmat = weight.data.reshape(c_out, c_in * n_tap)
        out = wmat @ cols
        if bias is not None:
            out += bias.data[:, None]
        out_data = out.reshape((c_out,) + out_dims)

    def bwd(g):
        if fast:
            g3 = np.ascontiguousarray(
                g.reshape((c_out,) + out_dims).astype(x.data.dtype,
                                                      copy=False))
            if bias is not None and bias.requires_grad:
                bias._accum(g3.sum(axis=(1, 2, 3)))
            if weight.requires_grad:
                dw = np.empty_like(weight.data)
                _conv_dw_s1(xp, g3, dw)
                weight._accum(dw)
            if x.requires_grad:
                # input gradient = correlation of g with the flipped kernel
                wrev = np.ascontiguousarray(
                    weight.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
                gp = np.pad(g3, [(0, 0)] + pads)
                dx = np.empty_like(x.data)
                _conv_fwd_s1(gp, wrev, dx)
                x._accum(dx)
            return
        g = np.asarray(g, dtype=cols.dtype)
        gf = g.reshape(c_out, n_out)
        if bias is not None and bias.requires_grad:
            bias._accum(gf.sum(axis=1))
        if weight.requires_grad:
            weight._accum((gf @ cols.T).reshape(weight.data.shape))
        if x.requires_grad:
            dcols = (wmat.T @ gf).reshape(c_in, n_tap, n_out)
            dxp = np.zeros_like(xp)
            for t, sl in enumerate(tap_slices):
                dxp[sl] += dcols[:, t].reshape((c_in,) + out_dims)
            x._accum(dxp[:, pads[0][0]:pads[0][0] + x.shape[1],
                         pads[1][0]:pads[1][0] + x.shape[2],
                         pads[2][0]:pads[2][0] + x.shape[3]])

    return Tensor(out_data, parents=tuple(p for p in (x, weight, bias)
                                          if p is not None), backward=bwd)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x (n,) -> weight (m, n) @ x + bias (m,)."""

    def bwd(g):
        weight._accum(np.outer(g, x.data))
        bias._accum(g)
        if x.requires_grad:
            x._accum(weight.data.T @ g)

    return Tensor(weight.data @ x.data + bias.data, parents=(x, weight, bias),
                  backward=bwd)


def upsample_nearest(x: Tensor, factors) -> Tensor:
    """Nearest-neighbour upsampling of (C, D, H, W) by per-axis factors."""
    factors = tuple(int(f) for f in factors)
    out_data = x.data
    for ax, f in enumerate(factors, start=1):
        if f != 1:
            out_data = np.repeat(out_data, f, axis=ax)

    def bwd(g):
        for ax, f in enumerate(factors, start=1):
            if f != 1:
                shape = list(g.shape)
                shape[ax] //= f
                shape.insert(ax + 1, f)
                g = g.reshape(shape).sum(axis=ax + 1)
        x._accum(g)

    return Tensor(out_data, parents=(x,), backward=bwd)


@njit(cache=True, fastmath=True)
def _in_fwd(x2, gamma, beta, eps, xhat2, out2, inv):
    # pragma: no cover - exercised via instance_norm
    c, n = x2.shape
    for ch in range(c):
        s = 0.0
        for i in range(n):
            s += x2[ch, i]
        mu = s / n
        v = 0.0
        for i in range(n):
            d = x2[ch, i] - mu
            v += d * d
        ivc = 1.0 / np.sqrt(v / n + eps)
        inv[ch] = ivc
        gc, bc = gamma[ch], beta[ch]
        for i in range(n):
            xh = (x2[ch, i] - mu) * ivc
            xhat2[ch, i] = xh
            out2[ch, i] = xh * gc + bc


@njit(cache=True, fastmath=True)
def _in_bwd(g2, xhat2, inv, gamma, dgamma, dbeta, dx2, want_dx):
    # pragma: no cover - exercised via instance_norm
    c, n = g2.shape
    for ch in range(c):
        s1 = 0.0
        s2 = 0.0
        for i in range(n):
            s1 += g2[ch, i] * xhat2[ch, i]
            s2 += g2[ch, i]
        dgamma[ch] = s1
        dbeta[ch] = s2
        if want_dx:
            k = inv[ch] * gamma[ch]
            m1 = s1 / n
            m2 = s2 / n
            for i in range(n):
                dx2[ch, i] = k * (g2[ch, i] - m2 - xhat2[ch, i] * m1)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor,
                  eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of (C, D, H, W) over the spatial axes."""
    c = x.shape[0]
    n = int(np.prod(x.shape[1:]))
    x2 = np.ascontiguousarray(x.data).reshape(c, n)
    xhat2 = np.empty_like(x2)
    out2 = np.empty_like(x2)
    inv = np.empty(c, dtype=x2.dtype)
    _in_fwd(x2, gamma.data.astype(x2.dtype), beta.data.astype(x2.dtype),
            eps, xhat2, out2, inv)

    def bwd(g):
        g2 = np.ascontiguousarray(g, dtype=x2.dtype).reshape(c, n)
        dgamma = np.empty(c, dtype=x2.dtype)
        dbeta = np.empty(c, dtype=x2.dtype)
        dx2 = np.empty_like(g2) if x.requires_grad else g2
        _in_bwd(g2, xhat2, inv, gamma.data.astype(x2.dtype),
                dgamma, dbeta, dx2, x.requires_grad)
        gamma._accum(dgamma.astype(gamma.data.dtype, copy=False))
        beta._accum(dbeta.astype(beta.data.dtype, copy=False))
        if x.requires_grad:
            x._accum(dx2.reshape(x.shape))

    return Tensor(out2.reshape(x.shape), parents=(x, gamma, beta),
                  backward=bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator,
            training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def bwd(g):
        x._accum(g * keep)

    return Tensor(x.data * keep, parents=(x,), backward=bwd)


def global_mean(x: Tensor) -> Tensor:
    """(C, D, H, W) -> (C,) spatial average (global average pooling)."""
    n = int(np.prod(x.shape[1:]))

    def bwd(g):
        x._accum(np.broadcast_to(g.reshape(-1, 1, 1, 1) / n, x.shape).copy())

    return Tensor(x.data.mean(axis=(1, 2, 3)), parents=(x,), backward=bwd)


def make_lbc_filters(rng: np.random.Generator, c_out: int, c_in: int,
                     k: int = 3, sparsity: float = 0.5) -> np.ndarray:
    """Fixed ternary {-1, 0, +1} filters, ~``sparsity`` fraction zero."""
    u = rng.random((c_out, c_in, k, k, k))
    signs = rng.choice([-1.0, 1.0], size=u.shape)
    return np.where(u < sparsity, 0.0, signs).astype(np.float32)


# ---------------------------------------------------------------------------
# rigid transforms in-graph


def _rotation_and_derivatives(rot):
    """R = R2 R1 R0 and its three partial derivatives dR/dr_i."""
    mats = [_axis_rotation(ax, a) for ax, a in enumerate(rot)]
    derivs = []
    for ax, a in enumerate(rot):
        c, s = np.cos(a), np.sin(a)
        d = np.zeros((3, 3))
        i, j = [(1, 2), (0, 2), (0, 1)][ax]
        d[i, i] = -s
        d[j, j] = -s
        d[i, j] = -c if ax != 1 else c
        d[j, i] = c if ax != 1 else -c
        derivs.append(d)
    r = mats[2] @ mats[1] @ mats[0]
    dr = [mats[2] @ mats[1] @ derivs[0],
          mats[2] @ derivs[1] @ mats[0],
          derivs[2] @ mats[1] @ mats[0]]
    return r, dr


def matrix_and_derivatives(params6, center):
    """4x4 matrix of params_to_matrix plus d(matrix)/d(each of 6 params)."""
    rot, trans = params6[:3], params6[3:]
    center = np.asarray(center, dtype=np.float64)
    r, dr = _rotation_and_derivatives(rot)
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = trans + center - r @ center
    dms = []
    for k in range(3):
        dm = np.zeros((4, 4))
        dm[:3, :3] = dr[k]
        dm[:3, 3] = -dr[k] @ center
        dms.append(dm)
    for k in range(3):
        dm = np.zeros((4, 4))
        dm[k, 3] = 1.0
        dms.append(dm)
    return m, dms


def _trilinear_with_grad(volume: np.ndarray, pts: np.ndarray):
    """Trilinear samples and d(sample)/d(index coords); corners outside the
    grid contribute value 0 (and zero gradient)."""
    dims = volume.shape
    i0 = np.floor(pts).astype(np.int64)
    f = pts - i0
    vals = np.zeros(pts.shape[0])
    grads = np.zeros_like(pts)
    for cz in (0, 1):
        for cy in (0, 1):
            for cx in (0, 1):
                idx = i0 + (cz, cy, cx)
                ok = np.all((idx >= 0) & (idx < dims), axis=1)
                v = np.zeros(pts.shape[0])
                v[ok] = volume[idx[ok, 0], idx[ok, 1], idx[ok, 2]]
                wz = f[:, 0] if cz else 1.0 - f[:, 0]
                wy = f[:, 1] if cy else 1.0 - f[:, 1]
                wx = f[:, 2] if cx else 1.0 - f[:, 2]
                dz = 1.0 if cz else -1.0
                dy = 1.0 if cy else -1.0
                dx = 1.0 if cx else -1.0
                vals += v * wz * wy * wx
                grads[:, 0] += v * dz * wy * wx
                grads[:, 1] += v * wz * dy * wx
                grads[:, 2] += v * wz * wy * dx
    return vals, grads


def stn_slices(volume: np.ndarray, spacing, params: Tensor, depths,
               center) -> Tensor:
    """Differentiable rigid resampler onto the window's slab planes.

    ``params`` is (n_w, 6); frame i's output plane (at depth ``depths[i]``)
    pulls samples from ``volume`` through the inverse of its rigid matrix.
    Gradients flow to the parameters only.
    """
    params_data = np.asarray(params.data, dtype=np.float64)
    if params_data.ndim != 2 or params_data.shape[1] != 6:
        raise SizeError("stn expects (n_w, 6) parameters")
    if len(depths) != params_data.shape[0]:
        raise SizeError("one depth plane per frame required")
    spacing = np.asarray(spacing, dtype=np.float64)
    d_, h_, w_ = volume.shape
    yy, xx = np.meshgrid(np.arange(h_), np.arange(w_), indexing="ij")
    out = np.zeros((len(depths), h_, w_))
    per_frame = []
    for i, z in enumerate(depths):
        m, dms = matrix_and_derivatives(params_data[i], center)
        minv = np.linalg.inv(m)
        pts_mm = np.stack([np.full(yy.size, float(z)), yy.ravel().astype(float),
                           xx.ravel().astype(float)], axis=1) * spacing
        src_mm = pts_mm @ minv[:3, :3].T + minv[:3, 3]
        src_idx = src_mm / spacing
        vals, gidx = _trilinear_with_grad(volume, src_idx)
        out[i] = vals.reshape(h_, w_)
        # d(src_mm)/d(param k) = (-Minv dM Minv) applied to pts
        dsrc = []
        for dm in dms:
            a = -minv @ dm @ minv
            dsrc.append(pts_mm @ a[:3, :3].T + a[:3, 3])
        per_frame.append((gidx / spacing, dsrc))

    def bwd(g):
        dp = np.zeros_like(params_data)
        for i in range(len(depths)):
            gi = g[i].ravel()
            gmm, dsrc = per_frame[i]
            for k in range(6):
                dp[i, k] = np.sum(gi * np.sum(gmm * dsrc[k], axis=1))
        params._accum(dp.astype(params.data.dtype))

    return Tensor(out, parents=(params,), backward=bwd)


def transform_loss_node(params: Tensor, center, l2_weight=0.01,
                        grad_weight=0.99) -> Tensor:
    """Differentiable Eq-style transform regularizer over (n_w, 6) params."""
    params_data = np.asarray(params.data, dtype=np.float64)
    n_w = params_data.shape[0]
    mats, dmats = zip(*[matrix_and_derivatives(p, center) for p in params_data])
    eye = np.eye(4)
    diffs = [m - eye for m in mats]
    norms = [np.linalg.norm(d) for d in diffs]
    l2 = sum(norms) / n_w
    grad_terms = []
    if n_w >= 3:
        for i in range(1, n_w - 1):
            a = mats[i + 1] + mats[i - 1] - 2 * mats[i]
            grad_terms.append((i, a, np.linalg.norm(a)))
    grad_val = sum(n for _, _, n in grad_terms) / max(n_w - 2, 1)
    value = l2_weight * l2 + grad_weight * grad_val

    def bwd(g):
        dp = np.zeros_like(params_data)
        for i in range(n_w):
            if norms[i] > 1e-12:
                direction = diffs[i] / norms[i]
                for k in range(6):
                    dp[i, k] += l2_weight / n_w * np.sum(direction * dmats[i][k])
        for i, a, n in grad_terms:
            if n <= 1e-12:
                continue
            direction = a / n
            scale = grad_weight / (n_w - 2)
            for j, coef in ((i - 1, 1.0), (i, -2.0), (i + 1, 1.0)):
                for k in range(6):
                    dp[j, k] += scale * coef * np.sum(direction * dmats[j][k])
        params._accum(float(g) * dp.astype(params.data.dtype))

    return Tensor(np.array(value), parents=(params,), backward=bwd)


# ---------------------------------------------------------------------------
# differentiable loss building blocks (mirror the pure-numpy mind/loss path)


def gaussian_kernel3(sigma: float) -> np.ndarray:
    w = np.exp(-np.arange(-1, 2) ** 2 / (2.0 * sigma ** 2))
    return w / w.sum()


def mind_descriptors(slab: Tensor, sigma: float = 0.5,
                     eps_rel: float = 1e-6) -> Tensor:
    """Differentiable MIND of a (D, H, W) slab; matches mind.compute_mind."""
    from .mind import DISPLACEMENTS

    kernel = gaussian_kernel3(sigma)
    padded = pad_symmetric(slab, 1)
    n = slab.shape
    centre = padded[1:1 + n[0], 1:1 + n[1], 1:1 + n[2]]
    dists = []
    for disp in DISPLACEMENTS:
        shifted = padded[tuple(slice(1 + d, 1 + d + s) for d, s in zip(disp, n))]
        diff2 = (centre - shifted) * (centre - shifted)
        blurred = pad_symmetric(diff2, 1)
        for ax in range(3):
            blurred = axis_conv3(blurred, ax, kernel)
        dists.append(blurred)
    d = stack(dists, axis=0)
    eps = max(eps_rel * float(np.var(slab.data)), 1e-12)
    v = clamp_min(_mean_axis0(d), eps)
    desc = exp(-d / v)
    return desc / amax(desc, axis=0, keepdims=True)


def _mean_axis0(t: Tensor) -> Tensor:
    n = t.shape[0]

    def bwd(g):
        t._accum(np.broadcast_to(g / n, t.shape).copy())

    return Tensor(t.data.mean(axis=0), parents=(t,), backward=bwd)


def soft_dice_node(pred: Tensor, target: np.ndarray,
                   eps: float = 1e-6) -> Tensor:
    """Soft Dice over the union support; the support set is treated as
    fixed (no gradient through the indicator)."""
    target = np.asarray(target, dtype=pred.data.dtype)
    s = pred.data + target
    support = s > eps
    n = int(support.sum())
    if n == 0:
        return Tensor(np.array(0.0))
    t = Tensor(target)
    num = pred * t * 2.0
    den = pred + t + eps
    frac = num / den
    return masked_mean(frac, support)


def masked_mean(t: Tensor, mask: np.ndarray) -> Tensor:
    n = int(mask.sum())

    def bwd(g):
        t._accum(g * mask / n)

    return Tensor(np.array((t.data * mask).sum() / n), parents=(t,), backward=bwd)


# ---------------------------------------------------------------------------
# networks, optimizer, checkpoints


class Network:
    """Named trainable tensors + seeded RNG + train/eval mode."""

    def __init__(self, seed: int = 0):
        self.params: dict[str, Tensor] = {}
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self.training = False

    def parameter(self, name: str, shape, init="he", fan_in=None) -> Tensor:
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter {name!r}")
        if init == "zeros":
            data = np.zeros(shape, dtype=np.float32)
        elif init == "ones":
            data = np.ones(shape, dtype=np.float32)
        else:
            fan = fan_in if fan_in is not None else int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / max(fan, 1))
            data = (self.rng.normal(0.0, std, size=shape)).astype(np.float32)
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def constant(self, name: str, data) -> Tensor:
        """Non-trainable named tensor (e.g. fixed LBC filters)."""
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float32), requires_grad=False)
        self.params[name] = t
        return t

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.trainable().values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for k, v in self.params.items():
            if k not in state:
                raise ConfigurationError(f"missing parameter {k!r} in state")
            if tuple(state[k].shape) != tuple(v.data.shape):
                raise SizeError(f"shape mismatch for {k!r}")
            v.data = state[k].astype(v.data.dtype).copy()


def forward_eval(net: Network, *inputs):
    """Deterministic forward pass in eval mode (dropout off)."""
    net.training = False
    return net.forward(*inputs)


def backward_grads(net: Network, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients for every trainable tensor; zeros if not in the graph."""
    loss.backward()
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for k, p in net.trainable().items()}


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """Standard Adam update with bias correction, in place."""
    state.step_count += 1
    t = state.step_count
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise SizeError(f"gradient shape mismatch for {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p.data, dtype=np.float64))
        v = state.v.setdefault(name, np.zeros_like(p.data, dtype=np.float64))
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        mhat = m / (1.0 - state.beta1 ** t)
        vhat = v / (1.0 - state.beta2 ** t)
        p.data = (p.data - lr * mhat / (np.sqrt(vhat) + state.eps)).astype(
            p.data.dtype)


def save_checkpoint(path: str, net: Network) -> None:
    """JSON manifest (names, shapes, seed) + raw little-endian payload."""
    names = sorted(net.params)
    manifest = {
        "seed": net.seed,
        "tensors": [{"name": n, "shape": list(net.params[n].data.shape),
                     "trainable": bool(net.params[n].requires_grad)}
                    for n in names],
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1)
    payload = np.concatenate([net.params[n].data.astype("<f4").ravel()
                              for n in names])
    payload.tofile(_payload_path(path))


def load_checkpoint(path: str, net: Network) -> None:
    with open(path) as fh:
        manifest = json.load(fh)
    payload = np.fromfile(_payload_path(path), dtype="<f4")
    offset = 0
    state = {}
    for entry in manifest["tensors"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        state[entry["name"]] = payload[offset:offset + size].reshape(
            entry["shape"])
        offset += size
    if offset != payload.size:
        raise SizeError("checkpoint payload size mismatch")
    net.load_state_dict(state)


def _payload_path(path: str) -> str:
    return os.path.splitext(path)[0] + ".bin"
