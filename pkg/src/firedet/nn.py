"""Neural-network primitives over rank-4 tensors.

Everything here is assembled from the autodiff ops in :mod:`firedet.tensor`:
convolution (grouped / depthwise / dilated), batch normalization, max/avg
pooling, nearest-neighbour upsampling, channel concatenation, an affine map
over (N, C, 1, 1) vectors, inverted dropout, and the partial convolution that
convolves only the first ``C/r`` channels.

Convolution uses the cross-correlation convention (no kernel flip).  The
forward pass is vectorized with a strided window view plus ``einsum``; the
backward pass scatter-adds per kernel offset.  A module-level MAC tally can
be armed (see :func:`mac_counting`) to make conv/linear skip their arithmetic
and record multiply-accumulate counts instead — the analytic cost model and
the executable graph share one definition this way.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import Rng
from .tensor import (
    Parameter,
    Tensor,
    default_dtype,
    kaiming_uniform,
    make_node,
    tmean,
    zeros,
)

# -- analytic cost tally ----------------------------------------------------------

_mac_tally: dict | None = None


@contextlib.contextmanager
def mac_counting(tally: dict):
    """Arm MAC counting: conv/linear add to ``tally['macs']`` and skip arithmetic.

    While armed, conv2d and linear return zero tensors of the correct shape,
    so a single forward pass traces the whole graph and yields exact
    multiply-accumulate totals without the cost of the real computation.
    """
    global _mac_tally
    tally.setdefault("macs", 0)
    tally.setdefault("by_scope", {})
    prev = _mac_tally
    _mac_tally = tally
    try:
        yield tally
    finally:
        _mac_tally = prev


def _add_macs(count: int) -> None:
    _mac_tally["macs"] += count
    scope = _mac_tally.get("_current") or "(unscoped)"
    by_scope = _mac_tally["by_scope"]
    by_scope[scope] = by_scope.get(scope, 0) + count


# -- module system -----------------------------------------------------------------


class Module:
    """Base class for layers: tracks child modules, parameters and buffers.

    Attribute assignment registers :class:`Parameter` and :class:`Module`
    values automatically, in assignment order, which makes parameter
    enumeration (and therefore initialization draws and archive layout)
    deterministic.  Buffers are non-learnable arrays saved alongside
    parameters (batch-norm running statistics).
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_scope", None)

    def __setattr__(self, key: str, value) -> None:
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, key: str, value: np.ndarray) -> None:
        self._buffers[key] = value
        object.__setattr__(self, key, value)

    def set_buffer(self, key: str, value: np.ndarray) -> None:
        """Replace a registered buffer's contents (keeps registration)."""
        if key not in self._buffers:
            raise KeyError(f"no buffer named {key!r}")
        self._buffers[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, p in self._params.items():
            yield (f"{prefix}{key}", p)
        for key, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in self._buffers:
            yield (f"{prefix}{key}", getattr(self, key))
        for key, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{key}.")

    def assign_parameter_names(self, prefix: str = "") -> None:
        """Stamp each parameter's dotted path into its ``name`` field."""
        for name, p in self.named_parameters(prefix):
            p.name = name

    def assign_scope_names(self, prefix: str = "") -> None:
        """Stamp dotted module paths, used to attribute MACs while profiling."""
        object.__setattr__(self, "_scope", prefix.rstrip(".") or "model")
        for key, child in self._children.items():
            child.assign_scope_names(f"{prefix}{key}.")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        if _mac_tally is not None and self._scope is not None:
            prev = _mac_tally.get("_current")
            _mac_tally["_current"] = self._scope
            try:
                return self.forward(*args, **kwargs)
            finally:
                _mac_tally["_current"] = prev
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    """A sequence of child modules addressed by index."""

    def __init__(self, modules: list[Module]):
        super().__init__()
        self._items = list(modules)
        for i, m in enumerate(self._items):
            self._children[str(i)] = m

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]


# -- convolution ----------------------------------------------------------------------


@dataclass(frozen=True)
class Conv2dSpec:
    """Static description of a 2-D convolution; shape and cost rules live here."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1
    has_bias: bool = True

    def __post_init__(self):
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ValueError(f"channel counts must be positive: {self}")
        if self.kernel <= 0 or self.stride < 1 or self.padding < 0 or self.dilation < 1:
            raise ValueError(f"bad geometry: {self}")
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        eff = self.dilation * (self.kernel - 1) + 1
        ho = (h + 2 * self.padding - eff) // self.stride + 1
        wo = (w + 2 * self.padding - eff) // self.stride + 1
        if ho <= 0 or wo <= 0:
            raise ValueError(f"output extent <= 0 for input {h}x{w} with {self}")
        return ho, wo

    def macs(self, h: int, w: int) -> int:
        """Multiply-accumulates for one sample at input resolution h x w."""
        ho, wo = self.out_hw(h, w)
        return self.kernel * self.kernel * (self.in_channels // self.groups) * self.out_channels * ho * wo

    def param_count(self) -> int:
        n = self.out_channels * (self.in_channels // self.groups) * self.kernel * self.kernel
        if self.has_bias:
            n += self.out_channels
        return n


def conv2d(x: Tensor, spec: Conv2dSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation with stride/padding/dilation/groups.

    ``weight`` has shape (out_channels, in_channels/groups, k, k); ``bias``
    (1, out_channels, 1, 1).  Differentiable with respect to x, weight, bias.
    """
    if not isinstance(x, Tensor) or not isinstance(weight, Tensor):
        raise TypeError("conv2d expects Tensor inputs (wrap arrays with from_array)")
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ValueError(f"input has {c} channels, spec expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ValueError(f"weight shape {weight.shape} != expected {spec.weight_shape}")
    if (bias is None) == spec.has_bias:
        raise ValueError(f"bias presence does not match has_bias={spec.has_bias}")
    if bias is not None and bias.shape != (1, spec.out_channels, 1, 1):
        raise ValueError(f"bias shape {bias.shape} != (1, {spec.out_channels}, 1, 1)")

    ho, wo = spec.out_hw(h, w)
    g = spec.groups
    cig = spec.in_channels // g
    cog = spec.out_channels // g
    k, s, p, d = spec.kernel, spec.stride, spec.padding, spec.dilation

    if _mac_tally is not None:
        _add_macs(spec.macs(h, w))
        return zeros((n, spec.out_channels, ho, wo))

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    eff = d * (k - 1) + 1
    # (N, C, Ho, Wo, k, k) strided view; dilation subsamples within each window.
    win = sliding_window_view(xp, (eff, eff), axis=(2, 3))[:, :, ::s, ::s, ::d, ::d]
    win = win[:, :, :ho, :wo]
    wing = win.reshape(n, g, cig, ho, wo, k, k)
    wg = weight.data.reshape(g, cog, cig, k, k)
    out = np.einsum("ngihwkl,goikl->ngohw", wing, wg, optimize=True)
    out = out.reshape(n, spec.out_channels, ho, wo)
    if bias is not None:
        out = out + bias.data

    parents = [x, weight] if bias is None else [x, weight, bias]

    def bwd(grad: np.ndarray) -> None:
        gg = grad.reshape(n, g, cog, ho, wo)
        if weight.requires_grad:
            gw = np.einsum("ngihwkl,ngohw->goikl", wing, gg, optimize=True)
            weight.accumulate_grad(gw.reshape(spec.weight_shape))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(grad.sum(axis=(0, 2, 3), keepdims=True))
        if x.requires_grad:
            contrib = np.einsum("ngohw,goikl->ngihwkl", gg, wg, optimize=True)
            contrib = contrib.reshape(n, c, ho, wo, k, k)
            gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.data.dtype)
            for ki in range(k):
                for kj in range(k):
                    gxp[:, :, ki * d: ki * d + s * ho: s, kj * d: kj * d + s * wo: s] += contrib[..., ki, kj]
            x.accumulate_grad(gxp[:, :, p: p + h, p: p + w] if p else gxp)

    return make_node(out, parents, bwd)


class Conv2d(Module):
    """Learnable convolution layer over a :class:`Conv2dSpec`."""

    def __init__(self, spec: Conv2dSpec, rng: Rng):
        super().__init__()
        self.spec = spec
        fan_in = (spec.in_channels // spec.groups) * spec.kernel * spec.kernel
        self.weight = Parameter(kaiming_uniform(spec.weight_shape, rng, fan_in).data)
        self.bias = Parameter(np.zeros((1, spec.out_channels, 1, 1), dtype=default_dtype())) if spec.has_bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.spec, self.weight, self.bias)


# -- batch normalization -----------------------------------------------------------------


class BatchNorm(Module):
    """Per-channel batch normalization with running statistics.

    Train mode normalizes by the batch mean and biased variance over
    (N, H, W), updating the running statistics in place with
    ``running = (1 - momentum) * running + momentum * batch`` (biased
    variance throughout, documented convention).  Infer mode applies the
    affine map using the stored statistics.  Both modes are differentiable;
    train mode backpropagates through the batch statistics.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        dt = default_dtype()
        self.gamma = Parameter(np.ones((1, channels, 1, 1), dtype=dt))
        self.beta = Parameter(np.zeros((1, channels, 1, 1), dtype=dt))
        self.register_buffer("running_mean", np.zeros((1, channels, 1, 1), dtype=dt))
        self.register_buffer("running_var", np.ones((1, channels, 1, 1), dtype=dt))

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"input has {x.shape[1]} channels, layer has {self.channels}")
        gamma, beta, eps = self.gamma, self.beta, self.eps
        if not training:
            inv_std = 1.0 / np.sqrt(self.running_var + eps)
            xhat_data = (x.data - self.running_mean) * inv_std

            def bwd_infer(grad: np.ndarray) -> None:
                if x.requires_grad:
                    x.accumulate_grad(grad * (gamma.data * inv_std))
                if gamma.requires_grad:
                    gamma.accumulate_grad((grad * xhat_data).sum(axis=(0, 2, 3), keepdims=True))
                if beta.requires_grad:
                    beta.accumulate_grad(grad.sum(axis=(0, 2, 3), keepdims=True))

            return make_node(gamma.data * xhat_data + beta.data, [x, gamma, beta], bwd_infer)

        axes = (0, 2, 3)
        mean = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean) * inv_std

        self.running_mean[...] = (1.0 - self.momentum) * self.running_mean + self.momentum * mean
        self.running_var[...] = (1.0 - self.momentum) * self.running_var + self.momentum * var

        def bwd_train(grad: np.ndarray) -> None:
            if gamma.requires_grad:
                gamma.accumulate_grad((grad * xhat).sum(axis=axes, keepdims=True))
            if beta.requires_grad:
                beta.accumulate_grad(grad.sum(axis=axes, keepdims=True))
            if x.requires_grad:
                gh = grad * gamma.data
                mean_gh = gh.mean(axis=axes, keepdims=True)
                mean_gh_xhat = (gh * xhat).mean(axis=axes, keepdims=True)
                x.accumulate_grad(inv_std * (gh - mean_gh - xhat * mean_gh_xhat))

        return make_node(gamma.data * xhat + beta.data, [x, gamma, beta], bwd_train)


# -- pooling and resampling ---------------------------------------------------------------


def pool2d(x: Tensor, kind: str, kernel: int = 2, stride: int = 2, padding: int = 0) -> Tensor:
    """Max or average pooling over square windows.

    Max pooling routes each window's gradient to the first maximal element in
    row-major window order; average pooling spreads ``1/k**2`` to every window
    element.  Padding uses -inf for max and 0 for avg (the divisor stays
    ``k**2``).
    """
    if kind not in ("max", "avg"):
        raise ValueError(f"kind must be 'max' or 'avg', got {kind!r}")
    n, c, h, w = x.shape
    k, s, p = kernel, stride, padding
    if h + 2 * p < k or w + 2 * p < k:
        raise ValueError(f"input {h}x{w} smaller than kernel {k} (padding {p})")

    if p:
        fill = -np.inf if kind == "max" else 0.0
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=fill)
    else:
        xp = x.data
    hp, wp = h + 2 * p, w + 2 * p
    ho = (hp - k) // s + 1
    wo = (wp - k) // s + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, k * k)

    if kind == "max":
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

        def bwd_max(grad: np.ndarray) -> None:
            if not x.requires_grad:
                return
            gxp = np.zeros((n, c, hp, wp), dtype=x.data.dtype)
            ni, ci, hi, wi = np.indices((n, c, ho, wo), sparse=False)
            rows = hi * s + idx // k
            cols = wi * s + idx % k
            np.add.at(gxp, (ni, ci, rows, cols), grad)
            x.accumulate_grad(gxp[:, :, p: p + h, p: p + w] if p else gxp)

        return make_node(out, (x,), bwd_max)

    out = flat.mean(axis=-1)

    def bwd_avg(grad: np.ndarray) -> None:
        if not x.requires_grad:
            return
        share = grad / (k * k)
        gxp = np.zeros((n, c, hp, wp), dtype=x.data.dtype)
        for ki in range(k):
            for kj in range(k):
                gxp[:, :, ki: ki + s * ho: s, kj: kj + s * wo: s] += share
        x.accumulate_grad(gxp[:, :, p: p + h, p: p + w] if p else gxp)

    return make_node(out, (x,), bwd_avg)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, shape (N, C, 1, 1)."""
    return tmean(x, axes=(2, 3))


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Replicate each pixel factor x factor; backward sums the replicas."""
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    f = int(factor)
    if f == 1:
        return make_node(x.data.copy(), (x,), lambda g: x.accumulate_grad(g))
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

    def bwd(grad: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(grad.reshape(n, c, h, f, w, f).sum(axis=(3, 5)))

    return make_node(out, (x,), bwd)


def concat_channels(parts: list[Tensor]) -> Tensor:
    """Concatenate along the channel axis; backward slices the gradient."""
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    base = parts[0].shape
    for t in parts[1:]:
        if t.shape[0] != base[0] or t.shape[2] != base[2] or t.shape[3] != base[3]:
            raise ValueError(f"concat mismatch: {t.shape} vs {base} on N/H/W")
    out = np.concatenate([t.data for t in parts], axis=1)
    widths = [t.shape[1] for t in parts]

    def bwd(grad: np.ndarray) -> None:
        start = 0
        for t, cw in zip(parts, widths):
            t.accumulate_grad(grad[:, start: start + cw])
            start += cw

    return make_node(out, parents=list(parts), bwd=bwd)


def channel_max(x: Tensor) -> Tensor:
    """Maximum over channels, shape (N, 1, H, W); first channel wins ties."""
    idx = x.data.argmax(axis=1, keepdims=True)
    out = np.take_along_axis(x.data, idx, axis=1)

    def bwd(grad: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, idx, grad, axis=1)
            x.accumulate_grad(gx)

    return make_node(out, (x,), bwd)


def channel_mean(x: Tensor) -> Tensor:
    """Mean over channels, shape (N, 1, H, W)."""
    return tmean(x, axes=1)


# -- affine map over channel vectors -----------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map on (N, Cin, 1, 1) vectors; weight (Cout, Cin, 1, 1)."""
    n, cin, h, w = x.shape
    if h != 1 or w != 1:
        raise ValueError(f"linear expects spatial extents 1x1, got {x.shape}")
    cout, cin_w = weight.shape[0], weight.shape[1]
    if weight.shape[2] != 1 or weight.shape[3] != 1 or cin_w != cin:
        raise ValueError(f"weight shape {weight.shape} incompatible with input {x.shape}")
    if bias is not None and bias.shape != (1, cout, 1, 1):
        raise ValueError(f"bias shape {bias.shape} != (1, {cout}, 1, 1)")

    if _mac_tally is not None:
        _add_macs(n * cin * cout)
        return zeros((n, cout, 1, 1))

    xm = x.data.reshape(n, cin)
    wm = weight.data.reshape(cout, cin)
    out = (xm @ wm.T).reshape(n, cout, 1, 1)
    if bias is not None:
        out = out + bias.data
    parents = [x, weight] if bias is None else [x, weight, bias]

    def bwd(grad: np.ndarray) -> None:
        gm = grad.reshape(n, cout)
        if x.requires_grad:
            x.accumulate_grad((gm @ wm).reshape(n, cin, 1, 1))
        if weight.requires_grad:
            weight.accumulate_grad((gm.T @ xm).reshape(cout, cin, 1, 1))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(gm.sum(axis=0).reshape(1, cout, 1, 1))

    return make_node(out, parents, bwd)


class Linear(Module):
    """Learnable affine map over (N, C, 1, 1) vectors."""

    def __init__(self, in_features: int, out_features: int, rng: Rng, has_bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(kaiming_uniform((out_features, in_features, 1, 1), rng, in_features).data)
        self.bias = Parameter(np.zeros((1, out_features, 1, 1), dtype=default_dtype())) if has_bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


# -- dropout -------------------------------------------------------------------------------


def dropout(x: Tensor, p: float, training: bool, rng: Rng | None = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return make_node(x.data.copy(), (x,), lambda g: x.accumulate_grad(g))
    if rng is None:
        raise ValueError("dropout in train mode with p > 0 requires an rng")
    draws = rng.uniform64(x.size).reshape(x.shape)
    mask = ((draws >= p) / (1.0 - p)).astype(x.data.dtype)

    def bwd(grad: np.ndarray) -> None:
        x.accumulate_grad(grad * mask)

    return make_node(x.data * mask, (x,), bwd)


# -- partial convolution ---------------------------------------------------------------------


def partial_conv_spec(channels: int, r: int = 4) -> Conv2dSpec:
    """Spec of the depthwise 3x3 applied to the first channels/r channels."""
    if channels % r:
        raise ValueError(f"channels={channels} not divisible by r={r}")
    cp = channels // r
    return Conv2dSpec(cp, cp, kernel=3, stride=1, padding=1, groups=cp, has_bias=False)


def partial_conv(x: Tensor, dw_weight: Tensor, r: int = 4) -> Tensor:
    """Depthwise-convolve the first C/r channels; pass the rest through.

    The convolved slice keeps its original channel positions, so the output
    has exactly the input's shape.
    """
    c = x.shape[1]
    spec = partial_conv_spec(c, r)
    cp = c // r
    from .tensor import slice4  # local import keeps module load order simple

    front = conv2d(slice4(x, c=slice(0, cp)), spec, dw_weight)
    rest = slice4(x, c=slice(cp, c))
    return concat_channels([front, rest])


class PartialConv(Module):
    """Learnable partial convolution (depthwise 3x3 on the first C/r channels)."""

    def __init__(self, channels: int, rng: Rng, r: int = 4):
        super().__init__()
        self.r = r
        self.spec = partial_conv_spec(channels, r)
        fan_in = 9
        self.weight = Parameter(kaiming_uniform(self.spec.weight_shape, rng, fan_in).data)

    def forward(self, x: Tensor) -> Tensor:
        return partial_conv(x, self.weight, self.r)


def identity_kernel(channels: int) -> Tensor:
    """Depthwise 3x3 weights that reproduce their input (center tap = 1)."""
    w = np.zeros((channels, 1, 3, 3), dtype=default_dtype())
    w[:, 0, 1, 1] = 1.0
    return Tensor(w)
