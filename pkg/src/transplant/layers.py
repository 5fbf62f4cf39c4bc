"""Layer zoo with forward, exact backward and feature-agnostic pseudo-backward.

All per-layer functions work on batched arrays ``(B, *shape)``. ``forward`` and
``backward`` also accept a single unbatched sample and return unbatched
results. ``pseudo_backward`` never sees a forward trace: it is a fixed linear map
of the output gradient that depends on the layer parameters only.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DEFAULT_DTYPE, check_shape, resolve_dtype

KINDS = ("Conv", "ReLU", "MaxPool", "AvgPool", "Dense", "Flatten", "UpsampleNearest", "SigmoidHead")
# rank of one unbatched input sample; None means element-wise (any rank)
_INPUT_RANK = {
    "Conv": 3, "MaxPool": 3, "AvgPool": 3, "UpsampleNearest": 3, "Flatten": 3,
    "Dense": 1, "ReLU": None, "SigmoidHead": None,
}

RELU_RULES = {"identity": 1.0, "expected-mask": 0.5}
SIGMOID_RULES = {"identity": 1.0, "expected-slope": 0.25}


class ShapeError(ValueError):
    """Input or gradient shape not admissible for a layer or a junction."""


@dataclass(frozen=True)
class PseudoRules:
    """Which surrogate derivative the pseudo-backward pass uses for nonlinearities."""

    relu: str = "identity"
    sigmoid: str = "identity"

    def __post_init__(self):
        if self.relu not in RELU_RULES:
            raise ValueError(f"unknown relu pseudo rule {self.relu!r}")
        if self.sigmoid not in SIGMOID_RULES:
            raise ValueError(f"unknown sigmoid pseudo rule {self.sigmoid!r}")


DEFAULT_RULES = PseudoRules()


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: Optional[int] = None
    out_channels: Optional[int] = None
    kernel: Optional[int] = None
    stride: Optional[int] = None
    padding: Optional[int] = None
    window: Optional[int] = None
    in_features: Optional[int] = None
    out_features: Optional[int] = None
    factor: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        required = {
            "Conv": ("in_channels", "out_channels", "kernel", "stride", "padding"),
            "MaxPool": ("window", "stride"),
            "AvgPool": ("window", "stride"),
            "Dense": ("in_features", "out_features"),
            "UpsampleNearest": ("factor",),
        }.get(self.kind, ())
        for name in required:
            v = getattr(self, name)
            if v is None:
                raise ValueError(f"{self.kind} requires {name}")
            if v < (0 if name == "padding" else 1):
                raise ValueError(f"{self.kind}.{name} must be positive, got {v}")

    @property
    def has_params(self) -> bool:
        return self.kind in ("Conv", "Dense")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def Conv(in_channels: int, out_channels: int, kernel: int = 3, stride: int = 1,
         padding: Optional[int] = None) -> LayerSpec:
    if padding is None:
        padding = kernel // 2
    return LayerSpec("Conv", in_channels=in_channels, out_channels=out_channels,
                     kernel=kernel, stride=stride, padding=padding)


def ReLU() -> LayerSpec:
    return LayerSpec("ReLU")


def MaxPool(window: int = 2, stride: Optional[int] = None) -> LayerSpec:
    return LayerSpec("MaxPool", window=window, stride=stride or window)


def AvgPool(window: int = 2, stride: Optional[int] = None) -> LayerSpec:
    return LayerSpec("AvgPool", window=window, stride=stride or window)


def Dense(in_features: int, out_features: int) -> LayerSpec:
    return LayerSpec("Dense", in_features=in_features, out_features=out_features)


def Flatten() -> LayerSpec:
    return LayerSpec("Flatten")


def UpsampleNearest(factor: int) -> LayerSpec:
    return LayerSpec("UpsampleNearest", factor=factor)


def SigmoidHead() -> LayerSpec:
    return LayerSpec("SigmoidHead")


@dataclass
class LayerParams:
    weight: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in (("weight", self.weight), ("bias", self.bias)) if v is not None}

    def copy(self) -> "LayerParams":
        return LayerParams(None if self.weight is None else self.weight.copy(),
                           None if self.bias is None else self.bias.copy())


@dataclass
class TraceEntry:
    kind: str
    input_shape: tuple
    x: Optional[np.ndarray] = None
    aux: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# shapes and parameters


def output_shape(spec: LayerSpec, in_shape) -> tuple[int, ...]:
    s = check_shape(in_shape)
    k = spec.kind
    rank = _INPUT_RANK[k]
    if rank is not None and len(s) != rank:
        raise ShapeError(f"{k} expects a rank-{rank} input, got shape {s}")
    if k == "Conv":
        c, h, w = s
        if c != spec.in_channels:
            raise ShapeError(f"Conv expects {spec.in_channels} input channels, got {c}")
        ho = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
        wo = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"Conv kernel {spec.kernel} too large for input {s}")
        return (spec.out_channels, ho, wo)
    if k in ("MaxPool", "AvgPool"):
        c, h, w = s
        ho = (h - spec.window) // spec.stride + 1
        wo = (w - spec.window) // spec.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{k} window {spec.window} too large for input {s}")
        return (c, ho, wo)
    if k == "Dense":
        if s[0] != spec.in_features:
            raise ShapeError(f"Dense expects {spec.in_features} features, got {s[0]}")
        return (spec.out_features,)
    if k == "Flatten":
        return (int(np.prod(s)),)
    if k == "UpsampleNearest":
        c, h, w = s
        return (c, h * spec.factor, w * spec.factor)
    return s


def init_params(spec: LayerSpec, rng: np.random.Generator, dtype=DEFAULT_DTYPE,
                init: str = "he") -> LayerParams:
    """He-normal weights and zero bias; ``init="near-identity"`` for square convs."""
    dt = resolve_dtype(dtype)
    if spec.kind == "Conv":
        shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        fan_in = spec.in_channels * spec.kernel ** 2
        if init == "near-identity":
            w = identity_kernel(spec, dt) + 0.01 * rng.standard_normal(shape)
        elif init == "he":
            w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        else:
            raise ValueError(f"unknown init {init!r}")
        return LayerParams(w.astype(dt), np.zeros(spec.out_channels, dtype=dt))
    if spec.kind == "Dense":
        w = rng.standard_normal((spec.out_features, spec.in_features)) * np.sqrt(2.0 / spec.in_features)
        return LayerParams(w.astype(dt), np.zeros(spec.out_features, dtype=dt))
    return LayerParams()


def identity_kernel(spec: LayerSpec, dtype=np.float64) -> np.ndarray:
    """Kernel that makes a stride-1 same-padded Conv the identity map."""
    if spec.kind != "Conv" or spec.in_channels != spec.out_channels or spec.stride != 1 \
            or 2 * spec.padding != spec.kernel - 1:
        raise ValueError("identity kernel needs a square, stride-1, same-padded Conv")
    w = np.zeros((spec.out_channels, spec.in_channels, spec.kernel, spec.kernel), dtype=dtype)
    c = spec.kernel // 2
    w[np.arange(spec.out_channels), np.arange(spec.in_channels), c, c] = 1.0
    return w


def check_params(spec: LayerSpec, params: LayerParams) -> None:
    if spec.kind == "Conv":
        want = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        nb = spec.out_channels
    elif spec.kind == "Dense":
        want = (spec.out_features, spec.in_features)
        nb = spec.out_features
    else:
        if params.weight is not None or params.bias is not None:
            raise ShapeError(f"{spec.kind} takes no parameters")
        return
    if params.weight is None or params.weight.shape != want:
        got = None if params.weight is None else params.weight.shape
        raise ShapeError(f"{spec.kind} weight must have shape {want}, got {got}")
    if params.bias is not None and params.bias.shape != (nb,):
        raise ShapeError(f"{spec.kind} bias must have shape {(nb,)}, got {params.bias.shape}")


# ---------------------------------------------------------------------------
# convolution helpers


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    # xp: (B, C, Hp, Wp) -> (B*ho*wo, C*k*k)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    b, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)


def _conv_forward(spec: LayerSpec, params: LayerParams, x: np.ndarray):
    b, c, h, w = x.shape
    _, ho, wo = output_shape(spec, (c, h, w))
    p, k, s = spec.padding, spec.kernel, spec.stride
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = _im2col(xp, k, s, ho, wo)
    wmat = params.weight.reshape(spec.out_channels, -1)
    y = cols @ wmat.T
    if params.bias is not None:
        y += params.bias
    return y.reshape(b, ho, wo, spec.out_channels).transpose(0, 3, 1, 2), cols


def _conv_input_grad(spec: LayerSpec, weight: np.ndarray, g: np.ndarray, in_hw) -> np.ndarray:
    b, o, ho, wo = g.shape
    h, w = in_hw
    p, k, s = spec.padding, spec.kernel, spec.stride
    # (B, ho, wo, O) @ (O, C*k*k) -> per-position column gradients
    gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
    dcols = (gm @ weight.reshape(o, -1)).reshape(b, ho, wo, spec.in_channels, k, k)
    dcols = dcols.transpose(0, 3, 4, 5, 1, 2)  # (B, C, k, k, ho, wo)
    dxp = np.zeros((b, spec.in_channels, h + 2 * p, w + 2 * p), dtype=np.result_type(g, weight))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[:, :, i, j]
    if p:
        dxp = dxp[:, :, p:p + h, p:p + w]
    return dxp


def conv_weight_grad(spec: LayerSpec, x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """d<g, conv(W, x)>/dW for batched ``x`` (B,C,H,W) and ``g`` (B,O,ho,wo)."""
    b, o, ho, wo = g.shape
    p, k, s = spec.padding, spec.kernel, spec.stride
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = _im2col(xp, k, s, ho, wo)
    gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
    return (gm.T @ cols).reshape(o, spec.in_channels, k, k)


def conv_apply(spec: LayerSpec, weight: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Bias-free convolution of a batch; the adjoint of the input-gradient map."""
    y, _ = _conv_forward(spec, LayerParams(weight, None), x)
    return y


def conv_transpose(spec: LayerSpec, weight: np.ndarray, g: np.ndarray, in_hw) -> np.ndarray:
    """Input-gradient map of a Conv, i.e. the transposed convolution of ``g``."""
    return _conv_input_grad(spec, weight, g, in_hw)


# ---------------------------------------------------------------------------
# pooling helpers


def _pool_windows(x: np.ndarray, wnd: int, s: int, ho: int, wo: int) -> np.ndarray:
    return sliding_window_view(x, (wnd, wnd), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]


def _avgpool_input_grad(spec: LayerSpec, g: np.ndarray, in_hw) -> np.ndarray:
    b, c, ho, wo = g.shape
    h, w = in_hw
    wnd, s = spec.window, spec.stride
    dx = np.zeros((b, c, h, w), dtype=g.dtype)
    share = g / (wnd * wnd)
    for i in range(wnd):
        for j in range(wnd):
            dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += share
    return dx


def _upsample_input_grad(spec: LayerSpec, g: np.ndarray) -> np.ndarray:
    b, c, h, w = g.shape
    r = spec.factor
    return g.reshape(b, c, h // r, r, w // r, r).sum(axis=(3, 5))


# ---------------------------------------------------------------------------
# public per-layer evaluations


def _batch(spec: LayerSpec, x: np.ndarray, in_rank: Optional[int] = None):
    rank = _INPUT_RANK[spec.kind] if in_rank is None else in_rank
    if rank is None:
        return x, True
    if x.ndim == rank:
        return x[None], False
    if x.ndim == rank + 1:
        return x, True
    raise ShapeError(f"{spec.kind} expects rank {rank} (or batched {rank + 1}), got shape {x.shape}")


def forward(spec: LayerSpec, params: LayerParams, x: np.ndarray, index: Optional[int] = None):
    """Evaluate one layer; returns ``(y, ctx)`` where ``ctx`` feeds :func:`backward`."""
    x = np.asarray(x)
    xb, batched = _batch(spec, x)
    try:
        if _INPUT_RANK[spec.kind] is not None:
            output_shape(spec, xb.shape[1:])
        if spec.has_params:
            check_params(spec, params)
    except ShapeError as e:
        where = f"layer {index} " if index is not None else ""
        raise ShapeError(f"{where}({spec.kind}): {e}") from None
    ctx = TraceEntry(spec.kind, tuple(xb.shape[1:]), xb)
    k = spec.kind
    if k == "Conv":
        y, ctx.aux["cols"] = _conv_forward(spec, params, xb)
    elif k == "ReLU":
        ctx.aux["mask"] = xb > 0
        y = np.where(ctx.aux["mask"], xb, 0).astype(xb.dtype, copy=False)
    elif k == "MaxPool":
        b, c, h, w = xb.shape
        _, ho, wo = output_shape(spec, (c, h, w))
        wnd = spec.window
        if wnd == spec.stride:
            # non-overlapping: a reshape gathers the windows without a strided view
            win = xb[:, :, :ho * wnd, :wo * wnd].reshape(b, c, ho, wnd, wo, wnd)
            win = win.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, wnd * wnd)
        else:
            win = _pool_windows(xb, wnd, spec.stride, ho, wo).reshape(b, c, ho, wo, -1)
        arg = win.argmax(axis=-1)
        ctx.aux["argmax"] = arg
        y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    elif k == "AvgPool":
        b, c, h, w = xb.shape
        _, ho, wo = output_shape(spec, (c, h, w))
        y = _pool_windows(xb, spec.window, spec.stride, ho, wo).mean(axis=(-2, -1))
    elif k == "Dense":
        y = xb @ params.weight.T
        if params.bias is not None:
            y = y + params.bias
    elif k == "Flatten":
        y = xb.reshape(xb.shape[0], -1)
    elif k == "UpsampleNearest":
        r = spec.factor
        y = xb.repeat(r, axis=2).repeat(r, axis=3)
    elif k == "SigmoidHead":
        y = _sigmoid(xb)
        ctx.aux["y"] = y
    ctx.aux["batched"] = batched
    y = np.ascontiguousarray(y)
    return (y if batched else y[0]), ctx


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def backward(spec: LayerSpec, params: LayerParams, ctx: TraceEntry, g_out: np.ndarray,
             input_grad: bool = True):
    """Exact vector-Jacobian product; returns ``(g_in, g_params)``.

    With ``input_grad=False`` a Conv/Dense layer skips ``g_in`` (returns None).
    """
    if ctx is None or ctx.kind != spec.kind:
        raise ValueError(f"backward for {spec.kind} needs the trace entry of a matching forward call")
    batched = ctx.aux.get("batched", True)
    g = np.asarray(g_out)
    if not batched:
        g = g[None]
    x = ctx.x
    if _INPUT_RANK[spec.kind] is None:      # element-wise: any shape, output shaped like input
        want = x.shape
    else:
        want = (x.shape[0],) + output_shape(spec, ctx.input_shape)
    if g.shape != want:
        raise ShapeError(f"{spec.kind} backward expects gradient of shape {want}, got {g.shape}")
    k = spec.kind
    gp = LayerParams()
    if k == "Conv":
        g_in = _conv_input_grad(spec, params.weight, g, x.shape[2:]) if input_grad else None
        gm = g.transpose(0, 2, 3, 1).reshape(-1, spec.out_channels)
        cols = ctx.aux.get("cols")
        gw = (gm.T @ cols).reshape(params.weight.shape) if cols is not None else conv_weight_grad(spec, x, g)
        gp = LayerParams(gw, None if params.bias is None else gm.sum(axis=0))
    elif k == "ReLU":
        g_in = np.where(ctx.aux["mask"], g, 0).astype(g.dtype, copy=False)
    elif k == "MaxPool":
        b, c, ho, wo = g.shape
        h, w = x.shape[2:]
        wnd, s = spec.window, spec.stride
        arg = ctx.aux["argmax"]
        g_in = np.zeros_like(x, dtype=g.dtype)
        for i in range(wnd):
            for j in range(wnd):
                sel = np.where(arg == i * wnd + j, g, 0)
                g_in[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += sel
    elif k == "AvgPool":
        g_in = _avgpool_input_grad(spec, g, x.shape[2:])
    elif k == "Dense":
        g_in = g @ params.weight if input_grad else None
        gp = LayerParams(g.T @ x, None if params.bias is None else g.sum(axis=0))
    elif k == "Flatten":
        g_in = g.reshape(x.shape)
    elif k == "UpsampleNearest":
        g_in = _upsample_input_grad(spec, g)
    elif k == "SigmoidHead":
        y = ctx.aux["y"]
        g_in = g * y * (1 - y)
    if not batched and g_in is not None:
        g_in = g_in[0]
    return g_in, gp


def pseudo_input_shape(spec: LayerSpec, out_shape) -> tuple[int, ...]:
    """Smallest input shape consistent with ``out_shape`` (exact for our presets)."""
    s = tuple(out_shape)
    k = spec.kind
    if k == "Conv":
        _, ho, wo = s
        f = lambda n: (n - 1) * spec.stride + spec.kernel - 2 * spec.padding
        return (spec.in_channels, f(ho), f(wo))
    if k in ("MaxPool", "AvgPool"):
        c, ho, wo = s
        f = lambda n: (n - 1) * spec.stride + spec.window
        return (c, f(ho), f(wo))
    if k == "UpsampleNearest":
        c, h, w = s
        return (c, h // spec.factor, w // spec.factor)
    if k == "Flatten":
        raise ShapeError("Flatten pseudo-backward needs the nominal input shape")
    if k == "Dense":
        return (spec.in_features,)
    return s


def pseudo_backward(spec: LayerSpec, params: LayerParams, g_out: np.ndarray,
                    in_shape=None, rules: PseudoRules = DEFAULT_RULES) -> np.ndarray:
    """Feature-agnostic backward of one layer for a batch of gradients ``(B, *out_shape)``.

    Conv/Dense apply the transposed weights, MaxPool distributes each gradient
    uniformly over its window, ReLU and SigmoidHead multiply by a constant taken
    from ``rules``. Everything else equals the true backward.
    """
    g = np.asarray(g_out)
    if in_shape is None:
        in_shape = pseudo_input_shape(spec, g.shape[1:])
    in_shape = check_shape(in_shape)
    want = output_shape(spec, in_shape)
    if tuple(g.shape[1:]) != want:
        raise ShapeError(f"{spec.kind} pseudo-backward expects gradient of shape (B, {want}), got {g.shape}")
    k = spec.kind
    if k == "Conv":
        return _conv_input_grad(spec, params.weight, g, in_shape[1:])
    if k == "Dense":
        return g @ params.weight
    if k in ("MaxPool", "AvgPool"):
        return _avgpool_input_grad(spec, g, in_shape[1:])
    if k == "ReLU":
        c = RELU_RULES[rules.relu]
        return g if c == 1.0 else g * c
    if k == "SigmoidHead":
        c = SIGMOID_RULES[rules.sigmoid]
        return g if c == 1.0 else g * c
    if k == "Flatten":
        return g.reshape((g.shape[0],) + in_shape)
    if k == "UpsampleNearest":
        return _upsample_input_grad(spec, g)
    raise ValueError(f"no pseudo-backward rule for {k}")
