"""Reverse-mode autodiff over a small 3D op set, and the toy UNet backbone.

Tensors wrap float64 numpy arrays laid out ``[batch, channel, z, y, x]``.
Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BadConfig, BadShape, NonScalarLoss, ShapeMismatch

DTYPE = np.float64


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward_fn) -> Tensor:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(value, True, parents, backward_fn)
    return Tensor(value)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


def backward(loss: Tensor, params=None):
    """Propagate d(loss) to every reachable tensor that requires a gradient.

    Gradients are stored on ``tensor.grad`` (overwritten, not accumulated
    across calls).  With ``params`` (a name -> Tensor mapping) the return value
    is a name -> gradient dict, zero-filled for parameters the loss does not
    reach.
    """
    if loss.value.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        node.grad = None
        stack.append((node, True))
        for parent in node.parents:
            stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is None:
        return None
    out = {}
    for name, p in params.items():
        out[name] = p.grad if (id(p) in seen and p.grad is not None) else np.zeros_like(p.value)
    return out


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _node(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _node(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return _node(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.value * c, (a,), lambda g: (g * c,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.value**2, (a,), lambda g: (2.0 * a.value * g,))


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    gate = x.value > 0
    return _node(np.where(gate, x.value, 0.0), (x,), lambda g: (g * gate,))


def nearest_upsample2x(x) -> Tensor:
    x = as_tensor(x)
    if x.value.ndim != 5:
        raise ShapeMismatch(f"upsample expects [B, C, Z, Y, X], got {x.shape}")
    v = x.value
    out = v.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)

    def back(g):
        b, c, z, y, xx = v.shape
        return (g.reshape(b, c, z, 2, y, 2, xx, 2).sum(axis=(3, 5, 7)),)

    return _node(out, (x,), back)


def concat_c(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:1] != b.shape[:1] or a.shape[2:] != b.shape[2:]:
        raise ShapeMismatch(f"concat_c: shapes {a.shape} and {b.shape} incompatible")
    ca = a.shape[1]
    return _node(np.concatenate([a.value, b.value], axis=1), (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def slice_c(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)

    def back(g):
        full = np.zeros_like(x.value)
        full[:, start:stop] = g
        return (full,)

    return _node(x.value[:, start:stop].copy(), (x,), back)


def _im2col(xv: np.ndarray, k: int, stride: int, pad: int):
    xp = np.pad(xv, ((0, 0), (0, 0)) + ((pad, pad),) * 3) if pad else xv
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    n, c, zo, yo, xo = win.shape[:5]
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * zo * yo * xo, c * k**3)
    return cols, (zo, yo, xo)


def _input_grad(g: np.ndarray, wv: np.ndarray, in_shape, stride: int, pad: int) -> np.ndarray:
    """Gradient w.r.t. the conv input: a stride-1 correlation of the dilated,
    padded upstream gradient with the flipped, channel-transposed kernel."""
    n, o = g.shape[:2]
    k = wv.shape[2]
    if stride > 1:
        dil = np.zeros((n, o) + tuple(stride * (s - 1) + 1 for s in g.shape[2:]), dtype=DTYPE)
        dil[:, :, ::stride, ::stride, ::stride] = g
        g = dil
    left = k - 1 - pad
    width = [(0, 0), (0, 0)]
    for size, s_out in zip(in_shape, g.shape[2:]):
        width.append((left, size + k - 1 - left - s_out))
    gp = np.pad(g, width)
    wt = np.ascontiguousarray(wv[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    cols, (zo, yo, xo) = _im2col(gp, k, 1, 0)
    out = cols @ wt.reshape(wt.shape[0], -1).T
    return out.reshape(n, zo, yo, xo, -1).transpose(0, 4, 1, 2, 3)


def conv3d(x, w, b, stride: int = 1, pad: int | None = None) -> Tensor:
    """Cross-correlation of ``x[B, C, Z, Y, X]`` with ``w[O, C, k, k, k]`` plus bias.

    Kernels are 1 or 3 voxels wide, stride 1 or 2.  ``pad`` defaults to
    ``k // 2`` which keeps the size for stride 1.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    xv, wv = x.value, w.value
    if xv.ndim != 5 or wv.ndim != 5:
        raise ShapeMismatch(f"conv3d expects 5D input and weight, got {x.shape}, {w.shape}")
    n, c = xv.shape[:2]
    o, cw, k = wv.shape[:3]
    if cw != c or wv.shape[2:] != (k, k, k) or k not in (1, 3) or b.shape != (o,):
        raise ShapeMismatch(f"conv3d: input {x.shape}, weight {w.shape}, bias {b.shape}")
    if stride not in (1, 2):
        raise ShapeMismatch(f"conv3d: stride {stride} not in (1, 2)")
    pad = k // 2 if pad is None else pad
    cols, (zo, yo, xo) = _im2col(xv, k, stride, pad)
    w2 = wv.reshape(o, -1)
    out = (cols @ w2.T + b.value).reshape(n, zo, yo, xo, o).transpose(0, 4, 1, 2, 3)

    def back(g):
        gf = g.transpose(0, 2, 3, 4, 1).reshape(-1, o)
        gw = (gf.T @ cols).reshape(wv.shape)
        gb = gf.sum(axis=0)
        gx = _input_grad(g, wv, xv.shape[2:], stride, pad) if x.requires_grad else None
        return gx, gw, gb

    return _node(np.ascontiguousarray(out), (x, w, b), back)


# ------------------------------------------------------------------ backbone


class Fusion(str, enum.Enum):
    EARLY_CONCAT = "early_concat"
    SEPARATE_ENCODERS = "separate_encoders"


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 2
    base_features: int = 8
    in_channels: int = 2
    out_channels: int = 2
    fusion: Fusion = Fusion.EARLY_CONCAT
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fusion", Fusion(self.fusion))
        if self.levels < 1 or self.base_features < 1 or self.out_channels < 1:
            raise BadConfig(f"invalid UNet config {self}")
        if self.fusion is Fusion.SEPARATE_ENCODERS and self.in_channels != 2:
            raise BadConfig("separate-encoder fusion needs exactly two input channels")

    def to_dict(self) -> dict:
        return {**self.__dict__, "fusion": self.fusion.value}


@dataclass
class ConvSpec:
    name: str
    c_in: int
    c_out: int
    k: int = 3
    stride: int = 1


HEAD = "head"


def _encoder_specs(prefix: str, c_in: int, widths) -> list[ConvSpec]:
    specs = [ConvSpec(f"{prefix}stem", c_in, widths[0])]
    for i in range(1, len(widths)):
        specs.append(ConvSpec(f"{prefix}down{i}", widths[i - 1], widths[i], stride=2))
    specs.append(ConvSpec(f"{prefix}bottleneck", widths[-1], widths[-1]))
    return specs


def layer_specs(cfg: UNetConfig) -> list[ConvSpec]:
    """Ordered conv layers of the network; initialisation follows this order."""
    widths = [cfg.base_features * 2**i for i in range(cfg.levels)]
    if cfg.fusion is Fusion.EARLY_CONCAT:
        specs = _encoder_specs("", cfg.in_channels, widths)
        skip_widths = widths
    else:
        half = [math.ceil(cfg.base_features / 2) * 2**i for i in range(cfg.levels)]
        specs = _encoder_specs("ct.", 1, half) + _encoder_specs("pet.", 1, half)
        specs.append(ConvSpec("fusion", 2 * half[-1], widths[-1]))
        skip_widths = [2 * h for h in half]
    for i in range(cfg.levels - 1, 0, -1):
        specs.append(ConvSpec(f"up{i}", widths[i], widths[i - 1]))
        specs.append(ConvSpec(f"fuse{i}", widths[i - 1] + skip_widths[i - 1], widths[i - 1]))
    specs.append(ConvSpec(HEAD, widths[0], cfg.out_channels, k=1))
    return specs


def init_conv(spec: ConvSpec, rng: np.random.Generator, std: float | None = None) -> dict[str, np.ndarray]:
    """Zero-mean normal weights, scale ``sqrt(2 / fan_in)`` unless ``std`` is given; zero bias."""
    fan_in = spec.c_in * spec.k**3
    scale = math.sqrt(2.0 / fan_in) if std is None else std
    w = rng.standard_normal((spec.c_out, spec.c_in, spec.k, spec.k, spec.k)) * scale
    return {f"{spec.name}.w": w, f"{spec.name}.b": np.zeros(spec.c_out)}


class UNet:
    """Small hierarchical encoder-decoder with skip connections.

    ``params`` maps ``"<layer>.w"`` / ``"<layer>.b"`` to leaf tensors; the
    optimizer updates their ``value`` arrays between steps.
    """

    def __init__(self, cfg: UNetConfig, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.specs = layer_specs(cfg)
        if params is None:
            rng = np.random.default_rng(cfg.seed)
            params = {}
            for spec in self.specs:
                params.update(init_conv(spec, rng))
        self.params = {name: Tensor(np.array(v, dtype=DTYPE), True, name=name) for name, v in params.items()}
        expected = {n: s for n, s in self.param_shapes().items()}
        got = {n: t.shape for n, t in self.params.items()}
        if got != expected:
            raise BadConfig("parameter table does not match the configured architecture")

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for s in self.specs:
            shapes[f"{s.name}.w"] = (s.c_out, s.c_in, s.k, s.k, s.k)
            shapes[f"{s.name}.b"] = (s.c_out,)
        return shapes

    def num_parameters(self) -> int:
        return int(sum(t.value.size for t in self.params.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.value.copy() for n, t in self.params.items()}

    def head_names(self) -> list[str]:
        return [f"{HEAD}.w", f"{HEAD}.b"]

    def reset_head(self, seed: int, out_channels: int | None = None, std: float | None = None) -> None:
        """Replace the final 1x1x1 projection with a freshly initialised one.

        ``std`` overrides the fan-in weight scale (downstream heads start small).
        """
        spec = self.specs[-1]
        if out_channels is not None and out_channels != spec.c_out:
            spec = ConvSpec(HEAD, spec.c_in, out_channels, k=1)
            self.specs[-1] = spec
            self.cfg = UNetConfig(**{**self.cfg.__dict__, "out_channels": out_channels})
        fresh = init_conv(spec, np.random.default_rng(seed), std)
        for name, value in fresh.items():
            self.params[name] = Tensor(value, True, name=name)

    def _conv(self, name, x, stride=1):
        return conv3d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride=stride)

    def _encode(self, prefix, x):
        h = relu(self._conv(f"{prefix}stem", x))
        skips = [h]
        for i in range(1, self.cfg.levels):
            h = relu(self._conv(f"{prefix}down{i}", h, stride=2))
            skips.append(h)
        return relu(self._conv(f"{prefix}bottleneck", h)), skips

    def features(self, x) -> Tensor:
        """Decoder output just before the final projection."""
        x = as_tensor(x)
        cfg = self.cfg
        if x.value.ndim != 5 or x.shape[1] != cfg.in_channels:
            raise BadShape(f"expected [B, {cfg.in_channels}, Z, Y, X], got {x.shape}")
        div = 2 ** (cfg.levels - 1)
        if any(n % div for n in x.shape[2:]):
            raise BadShape(f"spatial extents {x.shape[2:]} not divisible by {div}")
        if cfg.fusion is Fusion.EARLY_CONCAT:
            h, skips = self._encode("", x)
        else:
            h_ct, s_ct = self._encode("ct.", slice_c(x, 0, 1))
            h_pet, s_pet = self._encode("pet.", slice_c(x, 1, 2))
            h = relu(self._conv("fusion", concat_c(h_ct, h_pet)))
            skips = [concat_c(a, b) for a, b in zip(s_ct, s_pet)]
        for i in range(cfg.levels - 1, 0, -1):
            h = relu(self._conv(f"up{i}", nearest_upsample2x(h)))
            h = relu(self._conv(f"fuse{i}", concat_c(h, skips[i - 1])))
        return h

    def project(self, h) -> Tensor:
        return self._conv(HEAD, h)

    def forward(self, x) -> Tensor:
        return self.project(self.features(x))

    __call__ = forward

    def manifest(self) -> list[dict]:
        return [{"name": n, "shape": list(t.shape), "dtype": "float64"} for n, t in self.params.items()]


def build_unet(cfg: UNetConfig | None = None, **overrides) -> UNet:
    cfg = cfg or UNetConfig()
    if overrides:
        cfg = UNetConfig(**{**cfg.__dict__, **overrides})
    return UNet(cfg)


# ------------------------------------------------------------- verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_parameter: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(model: UNet, loss_fn, samples: int = 20, h: float = 1e-5, tol: float = 1e-4, seed: int = 0):
    """Compare backprop against central differences on sampled parameter entries.

    ``loss_fn(model)`` must build a fresh graph and return a scalar tensor.
    Entries are drawn uniformly over all parameters.
    """
    loss = loss_fn(model)
    grads = backward(loss, model.params)
    names = list(model.params)
    sizes = np.array([model.params[n].value.size for n in names])
    rng = np.random.default_rng(seed)
    flat_ids = rng.choice(int(sizes.sum()), size=min(samples, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    per_param: dict[str, float] = {}
    for fid in sorted(int(f) for f in flat_ids):
        k = int(np.searchsorted(bounds, fid, side="right"))
        name = names[k]
        local = fid - (bounds[k - 1] if k else 0)
        arr = model.params[name].value.reshape(-1)
        orig = arr[local]
        arr[local] = orig + h
        up = float(loss_fn(model).value)
        arr[local] = orig - h
        down = float(loss_fn(model).value)
        arr[local] = orig
        numeric = (up - down) / (2 * h)
        err = relative_error(float(grads[name].reshape(-1)[local]), numeric)
        per_param[name] = max(per_param.get(name, 0.0), err)
    return GradCheckReport(max(per_param.values(), default=0.0), tol, per_param)
