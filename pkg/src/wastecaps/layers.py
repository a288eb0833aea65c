"""Neural network layers built on the autodiff tensor.

Layers are small stateful modules in the usual style: construction draws
initial weights from a caller-supplied ``numpy.random.Generator`` so that
model builds are reproducible, ``forward`` consumes and returns tensors,
and containers recurse for parameter traversal, mode switching, and
checkpointing.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    _result,
    concat,
    relu as trelu,
)


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """Uniform He initialization: U(-limit, limit) with limit = sqrt(6 / fan_in)."""
    limit = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    """Base class providing child/parameter registration and traversal."""

    def __init__(self):
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor):
            self._params[name] = value
        object.__setattr__(self, name, value)

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ShapeError(f"load_state_dict[{name}]", arr.shape, p.data.shape)
            p.data = np.ascontiguousarray(arr)


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._items: list[Module] = []
        for m in mods:
            self.append(m)

    def append(self, mod: Module):
        self._children[str(len(self._items))] = mod
        self._items.append(mod)
        return self

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Sequential(Module):
    def __init__(self, *mods):
        super().__init__()
        self._items = list(mods)
        for i, m in enumerate(self._items):
            self._children[str(i)] = m

    def forward(self, x):
        for m in self._items:
            x = m(x)
        return x

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-d cross-correlation over NCHW input via im2col + GEMM.

    ``weight`` is (C_out, C_in, kh, kw). Output spatial size follows
    floor((H + 2*padding - kh) / stride) + 1.
    """
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise ShapeError("conv2d", x.shape, weight.shape)
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError("conv2d", x.shape, weight.shape)
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sn, sc, sh, sw = xd.strides
    windows = np.lib.stride_tricks.as_strided(
        xd,
        shape=(n, c, h_out, w_out, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 4, 5, 1)).reshape(
        n * h_out * w_out, kh * kw * c
    )
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, c_out)
    out = cols @ wmat
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * h_out * w_out, c_out)
        gw = (cols.T @ g2).reshape(kh, kw, c, c_out).transpose(3, 2, 0, 1)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, h_out, w_out, kh, kw, c).transpose(0, 5, 1, 2, 3, 4)
            gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for i in range(kh):
                hi = i + stride * h_out
                for j in range(kw):
                    wj = j + stride * w_out
                    gxp[:, :, i:hi:stride, j:wj:stride] += gcols[:, :, :, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out, parents, "conv2d", backward)


def avg_pool2d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping average pooling; trailing rows/cols that do not fill
    a window are dropped."""
    n, c, h, w = x.shape
    k = int(kernel)
    h_out, w_out = h // k, w // k
    if h_out == 0 or w_out == 0:
        raise ShapeError("avg_pool2d", x.shape, (k, k))
    cropped = x.data[:, :, : h_out * k, : w_out * k]
    out = cropped.reshape(n, c, h_out, k, w_out, k).mean(axis=(3, 5))

    def backward(g):
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        spread = np.broadcast_to(
            (g / (k * k))[:, :, :, None, :, None], (n, c, h_out, k, w_out, k)
        )
        gx[:, :, : h_out * k, : w_out * k] = spread.reshape(n, c, h_out * k, w_out * k)
        return (gx,)

    return _result(out, (x,), "avg_pool2d", backward)


def max_pool2d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first
    maximal element of the window."""
    n, c, h, w = x.shape
    k = int(kernel)
    h_out, w_out = h // k, w // k
    if h_out == 0 or w_out == 0:
        raise ShapeError("max_pool2d", x.shape, (k, k))
    windows = (
        x.data[:, :, : h_out * k, : w_out * k]
        .reshape(n, c, h_out, k, w_out, k)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h_out, w_out, k * k)
    )
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros((n, c, h_out, w_out, k * k), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        gx[:, :, : h_out * k, : w_out * k] = (
            gwin.reshape(n, c, h_out, w_out, k, k)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h_out * k, w_out * k)
        )
        return (gx,)

    return _result(out, (x,), "max_pool2d", backward)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size, stride: int = 1,
                 padding: int = 0, bias: bool = True, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        kh, kw = _pair(kernel_size)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = (kh, kw)
        self.stride = int(stride)
        self.padding = int(padding)
        fan_in = in_channels * kh * kw
        self.weight = Tensor(
            he_uniform(rng, (out_channels, in_channels, kh, kw), fan_in), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_channels, dtype=np.float32), requires_grad=True) if bias else None

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class FullyConnected(Module):
    """Affine map y = x @ W + b with W shaped (in_features, out_features).

    Carries its own L2 coefficient: ``penalty()`` is l2_weight * sum(W^2)
    with the bias excluded, ready to be added to a training loss.
    """

    def __init__(self, in_features: int, out_features: int, l2_weight: float = 0.0,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if l2_weight < 0:
            raise ValueError(f"l2_weight must be >= 0, got {l2_weight}")
        self.in_features = in_features
        self.out_features = out_features
        self.l2_weight = float(l2_weight)
        self.weight = Tensor(
            he_uniform(rng, (in_features, out_features), in_features), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_features, dtype=np.float32), requires_grad=True)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError("fully_connected", x.shape, self.weight.shape)
        return x @ self.weight + self.bias

    def penalty(self) -> Tensor:
        if self.l2_weight == 0.0:
            return Tensor(np.zeros((), dtype=self.weight.dtype))
        return (self.weight * self.weight).sum() * self.l2_weight


class ReLU(Module):
    def forward(self, x):
        return trelu(x)


class Flatten(Module):
    def forward(self, x):
        return x.reshape(x.shape[0], -1)


class AvgPool2d(Module):
    def __init__(self, kernel: int = 2):
        super().__init__()
        self.kernel = kernel

    def forward(self, x):
        return avg_pool2d(x, self.kernel)


class MaxPool2d(Module):
    def __init__(self, kernel: int = 2):
        super().__init__()
        self.kernel = kernel

    def forward(self, x):
        return max_pool2d(x, self.kernel)


class Dropout(Module):
    """Inverted dropout: in train mode each element survives with probability
    ``keep_prob`` and survivors are rescaled by 1/keep_prob; eval mode is the
    identity. Sampling uses a private generator so runs are reproducible;
    reseed via ``seed_dropout``."""

    def __init__(self, keep_prob: float):
        super().__init__()
        if not 0.0 < keep_prob <= 1.0:
            raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
        self.keep_prob = float(keep_prob)
        self.rng = np.random.default_rng(0)

    def forward(self, x):
        if not self.training or self.keep_prob == 1.0:
            return x
        mask = (self.rng.random(x.shape) < self.keep_prob).astype(x.dtype) / self.keep_prob
        return x * Tensor(mask)


def seed_dropout(root: Module, seed: int):
    """Give every dropout layer under ``root`` its own deterministic stream."""
    for i, m in enumerate(m for m in root.modules() if isinstance(m, Dropout)):
        m.rng = np.random.default_rng((seed, i))


class DenseBlock(Module):
    """Stack of 3x3 conv+relu layers with dense connectivity.

    Each layer sees the concatenation (along channels) of the block input
    and every earlier layer's output, and contributes ``growth_rate`` new
    channels, so the block emits in_channels + num_layers * growth_rate.
    """

    def __init__(self, in_channels: int, num_layers: int, growth_rate: int,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.in_channels = in_channels
        self.num_layers = num_layers
        self.growth_rate = growth_rate
        self.convs = ModuleList()
        channels = in_channels
        for _ in range(num_layers):
            self.convs.append(Conv2d(channels, growth_rate, 3, padding=1, rng=rng))
            channels += growth_rate
        self.out_channels = channels

    def forward(self, x):
        feats = x
        for conv in self.convs:
            feats = concat([feats, trelu(conv(feats))], axis=1)
        return feats


class Transition(Module):
    """Between-block compression: 1x1 conv to compression * channels
    (floored), relu, then 2x2 average pooling."""

    def __init__(self, in_channels: int, compression: float = 0.5,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = int(in_channels * compression)
        self.conv = Conv2d(in_channels, self.out_channels, 1, rng=rng)

    def forward(self, x):
        return avg_pool2d(trelu(self.conv(x)), 2)


def build_extractor(in_channels: int = 3, num_blocks: int = 3, layers_per_block: int = 4,
                    growth_rate: int = 12, init_channels: int = 24,
                    rng: np.random.Generator | None = None) -> Sequential:
    """Dense feature extractor: 7x7 stride-2 stem conv, then alternating
    dense blocks and transitions (no transition after the final block)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    mods: list[Module] = [
        Conv2d(in_channels, init_channels, 7, stride=2, padding=3, rng=rng),
        ReLU(),
    ]
    channels = init_channels
    for b in range(num_blocks):
        block = DenseBlock(channels, layers_per_block, growth_rate, rng=rng)
        mods.append(block)
        channels = block.out_channels
        if b < num_blocks - 1:
            trans = Transition(channels, rng=rng)
            mods.append(trans)
            channels = trans.out_channels
    net = Sequential(*mods)
    net.out_channels = channels
    return net


def parameterized_layers(root: Module) -> list[Module]:
    """Leaf modules that own weights, in forward (definition) order."""
    return [m for m in root.modules() if m._params]


def set_trainable(root: Module, selection, trainable: bool):
    """Flip requires_grad on the selected weighted layers.

    ``selection`` is "all", ("last", k), or an iterable of layer indices into
    the forward-ordered weighted-layer list. Unselected layers are untouched.
    """
    layers = parameterized_layers(root)
    if selection == "all":
        chosen = range(len(layers))
    elif isinstance(selection, tuple) and len(selection) == 2 and selection[0] == "last":
        k = selection[1]
        if not 0 <= k <= len(layers):
            raise ValueError(f"last {k} out of range for {len(layers)} weighted layers")
        chosen = range(len(layers) - k, len(layers))
    else:
        chosen = [int(i) for i in selection]
        bad = [i for i in chosen if not 0 <= i < len(layers)]
        if bad:
            raise ValueError(f"layer indices {bad} out of range for {len(layers)} weighted layers")
    for i in chosen:
        for p in layers[i]._params.values():
            p.requires_grad = trainable


def freeze_except_last(root: Module, num_unfrozen: int):
    """Freeze every weighted layer, then unfreeze the trailing ``num_unfrozen``."""
    set_trainable(root, "all", False)
    set_trainable(root, ("last", num_unfrozen), True)
