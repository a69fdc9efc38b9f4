"""Network building blocks: inception, CBAM attention, encoders, upsampling.

All "same"-size convolutions replicate the border (edge padding) instead of
zero padding, so a spatially constant input gives a spatially constant
output and grid edges are not mistaken for dry cells.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import InvalidSpec, ShapeMismatch


class Module:
    """Minimal parameter container; parameters are discovered by attribute."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ShapeMismatch(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeMismatch(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def n_parameters(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(arr):
    return Tensor(arr, requires_grad=True)


def he_normal(rng, shape, fan_in, alpha=0.2):
    std = np.sqrt(2.0 / ((1.0 + alpha**2) * fan_in))
    return rng.normal(0.0, std, size=shape)


class Conv(Module):
    """Convolution + optional activation.

    ``padding="same"`` keeps the spatial size with edge padding; an integer
    pads with zeros.
    """

    def __init__(self, rng, cin, cout, k, stride=1, padding="same", act="leaky_relu", alpha=0.2):
        self.weight = _param(he_normal(rng, (cout, cin, k, k), cin * k * k, alpha))
        self.bias = _param(np.zeros(cout))
        self._k, self._stride, self._padding = k, stride, padding
        self._act, self._alpha = act, alpha

    def forward(self, x):
        if self._padding == "same":
            x = ag.pad_edge(x, self._k // 2)
            y = ag.conv2d(x, self.weight, self.bias, self._stride, 0)
        else:
            y = ag.conv2d(x, self.weight, self.bias, self._stride, self._padding)
        return ag.activation(y, self._act, self._alpha)


@dataclass
class BlockSpec:
    kind: str
    in_channels: int
    out_channels: int = 0
    branches: tuple = (8, 8, 8)
    reduction: int = 4
    kernel_size: int = 7
    alpha: float = 0.2
    extra: dict = field(default_factory=dict)

    def validate(self):
        if self.in_channels < 1:
            raise InvalidSpec(f"{self.kind}: in_channels must be positive")
        if self.kind == "inception":
            if len(self.branches) != 3:
                raise InvalidSpec("inception needs exactly three branch widths (1x1, 3x3, 5x5)")
            if self.out_channels and sum(self.branches) != self.out_channels:
                raise InvalidSpec(f"branch widths {self.branches} do not sum to {self.out_channels}")
        elif self.kind == "channel_attn":
            if self.reduction < 1 or self.in_channels % self.reduction:
                raise InvalidSpec(f"reduction {self.reduction} must divide {self.in_channels}")
        elif self.kind == "spatial_attn":
            if self.kernel_size % 2 == 0:
                raise InvalidSpec("spatial attention kernel must be odd")
        elif self.kind in ("encoder", "upsample"):
            if self.out_channels < 1:
                raise InvalidSpec(f"{self.kind}: out_channels must be positive")
        else:
            raise InvalidSpec(f"unknown block kind {self.kind!r}")


class Inception(Module):
    """Parallel 1x1, 3x3 and 5x5 convolutions, concatenated on channels."""

    KERNELS = (1, 3, 5)

    def __init__(self, spec, rng):
        spec.validate()
        self.spec = spec
        self.branches = [
            Conv(rng, spec.in_channels, width, k, alpha=spec.alpha)
            for width, k in zip(spec.branches, self.KERNELS)
        ]

    @property
    def out_channels(self):
        return sum(self.spec.branches)

    def forward(self, x):
        if x.shape[1] != self.spec.in_channels:
            raise ShapeMismatch(f"inception expects {self.spec.in_channels} channels, got {x.shape[1]}")
        return ag.concat_channels([branch(x) for branch in self.branches])


class ChannelAttention(Module):
    """CBAM channel gate: shared bottleneck MLP over avg- and max-pooled vectors."""

    def __init__(self, spec, rng):
        spec.validate()
        self.spec = spec
        c, hidden = spec.in_channels, spec.in_channels // spec.reduction
        self.fc1 = Conv(rng, c, hidden, 1, padding=0, act="relu")
        self.fc2 = Conv(rng, hidden, c, 1, padding=0, act=None)

    def gate(self, x):
        avg = self.fc2(self.fc1(ag.pool_stats(x, "global_avg")))
        mx = self.fc2(self.fc1(ag.pool_stats(x, "global_max")))
        return ag.sigmoid(avg + mx)

    def forward(self, x):
        return ag.mul(x, self.gate(x))


class SpatialAttention(Module):
    """CBAM spatial gate from the channel-mean and channel-max maps."""

    def __init__(self, spec, rng):
        spec.validate()
        self.spec = spec
        self.conv = Conv(rng, 2, 1, spec.kernel_size, act=None)

    def gate(self, x):
        pooled = ag.concat_channels(
            [ag.pool_stats(x, "channel_mean_map"), ag.pool_stats(x, "channel_max_map")]
        )
        return ag.sigmoid(self.conv(pooled))

    def forward(self, x):
        return ag.mul(x, self.gate(x))


class VariableEncoder(Module):
    """Two 3x3 conv layers turning one variable into ``out_channels`` maps."""

    def __init__(self, spec, rng):
        spec.validate()
        self.spec = spec
        self.conv1 = Conv(rng, spec.in_channels, spec.out_channels, 3, alpha=spec.alpha)
        self.conv2 = Conv(rng, spec.out_channels, spec.out_channels, 3, alpha=spec.alpha)

    def forward(self, v):
        return self.conv2(self.conv1(v))


class UpsampleStage(Module):
    """Stride-2 transposed convolution (kernel 4, padding 1) + leaky ReLU."""

    def __init__(self, spec, rng):
        spec.validate()
        self.spec = spec
        k = spec.extra.get("kernel", 4)
        if k % 2:
            raise InvalidSpec("upsample kernel must be even to double the grid exactly")
        self._k, self._pad = k, (k - 2) // 2
        cin, cout = spec.in_channels, spec.out_channels
        # fan-in of a stride-2 transposed conv is cin * (k/2)^2
        self.weight = _param(he_normal(rng, (cin, cout, k, k), cin * (k // 2) ** 2, spec.alpha))
        self.bias = _param(np.zeros(cout))

    def forward(self, x):
        y = ag.transposed_conv2d(x, self.weight, self.bias, stride=2, padding=self._pad)
        return ag.leaky_relu(y, self.spec.alpha)


_BLOCKS = {
    "inception": Inception,
    "channel_attn": ChannelAttention,
    "spatial_attn": SpatialAttention,
    "encoder": VariableEncoder,
    "upsample": UpsampleStage,
}


def build_block(spec, rng):
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    try:
        cls = _BLOCKS[spec.kind]
    except KeyError:
        raise InvalidSpec(f"unknown block kind {spec.kind!r}") from None
    return cls(spec, rng)

