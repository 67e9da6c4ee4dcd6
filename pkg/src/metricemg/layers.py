"""Layer specifications, parameterized layer stacks and the Adam optimizer."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, ShapeError, Tensor

LAYER_KINDS = ("conv2d", "batchnorm", "leaky_relu", "flatten", "dense", "dropout")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int = 0
    kernel_h: int = 1
    kernel_w: int = 1
    padding: str = "same"
    out_units: int = 0
    leaky_slope: float = 0.01
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ValueError("kernel extents must be >= 1")
        if self.padding not in ("same", "none"):
            raise ValueError(f"unknown padding mode {self.padding!r}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must lie in (0, 1)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def conv_block(filters: int, kernel: int, padding: str = "same") -> list[LayerSpec]:
    return [
        LayerSpec("conv2d", out_channels=filters, kernel_h=kernel, kernel_w=kernel, padding=padding),
        LayerSpec("batchnorm"),
        LayerSpec("leaky_relu", leaky_slope=0.01),
    ]


# Convolutional feature extractor shared by every model.
FEATURE_EXTRACTOR: tuple[LayerSpec, ...] = tuple(
    conv_block(32, 13)
    + conv_block(32, 9)
    + conv_block(32, 5)
    + conv_block(32, 3)
    + conv_block(8, 3, padding="none")
    + [LayerSpec("flatten")]
)


def classifier_head(num_classes: int, hidden: int = 128, dropout_rate: float = 0.5) -> list[LayerSpec]:
    return [
        LayerSpec("dense", out_units=hidden),
        LayerSpec("leaky_relu", leaky_slope=0.01),
        LayerSpec("dropout", dropout_rate=dropout_rate),
        LayerSpec("dense", out_units=num_classes),
    ]


def output_shape(specs, input_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-sample output shape of a layer stack, without running it."""
    shape = tuple(input_shape)
    for spec in specs:
        if spec.kind == "conv2d":
            _, h, w = shape
            if spec.padding == "none":
                h, w = h - spec.kernel_h + 1, w - spec.kernel_w + 1
                if h < 1 or w < 1:
                    raise ShapeError(f"kernel {spec.kernel_h}x{spec.kernel_w} does not fit {shape}")
            shape = (spec.out_channels, h, w)
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif spec.kind == "dense":
            shape = (spec.out_units,)
    return shape


class Layer:
    """One instantiated layer: its spec, parameters and (for batch norm) running state."""

    def __init__(self, spec: LayerSpec, in_shape: tuple[int, ...], rng: np.random.Generator, prefix: str):
        self.spec = spec
        self.params: list[Tensor] = []
        self.bn_state: BatchNormState | None = None
        gain = 2.0 / (1.0 + 0.01**2)
        if spec.kind == "conv2d":
            c_in = in_shape[0]
            fan_in = c_in * spec.kernel_h * spec.kernel_w
            w = rng.normal(0.0, np.sqrt(gain / fan_in), (spec.out_channels, c_in, spec.kernel_h, spec.kernel_w))
            self.params = [
                Tensor(w, requires_grad=True, name=f"{prefix}.weight"),
                Tensor(np.zeros(spec.out_channels), requires_grad=True, name=f"{prefix}.bias"),
            ]
        elif spec.kind == "dense":
            fan_in = in_shape[0]
            w = rng.normal(0.0, np.sqrt(gain / fan_in), (spec.out_units, fan_in))
            self.params = [
                Tensor(w, requires_grad=True, name=f"{prefix}.weight"),
                Tensor(np.zeros(spec.out_units), requires_grad=True, name=f"{prefix}.bias"),
            ]
        elif spec.kind == "batchnorm":
            channels = in_shape[0]
            self.params = [
                Tensor(np.ones(channels), requires_grad=True, name=f"{prefix}.gamma"),
                Tensor(np.zeros(channels), requires_grad=True, name=f"{prefix}.beta"),
            ]
            self.bn_state = BatchNormState(channels)

    def __call__(self, x: Tensor, train: bool, rng: np.random.Generator | None) -> Tensor:
        spec = self.spec
        if spec.kind == "conv2d":
            return T.conv2d(x, *self.params, padding=spec.padding)
        if spec.kind == "batchnorm":
            return T.batch_norm(x, *self.params, state=self.bn_state, train=train)
        if spec.kind == "leaky_relu":
            return T.leaky_relu(x, spec.leaky_slope)
        if spec.kind == "flatten":
            return T.flatten(x)
        if spec.kind == "dense":
            return T.dense(x, *self.params)
        return T.dropout(x, spec.dropout_rate, train, rng)


class Network:
    """A sequential stack of layers built from a list of :class:`LayerSpec`."""

    def __init__(self, specs, input_shape: tuple[int, ...], rng: np.random.Generator, prefix: str = "net"):
        self.specs = tuple(specs)
        self.prefix = prefix
        self.input_shape = tuple(input_shape)
        self.layers: list[Layer] = []
        shape = self.input_shape
        for i, spec in enumerate(self.specs):
            self.layers.append(Layer(spec, shape, rng, f"{prefix}.{i}.{spec.kind}"))
            shape = output_shape([spec], shape)
        self.output_shape = shape

    @property
    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params]

    @property
    def bn_states(self) -> list[BatchNormState]:
        return [layer.bn_state for layer in self.layers if layer.bn_state is not None]

    def forward(self, x: Tensor, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"expected input of shape (B, {self.input_shape}), got {x.shape}")
        for layer in self.layers:
            x = layer(x, train, rng)
        return x

    __call__ = forward


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in (0, 1)")


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState) -> None:
    """Apply one bias-corrected Adam update to ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError(f"got {len(grads)} gradients for {len(params)} parameters")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"Adam: shape mismatch for parameter {p.name or i}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"Adam: non-finite gradient for parameter {p.name or i}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
