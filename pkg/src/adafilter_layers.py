"""
Neural building blocks on top of the tensor engine.

Module keeps parameters (trainable Tensors), buffers (plain arrays such as
BN running statistics or frozen filter copies) and child modules under
dotted paths, which are also the checkpoint paths.

The backbone is assembled from BackboneSpec descriptors. Every conv+bn pair
becomes a ConvBN unit; units in depth order are the layers AdaFilter gates
(1x1 projection shortcuts inside residual blocks are not counted as units).
"""

import logging
from typing import Callable, Iterator, Optional, Union

import numpy as np

import adafilter_tensor as T
from adafilter_checkpoint import Checkpoint
from adafilter_config import BackboneSpec
from adafilter_errors import CheckpointError, ConfigError, ShapeError
from adafilter_tensor import Tensor

logger = logging.getLogger(__name__)

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1
FORGET_BIAS_INIT = 1.0

# policy_fn(unit_index, x_i) -> policy Tensor [N, C_out] or None
PolicyFn = Callable[[int, Tensor], Optional[Tensor]]


# ============================================================================
# Module base
# ============================================================================

class Module:
    """Container of parameters, buffers and child modules."""

    def __init__(self) -> None:
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name: str, value) -> None:
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Tensor):
            self._params[name] = value
        elif name in self._buffers:
            self._buffers[name] = np.asarray(value)
            return
        object.__setattr__(self, name, value)

    def __getattr__(self, name: str):
        buffers = self.__dict__.get("_buffers", {})
        if name in buffers:
            return buffers[name]
        raise AttributeError(f"{type(self).__name__} has no attribute {name!r}")

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = np.asarray(value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    # -- traversal ----------------------------------------------------------

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._modules.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "", trainable_only: bool = False) -> Iterator[tuple[str, Tensor]]:
        for path, module in self.named_modules(prefix):
            for name, param in module._params.items():
                if trainable_only and not param.requires_grad:
                    continue
                yield (f"{path}.{name}" if path else name), param

    def parameters(self, trainable_only: bool = False) -> list[Tensor]:
        return [p for _, p in self.named_parameters(trainable_only=trainable_only)]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for path, module in self.named_modules(prefix):
            for name, buf in module._buffers.items():
                yield (f"{path}.{name}" if path else name), buf

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        for _, module in self.named_modules():
            object.__setattr__(module, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    # -- state --------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {path: p.data.astype(np.float64) for path, p in self.named_parameters()}
        state.update({path: b.astype(np.float64) for path, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Union[dict[str, np.ndarray], Checkpoint], strict: bool = True,
                        exclude: tuple[str, ...] = ()) -> None:
        """Copy arrays into parameters and buffers; paths starting with an exclude prefix are left alone."""
        tensors = state.tensors if isinstance(state, Checkpoint) else state
        expected = {path: p for path, p in self.named_parameters() if not path.startswith(exclude or ("\0",))}
        buffer_owners = {}
        for path, module in self.named_modules():
            for name in module._buffers:
                full = f"{path}.{name}" if path else name
                if not full.startswith(exclude or ("\0",)):
                    buffer_owners[full] = (module, name)
        missing = [p for p in list(expected) + list(buffer_owners) if p not in tensors]
        if strict and missing:
            raise CheckpointError(f"Checkpoint is missing {len(missing)} entries, first: {missing[:3]}")
        for path, param in expected.items():
            if path not in tensors:
                continue
            value = tensors[path]
            if value.shape != param.shape:
                raise CheckpointError(f"Layer '{path}': checkpoint shape {value.shape} != model shape {param.shape}")
            param.data = value.astype(param.dtype).copy()
        for path, (module, name) in buffer_owners.items():
            if path not in tensors:
                continue
            current = module._buffers[name]
            value = tensors[path]
            if value.shape != current.shape:
                raise CheckpointError(f"Buffer '{path}': checkpoint shape {value.shape} != model shape {current.shape}")
            module._buffers[name] = value.astype(current.dtype).copy()


class ModuleList(Module):
    def __init__(self, modules: Optional[list[Module]] = None) -> None:
        super().__init__()
        self._items: list[Module] = []
        for module in modules or []:
            self.append(module)

    def append(self, module: Module) -> None:
        self._modules[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self) -> Iterator[Module]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, index: int) -> Module:
        return self._items[index]

    def __setitem__(self, index: int, module: Module) -> None:
        self._items[index] = module
        self._modules[str(index)] = module


# ============================================================================
# Initialization
# ============================================================================

def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ============================================================================
# Layers
# ============================================================================

class Conv2d(Module):
    """Bias-free convolution ('same' padding k//2 by default)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: Optional[int] = None, rng: Optional[np.random.Generator] = None, dtype=np.float64):
        super().__init__()
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        fan_in = in_channels * kernel_size * kernel_size
        data = he_uniform(rng, shape, fan_in, dtype) if rng is not None else np.zeros(shape, dtype=dtype)
        self.weight = Tensor(data, requires_grad=True)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.stride, self.padding)


class BatchNorm2d(Module):
    """Per-channel batch normalization with running statistics."""

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPSILON, dtype=np.float64):
        super().__init__()
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"BN momentum must lie in (0, 1), got {momentum}")
        if eps <= 0:
            raise ValueError(f"BN epsilon must be positive, got {eps}")
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def copy_from(self, other: "BatchNorm2d") -> None:
        self.gamma.data = other.gamma.data.copy()
        self.beta.data = other.beta.data.copy()
        self.running_mean = other.running_mean.copy()
        self.running_var = other.running_var.copy()

    def update_running(self, batch_mean: np.ndarray, batch_var_unbiased: np.ndarray) -> None:
        m = self.momentum
        self.running_mean = (1.0 - m) * self.running_mean + m * batch_mean
        self.running_var = np.maximum((1.0 - m) * self.running_var + m * batch_var_unbiased, 0.0)

    def forward(self, x: Tensor, mode: Optional[str] = None) -> Tensor:
        return batchnorm_forward(x, self, mode or ("train" if self.training else "eval"))


def batchnorm_forward(x: Tensor, p: BatchNorm2d, mode: str) -> Tensor:
    """
    Train mode: standardize with batch statistics over (N, H, W), then scale/shift,
    and fold the batch moments into the running statistics. Eval mode: use the
    running statistics only.
    """
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"batchnorm: input {x.shape} does not match {p.channels} channels")
    if mode == "train":
        count = x.data.size // x.shape[1]
        if count < 2:
            raise ShapeError(f"batchnorm: train mode needs N*H*W >= 2 values per channel, got {count} for input {x.shape}")
        mean = T.channel_mean(x)
        var = T.channel_var(x)
        normalized = T.channel_standardize(x, mean, var, p.eps)
        p.update_running(mean.data, var.data * (count / (count - 1)))
    elif mode == "eval":
        mean = Tensor(p.running_mean)
        var = Tensor(p.running_var)
        normalized = T.channel_standardize(x, mean, var, p.eps)
    else:
        raise ValueError(f"batchnorm: mode must be 'train' or 'eval', got {mode!r}")
    return T.channel_affine(normalized, p.gamma, p.beta)


class Linear(Module):
    """Fully connected layer y = x W^T + b."""

    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None,
                 init: str = "he", dtype=np.float64):
        super().__init__()
        shape = (out_features, in_features)
        if rng is None:
            weight = np.zeros(shape, dtype=dtype)
        elif init == "he":
            weight = he_uniform(rng, shape, in_features, dtype)
        else:
            weight = fan_in_uniform(rng, shape, in_features, dtype)
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LSTMCell(Module):
    """
    Standard LSTM cell with separate input/forget/output/candidate weights.

    i = sigmoid(W_i e + U_i h + b_i)    f = sigmoid(W_f e + U_f h + b_f)
    o = sigmoid(W_o e + U_o h + b_o)    g = tanh(W_g e + U_g h + b_g)
    c' = f * c + i * g                  h' = o * tanh(c')
    """

    GATES = ("i", "f", "o", "g")

    def __init__(self, input_size: int, hidden_size: int, rng: Optional[np.random.Generator] = None, dtype=np.float64):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        for gate in self.GATES:
            w_ih = fan_in_uniform(rng, (hidden_size, input_size), input_size, dtype) if rng is not None \
                else np.zeros((hidden_size, input_size), dtype=dtype)
            w_hh = fan_in_uniform(rng, (hidden_size, hidden_size), hidden_size, dtype) if rng is not None \
                else np.zeros((hidden_size, hidden_size), dtype=dtype)
            bias = np.full(hidden_size, FORGET_BIAS_INIT if gate == "f" else 0.0, dtype=dtype)
            setattr(self, f"weight_ih_{gate}", Tensor(w_ih, requires_grad=True))
            setattr(self, f"weight_hh_{gate}", Tensor(w_hh, requires_grad=True))
            setattr(self, f"bias_{gate}", Tensor(bias, requires_grad=True))

    def init_state(self, batch: int, dtype=None) -> tuple[Tensor, Tensor]:
        dtype = dtype or self.bias_i.dtype
        zeros = np.zeros((batch, self.hidden_size), dtype=dtype)
        return Tensor(zeros), Tensor(zeros.copy())

    def forward(self, embedding: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, tuple[Tensor, Tensor]]:
        return lstm_cell_step(embedding, state, self)


def lstm_cell_step(embedding: Tensor, state: tuple[Tensor, Tensor], p: LSTMCell
                   ) -> tuple[Tensor, tuple[Tensor, Tensor]]:
    h, c = state
    n = embedding.shape[0]
    if embedding.ndim != 2 or embedding.shape[1] != p.input_size:
        raise ShapeError(f"lstm: embedding {embedding.shape} does not match input size {p.input_size}")
    if h.shape != (n, p.hidden_size) or c.shape != (n, p.hidden_size):
        raise ShapeError(f"lstm: state shapes {h.shape}/{c.shape} do not match [{n}, {p.hidden_size}]")

    def gate_pre(gate: str) -> Tensor:
        return T.add(T.linear(embedding, getattr(p, f"weight_ih_{gate}"), getattr(p, f"bias_{gate}")),
                     T.linear(h, getattr(p, f"weight_hh_{gate}")))

    i = T.sigmoid(gate_pre("i"))
    f = T.sigmoid(gate_pre("f"))
    o = T.sigmoid(gate_pre("o"))
    g = T.tanh(gate_pre("g"))
    c_next = T.add(T.mul(f, c), T.mul(i, g))
    h_next = T.mul(o, T.tanh(c_next))
    return h_next, (h_next, c_next)


# ============================================================================
# Backbone units
# ============================================================================

class ConvBN(Module):
    """conv -> BN. A main unit gets a depth-order unit_index; shortcuts keep None."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int,
                 rng: Optional[np.random.Generator], dtype, unit_index: Optional[int] = None):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel_size, stride, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_channels, dtype=dtype)
        self.unit_index = unit_index
        self.frozen = False

    @property
    def in_channels(self) -> int:
        return self.conv.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels

    def set_frozen(self, frozen: bool) -> None:
        """Frozen units keep their parameters and use running BN statistics."""
        self.frozen = frozen
        for p in self.parameters():
            p.requires_grad = not frozen

    def forward(self, x: Tensor, policy: Optional[Tensor] = None) -> Tensor:
        if policy is not None:
            raise ShapeError(f"unit {self.unit_index} is not gated but received a policy")
        mode = "eval" if (self.frozen or not self.training) else "train"
        return self.bn(self.conv(x), mode=mode)


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.relu(x)


class MaxPool(Module):
    def __init__(self, kernel: int, stride: Optional[int]):
        super().__init__()
        self.kernel, self.stride = kernel, stride or kernel

    def forward(self, x: Tensor) -> Tensor:
        return T.max_pool2d(x, self.kernel, self.stride)


class GlobalAvgPool(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.global_avg_pool(x)


class ResidualBlock(Module):
    """relu(unit2(relu(unit1(x))) + shortcut(x)); shortcut is a 1x1 ConvBN when shapes change."""

    def __init__(self, unit1: Module, unit2: Module, shortcut: Optional[ConvBN]):
        super().__init__()
        self.unit1 = unit1
        self.unit2 = unit2
        if shortcut is not None:
            self.shortcut = shortcut
        self.has_shortcut = shortcut is not None

    def forward(self, x: Tensor, policy_fn: Optional[PolicyFn] = None) -> Tensor:
        out = T.relu(run_unit(self.unit1, x, policy_fn))
        out = run_unit(self.unit2, out, policy_fn)
        skip = self.shortcut(x) if self.has_shortcut else x
        if skip.shape != out.shape:
            raise ShapeError(f"residual: skip {skip.shape} and main path {out.shape} differ")
        return T.relu(T.add(out, skip))


def run_unit(unit: Module, x: Tensor, policy_fn: Optional[PolicyFn]) -> Tensor:
    """Apply a main unit, asking policy_fn for its per-example policy first."""
    policy = policy_fn(unit.unit_index, x) if policy_fn is not None else None
    return unit(x, policy)


class Backbone(Module):
    """Sequential stack of descriptor-built layers followed by the classifier head."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        self.layers = ModuleList()

    def forward(self, x: Tensor, policy_fn: Optional[PolicyFn] = None) -> Tensor:
        return self.head(self.features(x, policy_fn))

    def features(self, x: Tensor, policy_fn: Optional[PolicyFn] = None) -> Tensor:
        """Everything up to (and including) global pooling; the head input."""
        expected = (self.spec.in_channels, self.spec.image_size, self.spec.image_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"backbone: expected input [N, {expected[0]}, {expected[1]}, {expected[2]}], got {x.shape}")
        for layer in self.layers:
            if isinstance(layer, ResidualBlock):
                x = layer(x, policy_fn)
            elif getattr(layer, "unit_index", None) is not None:
                x = run_unit(layer, x, policy_fn)
            else:
                x = layer(x)
        return x

    def units(self) -> list[Module]:
        """Main conv units in depth order (projection shortcuts excluded)."""
        found = []
        for layer in self.layers:
            if isinstance(layer, ResidualBlock):
                found.extend([layer.unit1, layer.unit2])
            elif getattr(layer, "unit_index", None) is not None:
                found.append(layer)
        return found

    def unit_paths(self) -> list[str]:
        index_to_path = {}
        for path, module in self.named_modules():
            idx = getattr(module, "unit_index", None)
            if idx is not None:
                index_to_path[idx] = path
        return [index_to_path[i] for i in sorted(index_to_path)]

    def blocks(self) -> list[ResidualBlock]:
        return [layer for layer in self.layers if isinstance(layer, ResidualBlock)]

    def head_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.head.named_parameters(prefix="head"))

    def reset_head(self, num_classes: int, seed: int) -> None:
        in_features = self.head.weight.shape[1]
        rng = np.random.default_rng([seed, 0x4EAD])
        self.head = Linear(in_features, num_classes, rng=rng, dtype=self.head.weight.dtype)


def build_backbone(spec: BackboneSpec, seed: int, dtype=np.float64) -> Backbone:
    """
    Deterministically build and initialize the backbone described by spec.

    He-uniform conv/fc weights, zero fc bias, gamma=1, beta=0, running mean 0
    and running variance 1.
    """
    problems = spec.layout_problems()
    if problems:
        raise ConfigError("Malformed backbone spec: " + "; ".join(problems), problems)
    rng = np.random.default_rng(seed)
    model = Backbone(spec)
    channels = spec.in_channels
    unit_index = 0
    descriptors = spec.layers
    i = 0
    while i < len(descriptors):
        desc = descriptors[i]
        if desc.kind == "conv":
            k = desc.kernel_size or spec.kernel_size
            unit = ConvBN(channels, desc.out_channels, k, desc.stride, rng, dtype, unit_index=unit_index)
            model.layers.append(unit)
            unit_index += 1
            channels = desc.out_channels
            i += 2  # the paired bn descriptor is part of the unit
            continue
        if desc.kind == "relu":
            model.layers.append(ReLU())
        elif desc.kind == "max_pool":
            model.layers.append(MaxPool(desc.kernel, desc.stride))
        elif desc.kind == "residual_block":
            k = spec.kernel_size
            unit1 = ConvBN(channels, desc.out_channels, k, desc.stride, rng, dtype, unit_index=unit_index)
            unit2 = ConvBN(desc.out_channels, desc.out_channels, k, 1, rng, dtype, unit_index=unit_index + 1)
            shortcut = None
            if desc.stride != 1 or desc.out_channels != channels:
                shortcut = ConvBN(channels, desc.out_channels, 1, desc.stride, rng, dtype)
            model.layers.append(ResidualBlock(unit1, unit2, shortcut))
            unit_index += 2
            channels = desc.out_channels
        elif desc.kind == "global_avg_pool":
            model.layers.append(GlobalAvgPool())
        elif desc.kind == "fc":
            model.head = Linear(channels, spec.num_classes, rng=rng, dtype=dtype)
        i += 1
    logger.debug(f"Built backbone with {unit_index} conv units and {model.num_parameters()} parameters")
    return model


def closed_form_parameter_count(spec: BackboneSpec) -> int:
    """Parameter count from the descriptors alone (conv weights, BN gamma/beta, fc weight+bias)."""
    total = 0
    channels = spec.in_channels
    for desc in spec.layers:
        if desc.kind == "conv":
            k = desc.kernel_size or spec.kernel_size
            total += desc.out_channels * channels * k * k + 2 * desc.out_channels
            channels = desc.out_channels
        elif desc.kind == "residual_block":
            k = spec.kernel_size
            w = desc.out_channels
            total += w * channels * k * k + 2 * w
            total += w * w * k * k + 2 * w
            if desc.stride != 1 or w != channels:
                total += w * channels + 2 * w
            channels = w
        elif desc.kind == "fc":
            total += channels * spec.num_classes + spec.num_classes
    return total
