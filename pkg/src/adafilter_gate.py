"""
Layerwise recurrent gate network.

For every gated conv unit i the gate looks at that unit's input x_i:

    pooled  = global_avg_pool(x_i)                  [N, n_i]
    embed   = embedding_i(pooled)                   [N, E]   (1x1 conv on a 1x1 map)
    h, c    = lstm(embed, (h, c))                   shared across units
    probs   = sigmoid(head_i(h))                    [N, n_{i+1}]
    bits    = binarize(probs)                       {0, 1}

The LSTM state starts at zero for every forward pass and advances once per
gated unit in network order. Nothing in the pipeline mixes examples, so an
example's policy depends only on its own activations.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

import adafilter_tensor as T
from adafilter_errors import ShapeError
from adafilter_layers import Linear, LSTMCell, Module, ModuleList
from adafilter_tensor import Function, Tensor

logger = logging.getLogger(__name__)

THRESHOLD = 0.5


# ============================================================================
# Binarizers
# ============================================================================

class StraightThroughBinarize(Function):
    """Forward: 1 where s >= 0.5 else 0. Backward: upstream gradient passed unchanged."""
    name = "ste_binarize"

    def forward(self, s):
        return (s >= THRESHOLD).astype(s.dtype)

    def backward(self, grad):
        return (grad,)


class StopGradientBinarize(Function):
    """Same forward as the STE; backward delivers exact zeros (ablation)."""
    name = "stop_gradient_binarize"

    def forward(self, s):
        return (s >= THRESHOLD).astype(s.dtype)

    def backward(self, grad):
        return (np.zeros_like(grad),)


def ste_binarize(probs: Tensor) -> Tensor:
    return StraightThroughBinarize.apply(probs)


def stop_gradient_binarize(probs: Tensor) -> Tensor:
    return StopGradientBinarize.apply(probs)


BINARIZERS: dict[str, Callable[[Tensor], Tensor]] = {
    "ste": ste_binarize,
    "stop_gradient": stop_gradient_binarize,
}


# ============================================================================
# Policies
# ============================================================================

@dataclass
class PolicyVector:
    """Per-example binary fine-tuning policy for one gated unit (1 = fine-tuned filter)."""
    bits: Tensor
    layer_index: int
    probs: Optional[Tensor] = None

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def batch_size(self) -> int:
        return self.bits.shape[0]

    def numpy(self) -> np.ndarray:
        return self.bits.data


def policy_stats(policies: Sequence[Union[PolicyVector, np.ndarray]]) -> list[float]:
    """
    Fine-tune fraction per layer: share of (example, channel) pairs equal to 1.

    Accepts PolicyVectors or raw [N, C] bit arrays, one per layer.
    """
    if len(policies) == 0:
        raise ValueError("policy_stats: no policies given")
    fractions = []
    for index, policy in enumerate(policies):
        bits = policy.numpy() if isinstance(policy, PolicyVector) else np.asarray(policy)
        if bits.ndim != 2 or bits.size == 0:
            raise ValueError(f"policy_stats: layer {index} has an empty or non-[N, C] policy {bits.shape}")
        fractions.append(float(np.count_nonzero(bits == 1.0)) / bits.size)
    return fractions


class RandomPolicy:
    """I.i.d. Bernoulli(p) policies, redrawn on every forward pass from a seeded generator."""

    def __init__(self, seed: int, p: float = 0.5):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"Bernoulli probability must lie in [0, 1], got {p}")
        self.seed = seed
        self.p = p
        self.rng = np.random.default_rng([seed, 0xB17])

    def reset(self) -> None:
        self.rng = np.random.default_rng([self.seed, 0xB17])

    def sample(self, layer_index: int, batch: int, channels: int, dtype=np.float64) -> PolicyVector:
        bits = (self.rng.random((batch, channels)) < self.p).astype(dtype)
        return PolicyVector(Tensor(bits), layer_index)


class ForcedPolicy:
    """Constant policy (all ones or all zeros); used for identity checks and diagnostics."""

    def __init__(self, value: float):
        if value not in (0.0, 1.0):
            raise ValueError(f"Forced policy must be 0 or 1, got {value}")
        self.value = float(value)

    def sample(self, layer_index: int, batch: int, channels: int, dtype=np.float64) -> PolicyVector:
        return PolicyVector(Tensor(np.full((batch, channels), self.value, dtype=dtype)), layer_index)


# ============================================================================
# Gate network
# ============================================================================

class GateNetwork(Module):
    """
    Shared LSTM with per-unit embedding and head layers.

    layer_channels[i] = (n_i, n_{i+1}) for gated unit i. Only the LSTM is
    shared; widths differ per unit so embeddings and heads cannot be.
    """

    def __init__(self, layer_channels: Sequence[tuple[int, int]], embedding_size: int = 64,
                 hidden_size: int = 64, binarizer: str = "ste", seed: int = 0, dtype=np.float64):
        super().__init__()
        if binarizer not in BINARIZERS:
            raise ValueError(f"Unknown binarizer {binarizer!r}; choose from {sorted(BINARIZERS)}")
        rng = np.random.default_rng([seed, 0x6A7E])
        self.layer_channels = [tuple(pair) for pair in layer_channels]
        self.embedding_size = embedding_size
        self.hidden_size = hidden_size
        self.binarizer = binarizer
        self.embeddings = ModuleList([Linear(n_in, embedding_size, rng=rng, init="fan_in", dtype=dtype)
                                      for n_in, _ in self.layer_channels])
        self.lstm = LSTMCell(embedding_size, hidden_size, rng=rng, dtype=dtype)
        self.heads = ModuleList([Linear(hidden_size, n_out, rng=rng, init="fan_in", dtype=dtype)
                                 for _, n_out in self.layer_channels])

    @property
    def num_layers(self) -> int:
        return len(self.layer_channels)

    def init_state(self, batch: int, dtype=None) -> tuple[Tensor, Tensor]:
        return self.lstm.init_state(batch, dtype)

    def gate_step(self, x: Tensor, layer_index: int, state: Optional[tuple[Tensor, Tensor]] = None
                  ) -> tuple[PolicyVector, tuple[Tensor, Tensor]]:
        return gate_step(x, layer_index, state, self)

    def set_head_bias(self, value: float) -> None:
        """Saturate every head (large positive forces all ones, large negative all zeros)."""
        for head in self.heads:
            head.weight.data = np.zeros_like(head.weight.data)
            head.bias.data = np.full_like(head.bias.data, value)


def gate_step(x: Tensor, layer_index: int, state: Optional[tuple[Tensor, Tensor]], gate: GateNetwork
              ) -> tuple[PolicyVector, tuple[Tensor, Tensor]]:
    if not 0 <= layer_index < gate.num_layers:
        raise KeyError(f"gate: layer {layer_index} is not registered (gate has {gate.num_layers} layers)")
    n_in, _ = gate.layer_channels[layer_index]
    if x.ndim != 4 or x.shape[1] != n_in:
        raise ShapeError(f"gate: layer {layer_index} expects input [N, {n_in}, H, W], got {x.shape}")
    if state is None:
        state = gate.init_state(x.shape[0], x.dtype)
    pooled = T.global_avg_pool(x)
    embedding = gate.embeddings[layer_index](pooled)
    hidden, new_state = gate.lstm(embedding, state)
    probs = T.sigmoid(gate.heads[layer_index](hidden))
    bits = BINARIZERS[gate.binarizer](probs)
    return PolicyVector(bits, layer_index, probs), new_state


# ============================================================================
# Policy dump
# ============================================================================

POLICY_DUMP_HEADER = ["layer_index", "example_id", "channel_index", "bit"]


def policy_dump_rows(policies: Sequence[Union[PolicyVector, np.ndarray]], example_offset: int = 0
                     ) -> list[tuple[int, int, int, int]]:
    """Long-format rows (layer_index, example_id, channel_index, bit) for one batch."""
    rows = []
    for layer_index, policy in enumerate(policies):
        bits = policy.numpy() if isinstance(policy, PolicyVector) else np.asarray(policy)
        if isinstance(policy, PolicyVector):
            layer_index = policy.layer_index
        for n, c in np.ndindex(bits.shape):
            rows.append((layer_index, example_offset + n, c, int(bits[n, c])))
    return rows

