"""
AdaFilter gated convolution units.

Each gated unit holds a trainable filter bank F and a frozen copy S of the
pre-trained filters. Per example and output channel the policy picks which
bank produces the channel:

    y   = G * conv(x, F) + (1 - G) * conv(x, S)
    out = G * BN1(y) + (1 - G) * BN2(y)          bn_mode = "gated"
    out = BN1(y)                                 bn_mode = "standard"

BN1 belongs to the fine-tuned path (the path G selects). Both BNs compute
their statistics over the full mini-batch unless bn_statistics="masked"
(experimental), where each BN only sees the positions its path owns.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Optional, Union

import numpy as np

import adafilter_tensor as T
from adafilter_checkpoint import Checkpoint, tensors_hash
from adafilter_config import BackboneSpec, GateSettings
from adafilter_errors import ShapeError
from adafilter_gate import ForcedPolicy, GateNetwork, PolicyVector, RandomPolicy
from adafilter_layers import Backbone, BatchNorm2d, ConvBN, Module, ResidualBlock, batchnorm_forward, build_backbone
from adafilter_tensor import Function, Tensor

logger = logging.getLogger(__name__)

BN_MODES = ("gated", "standard")
BN_STATISTICS = ("full_batch", "masked")
POLICY_SOURCES = ("gate", "random", "forced_on", "forced_off")


# ============================================================================
# Filter bank and filter selection
# ============================================================================

class ConvFilterBank(Module):
    """Trainable filters F and their frozen pre-trained copy S (stored as a buffer)."""

    def __init__(self, weight: np.ndarray, stride: int = 1, padding: Optional[int] = None):
        super().__init__()
        weight = np.asarray(weight)
        if weight.ndim != 4:
            raise ShapeError(f"filter bank: expected [C_out, C_in, k, k] weights, got {weight.shape}")
        self.F = Tensor(weight.copy(), requires_grad=True)
        self.register_buffer("S", weight.copy())
        self.stride = stride
        self.padding = weight.shape[-1] // 2 if padding is None else padding

    @property
    def out_channels(self) -> int:
        return self.F.shape[0]

    @property
    def in_channels(self) -> int:
        return self.F.shape[1]

    def frozen(self) -> Tensor:
        return Tensor(self.S, requires_grad=False)


def _policy_tensor(policy: Union[PolicyVector, Tensor]) -> Tensor:
    return policy.bits if isinstance(policy, PolicyVector) else policy


def filter_select_forward(x: Tensor, bank: ConvFilterBank, policy: Union[PolicyVector, Tensor]) -> Tensor:
    """Run both convolutions fully, then take channel c of example n from F where G[n, c] = 1, else from S."""
    g = _policy_tensor(policy)
    if x.ndim != 4 or x.shape[1] != bank.in_channels:
        raise ShapeError(f"filter select: input {x.shape} does not have {bank.in_channels} channels")
    if g.shape != (x.shape[0], bank.out_channels):
        raise ShapeError(
            f"filter select: policy {g.shape} does not match [N={x.shape[0]}, C_out={bank.out_channels}]"
        )
    fine_tuned = T.conv2d(x, bank.F, bank.stride, bank.padding)
    pretrained = T.conv2d(x, bank.frozen(), bank.stride, bank.padding)
    return T.policy_mix(g, fine_tuned, pretrained)


# ============================================================================
# Masked batch statistics (experimental)
# ============================================================================

def masked_moments(x: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-channel mean, biased variance and value count over examples where mask[n, c] = 1."""
    if mask.shape != x.shape[:2]:
        raise ShapeError(f"masked moments: mask {mask.shape} does not match [N, C] of {x.shape}")
    m = mask.reshape(mask.shape + (1,) * (x.ndim - 2)).astype(x.dtype)
    spatial = int(np.prod(x.shape[2:], dtype=np.int64))
    count = mask.sum(axis=0) * spatial
    safe = np.maximum(count, 1.0)
    axes = (0,) + tuple(range(2, x.ndim))
    mean = (m * x).sum(axis=axes) / safe
    centered = x - mean.reshape((1, -1) + (1,) * (x.ndim - 2))
    var = (m * centered ** 2).sum(axis=axes) / safe
    return mean, var, count


class MaskedChannelStandardize(Function):
    """
    Standardize x[N,C,H,W] with moments taken only over examples where
    mask[n, c] = 1. Channels with fewer than two selected values use the
    fallback moments. The mask receives no gradient.
    """
    name = "masked_channel_standardize"

    def forward(self, x, mask, fallback_mean=None, fallback_var=None, eps: float = 1e-5):
        batch_mean, batch_var, count = masked_moments(x, mask)
        self.valid = count >= 2
        mean = np.where(self.valid, batch_mean, fallback_mean)
        var = np.where(self.valid, batch_var, fallback_var)
        self.count = np.maximum(count, 1.0)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.centered = x - mean.reshape(1, -1, 1, 1)
        self.m = mask.reshape(mask.shape + (1, 1)).astype(x.dtype)
        return self.centered * self.inv.reshape(1, -1, 1, 1)

    def backward(self, grad):
        inv = self.inv.reshape(1, -1, 1, 1)
        dvar = (grad * self.centered).sum(axis=(0, 2, 3)) * (-0.5) * self.inv ** 3
        dmean = -(grad * inv).sum(axis=(0, 2, 3))
        through_stats = self.m * (2.0 * self.centered * dvar.reshape(1, -1, 1, 1)
                                  + dmean.reshape(1, -1, 1, 1)) / self.count.reshape(1, -1, 1, 1)
        dx = grad * inv + np.where(self.valid.reshape(1, -1, 1, 1), through_stats, 0.0)
        return dx, None


def masked_batchnorm_forward(x: Tensor, p: BatchNorm2d, mask: np.ndarray, mode: str) -> Tensor:
    """BN whose train-mode statistics cover only the masked positions."""
    if mode == "eval":
        return batchnorm_forward(x, p, "eval")
    normalized = MaskedChannelStandardize.apply(
        x, Tensor(mask), fallback_mean=p.running_mean.copy(), fallback_var=p.running_var.copy(), eps=p.eps
    )
    mean, var, count = masked_moments(x.data, mask)
    valid = count >= 2
    unbiased = var * count / np.maximum(count - 1, 1)
    m = p.momentum
    p.running_mean = np.where(valid, (1 - m) * p.running_mean + m * mean, p.running_mean)
    p.running_var = np.where(valid, (1 - m) * p.running_var + m * unbiased, p.running_var)
    return T.channel_affine(normalized, p.gamma, p.beta)


# ============================================================================
# Gated conv block
# ============================================================================

class GatedConvBlock(Module):
    """Filter bank plus BN1 (fine-tuned path) and, in gated mode, BN2 (pre-trained path)."""

    def __init__(self, bank: ConvFilterBank, bn1: BatchNorm2d, bn2: Optional[BatchNorm2d],
                 bn_mode: str = "gated", bn_statistics: str = "full_batch", unit_index: Optional[int] = None):
        super().__init__()
        if bn_mode not in BN_MODES:
            raise ValueError(f"bn_mode must be one of {BN_MODES}, got {bn_mode!r}")
        if bn_statistics not in BN_STATISTICS:
            raise ValueError(f"bn_statistics must be one of {BN_STATISTICS}, got {bn_statistics!r}")
        if bn_mode == "gated" and (bn2 is None or bn2 is bn1):
            raise ValueError("gated bn_mode needs two distinct BN parameter sets")
        if bn_mode == "standard" and bn2 is not None:
            raise ValueError("standard bn_mode uses exactly one BN")
        self.bank = bank
        self.bn1 = bn1
        if bn2 is not None:
            self.bn2 = bn2
        self.bn_mode = bn_mode
        self.bn_statistics = bn_statistics
        self.unit_index = unit_index
        self.frozen = False

    @classmethod
    def from_unit(cls, unit: ConvBN, bn_mode: str = "gated", bn_statistics: str = "full_batch") -> "GatedConvBlock":
        """F = S = the unit's conv weights; every BN starts as a copy of the unit's BN."""
        dtype = unit.conv.weight.dtype
        bank = ConvFilterBank(unit.conv.weight.data, unit.conv.stride, unit.conv.padding)
        bn1 = BatchNorm2d(unit.out_channels, unit.bn.momentum, unit.bn.eps, dtype=dtype)
        bn1.copy_from(unit.bn)
        bn2 = None
        if bn_mode == "gated":
            bn2 = BatchNorm2d(unit.out_channels, unit.bn.momentum, unit.bn.eps, dtype=dtype)
            bn2.copy_from(unit.bn)
        return cls(bank, bn1, bn2, bn_mode, bn_statistics, unit.unit_index)

    @property
    def in_channels(self) -> int:
        return self.bank.in_channels

    @property
    def out_channels(self) -> int:
        return self.bank.out_channels

    @property
    def bns(self) -> list[BatchNorm2d]:
        return [self.bn1] if self.bn_mode == "standard" else [self.bn1, self.bn2]

    def forward(self, x: Tensor, policy: Optional[Union[PolicyVector, Tensor]] = None) -> Tensor:
        if policy is None:
            raise ShapeError(f"gated unit {self.unit_index} needs a policy")
        mode = "train" if self.training else "eval"
        return gated_bn_forward(filter_select_forward(x, self.bank, policy), self, policy, mode)


def gated_bn_forward(y: Tensor, block: GatedConvBlock, policy: Union[PolicyVector, Tensor], mode: str) -> Tensor:
    """Gated mode: G * BN1(y) + (1 - G) * BN2(y). Standard mode: BN1(y), G ignored."""
    if mode not in ("train", "eval"):
        raise ValueError(f"gated bn: mode must be 'train' or 'eval', got {mode!r}")
    has_bn2 = "bn2" in block._modules
    if block.bn_mode == "standard":
        if has_bn2:
            raise ValueError(f"gated bn: unit {block.unit_index} is in standard mode but carries a second BN")
        return batchnorm_forward(y, block.bn1, mode)
    if not has_bn2:
        raise ValueError(f"gated bn: unit {block.unit_index} is in gated mode but has no BN2")
    g = _policy_tensor(policy)
    if g.shape != y.shape[:2]:
        raise ShapeError(f"gated bn: policy {g.shape} does not match [N, C] of {y.shape}")
    if block.bn_statistics == "masked":
        fine = masked_batchnorm_forward(y, block.bn1, g.data, mode)
        pre = masked_batchnorm_forward(y, block.bn2, 1.0 - g.data, mode)
    else:
        fine = batchnorm_forward(y, block.bn1, mode)
        pre = batchnorm_forward(y, block.bn2, mode)
    return T.policy_mix(g, fine, pre)


# ============================================================================
# Gated model
# ============================================================================

class GatedModel(Module):
    """
    Backbone whose main conv units are GatedConvBlocks, plus a policy source:
    the recurrent gate (adafilter), i.i.d. random bits (random_policy) or a
    constant policy.
    """

    def __init__(self, backbone: Backbone, gate: Optional[GateNetwork] = None,
                 policy_source: Optional[Union[RandomPolicy, ForcedPolicy]] = None):
        super().__init__()
        if (gate is None) == (policy_source is None):
            raise ValueError("GatedModel needs exactly one of a gate network or a policy source")
        self.backbone = backbone
        if gate is not None:
            self.gate = gate
        self.policy_source = policy_source
        self.override: Optional[ForcedPolicy] = None
        self.last_policies: list[PolicyVector] = []

    @property
    def has_gate(self) -> bool:
        return "gate" in self._modules

    @property
    def head(self):
        return self.backbone.head

    def units(self) -> list[GatedConvBlock]:
        return self.backbone.units()

    def force_policy(self, value: Optional[float]) -> None:
        """Replace every policy by a constant (None restores the normal source)."""
        self.override = None if value is None else ForcedPolicy(value)

    def _policy_fn(self, batch: int):
        state = None
        policies: list[PolicyVector] = []
        self.last_policies = policies

        def policy_fn(unit_index: int, x: Tensor) -> Tensor:
            nonlocal state
            channels = self.units()[unit_index].out_channels
            if self.override is not None:
                policy = self.override.sample(unit_index, batch, channels, x.dtype)
            elif self.has_gate:
                policy, state = self.gate.gate_step(x, unit_index, state)
            else:
                policy = self.policy_source.sample(unit_index, batch, channels, x.dtype)
            policies.append(policy)
            return policy.bits

        return policy_fn

    def features(self, x: Tensor) -> Tensor:
        return self.backbone.features(x, self._policy_fn(x.shape[0]))

    def forward(self, x: Tensor) -> Tensor:
        return self.backbone.head(self.features(x))

    def frozen_hash(self) -> str:
        """Content hash over every frozen S bank."""
        return tensors_hash({path: buf for path, buf in self.named_buffers() if path.endswith(".S")})


def load_pretrained_backbone(pretrained: Union[Checkpoint, dict[str, np.ndarray]], spec: BackboneSpec,
                             seed: int, dtype=np.float64) -> Backbone:
    """Backbone with every pretrained tensor loaded except the classifier head (fresh)."""
    backbone = build_backbone(spec, seed, dtype)
    backbone.load_state_dict(pretrained, exclude=("head.",))
    return backbone


def convert_units(backbone: Backbone, bn_mode: str = "gated", bn_statistics: str = "full_batch") -> Backbone:
    """Swap every main ConvBN unit for a GatedConvBlock built from it (projection shortcuts stay)."""
    for position, layer in enumerate(backbone.layers):
        if isinstance(layer, ResidualBlock):
            layer.unit1 = GatedConvBlock.from_unit(layer.unit1, bn_mode, bn_statistics)
            layer.unit2 = GatedConvBlock.from_unit(layer.unit2, bn_mode, bn_statistics)
        elif isinstance(layer, ConvBN) and layer.unit_index is not None:
            backbone.layers[position] = GatedConvBlock.from_unit(layer, bn_mode, bn_statistics)
    return backbone


def init_from_pretrained(
    pretrained: Union[Checkpoint, dict[str, np.ndarray]],
    spec: BackboneSpec,
    gate_settings: Optional[GateSettings] = None,
    bn_mode: str = "gated",
    bn_statistics: str = "full_batch",
    seed: int = 0,
    policy: str = "gate",
    dtype=np.float64,
) -> GatedModel:
    """
    Build a gated model from a pretrained backbone checkpoint.

    F and S start as identical copies of the pretrained filters, BN1 and BN2
    as copies of the pretrained BN, the head is re-initialized for
    spec.num_classes, and the gate network is freshly initialized.
    """
    backbone = convert_units(load_pretrained_backbone(pretrained, spec, seed, dtype), bn_mode, bn_statistics)
    model = wrap_gated(backbone, policy, gate_settings, seed)
    logger.debug(f"Gated model with {len(backbone.units())} gated units ({bn_mode} BN, {bn_statistics} statistics)")
    return model


def wrap_gated(backbone: Backbone, policy: str = "gate", gate_settings: Optional[GateSettings] = None,
               seed: int = 0) -> GatedModel:
    """Attach a policy source to a backbone whose units are already gated."""
    if policy not in POLICY_SOURCES:
        raise ValueError(f"policy must be one of {POLICY_SOURCES}, got {policy!r}")
    if policy == "random":
        return GatedModel(backbone, policy_source=RandomPolicy(seed))
    if policy in ("forced_on", "forced_off"):
        return GatedModel(backbone, policy_source=ForcedPolicy(1.0 if policy == "forced_on" else 0.0))
    settings = gate_settings or GateSettings()
    layer_channels = [(unit.in_channels, unit.out_channels) for unit in backbone.units()]
    gate = GateNetwork(layer_channels, settings.embedding_size, settings.hidden_size,
                       settings.binarizer, seed=seed, dtype=backbone.head.weight.dtype)
    return GatedModel(backbone, gate=gate)


# ============================================================================
# Parameter accounting
# ============================================================================

@dataclass
class ParameterReport:
    baseline_conv_bn: int
    gated_conv_bn: int
    gate: int
    baseline_total: int
    gated_total: int
    conv_bn_ratio: float
    total_ratio: float
    baseline_channels_per_example: int
    gated_channels_per_example: int
    gated_units: int

    def to_dict(self) -> dict:
        return asdict(self)

    def format(self) -> str:
        lines = [
            f"Gated units:                 {self.gated_units}",
            f"Baseline conv+BN parameters: {self.baseline_conv_bn}",
            f"Gated conv+BN parameters:    {self.gated_conv_bn} (ratio {self.conv_bn_ratio:.3f})",
            f"Gate network parameters:     {self.gate}",
            f"Baseline total:              {self.baseline_total}",
            f"Gated total (incl. S, gate): {self.gated_total} (ratio {self.total_ratio:.3f})",
            f"Output channels per example: {self.baseline_channels_per_example} baseline, "
            f"{self.gated_channels_per_example} gated",
        ]
        return "\n".join(lines)


def parameter_report(pretrained: Backbone, gated: GatedModel) -> ParameterReport:
    """Closed-form parameter counts of a standard backbone and its gated counterpart."""
    baseline_units = pretrained.units()
    gated_units = gated.units()
    baseline_conv_bn = int(sum(u.conv.weight.data.size + 2 * u.out_channels for u in baseline_units))
    gated_conv_bn = int(sum(u.bank.F.data.size + u.bank.S.size + 2 * u.out_channels * len(u.bns)
                            for u in gated_units))
    gate_count = gated.gate.num_parameters() if gated.has_gate else 0
    frozen = int(sum(u.bank.S.size for u in gated_units))
    baseline_total = pretrained.num_parameters()
    gated_total = gated.num_parameters() + frozen
    return ParameterReport(
        baseline_conv_bn=baseline_conv_bn,
        gated_conv_bn=gated_conv_bn,
        gate=gate_count,
        baseline_total=baseline_total,
        gated_total=gated_total,
        conv_bn_ratio=gated_conv_bn / baseline_conv_bn,
        total_ratio=gated_total / baseline_total,
        baseline_channels_per_example=int(sum(u.out_channels for u in baseline_units)),
        gated_channels_per_example=int(sum(u.out_channels for u in gated_units)),
        gated_units=len(gated_units),
    )
