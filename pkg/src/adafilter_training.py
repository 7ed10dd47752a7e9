"""
Optimization loop, learning-rate schedule and the fine-tuning strategies.

Strategies (one per run):

    standard_finetune   every backbone parameter trains, no policies
    finetune_half       first floor(L/2) conv units (with their BN) frozen
    l2sp                standard fine-tuning + alpha/2 |w - w0|^2 + beta/2 |head|^2
    random_policy       gated model, Bernoulli(0.5) policies redrawn every forward
    adafilter           gated model driven by the recurrent gate network
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Union

import numpy as np

import adafilter_tensor as T
from adafilter_checkpoint import Checkpoint
from adafilter_config import ExperimentConfig, GateSettings, StrategySpec
from adafilter_errors import GraphError, NonFiniteLossError, ShapeError, StrategyError
from adafilter_gate import policy_stats
from adafilter_gated import GatedModel, convert_units, load_pretrained_backbone, wrap_gated
from adafilter_layers import Backbone, Module, build_backbone
from adafilter_tensor import ComputationRecord, Tensor

logger = logging.getLogger(__name__)

KNOWN_STRATEGIES = ("adafilter", "standard_finetune", "finetune_half", "random_policy", "l2sp")

MetricsRow = tuple[int, str, float, float]
PolicyRow = tuple[int, int, float]


# ============================================================================
# Learning-rate schedule and SGD with momentum
# ============================================================================

def lr_at(base_lr: float, epoch: int, decay_epochs: Iterable[int], decay_factor: float) -> float:
    """Step decay: divide by decay_factor once for every decay epoch <= epoch (0-based)."""
    drops = sum(1 for e in decay_epochs if epoch >= e)
    return base_lr / (decay_factor ** drops)


@dataclass
class ParamGroup:
    name: str
    params: list[tuple[str, Tensor]]
    lr: float


@dataclass
class OptimizerState:
    """Momentum buffers (trainable parameters only) and the schedule they follow."""
    groups: list[ParamGroup]
    momentum: float = 0.9
    decay_epochs: list[int] = field(default_factory=list)
    decay_factor: float = 10.0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0

    def lr(self, group: str, epoch: int) -> float:
        for g in self.groups:
            if g.name == group:
                return lr_at(g.lr, epoch, self.decay_epochs, self.decay_factor)
        raise KeyError(f"No parameter group named {group!r}")


def sgd_momentum_step(state: OptimizerState, epoch: int) -> None:
    """
    v <- mu * v + g ; p <- p - lr(epoch) * v for every trainable parameter.

    Parameters whose requires_grad is off are skipped and never get a buffer.
    A trainable parameter without a gradient means the graph is broken.
    """
    for group in state.groups:
        lr = lr_at(group.lr, epoch, state.decay_epochs, state.decay_factor)
        for path, param in group.params:
            if not param.requires_grad:
                continue
            if param.grad is None:
                raise GraphError(f"Trainable parameter '{path}' received no gradient")
            velocity = state.buffers.get(path)
            velocity = param.grad.copy() if velocity is None else state.momentum * velocity + param.grad
            state.buffers[path] = velocity
            param.data = (param.data - lr * velocity).astype(param.dtype)
    state.steps += 1


def build_optimizer(model: Module, lr: float, momentum: float, decay_epochs: list[int], decay_factor: float,
                    gate_lr: Optional[float] = None) -> OptimizerState:
    """Backbone group at lr; parameters under 'gate.' at gate_lr."""
    backbone, gate = [], []
    for path, param in model.named_parameters(trainable_only=True):
        (gate if path.startswith("gate.") else backbone).append((path, param))
    groups = [ParamGroup("backbone", backbone, lr)]
    if gate:
        groups.append(ParamGroup("gate", gate, gate_lr if gate_lr is not None else lr))
    return OptimizerState(groups, momentum, list(decay_epochs), decay_factor)


# ============================================================================
# L2-SP
# ============================================================================

def l2sp_penalty(model: Backbone, anchor: Union[Checkpoint, dict[str, np.ndarray]], alpha: float, beta: float,
                 head_prefix: str = "head.") -> Tensor:
    """alpha/2 * sum |w - w0|^2 over anchored backbone parameters + beta/2 * sum |w|^2 over the new head."""
    if alpha < 0 or beta < 0:
        raise ValueError(f"L2-SP coefficients must be nonnegative, got alpha={alpha}, beta={beta}")
    tensors = anchor.tensors if isinstance(anchor, Checkpoint) else anchor
    anchored, head = [], []
    for path, param in model.named_parameters():
        if path.startswith(head_prefix):
            head.append(param)
            continue
        if path not in tensors:
            raise ShapeError(f"l2sp: anchor has no entry for '{path}'")
        reference = tensors[path]
        if reference.shape != param.shape:
            raise ShapeError(f"l2sp: '{path}' has shape {param.shape}, anchor has {reference.shape}")
        anchored.append((param, reference))

    total: Optional[Tensor] = None

    def accumulate(term: Tensor) -> None:
        nonlocal total
        total = term if total is None else T.add(total, term)

    for param, reference in anchored:
        diff = T.sub(param, Tensor(reference.astype(param.dtype)))
        accumulate(T.scale(T.sum(T.mul(diff, diff)), alpha / 2.0))
    for param in head:
        accumulate(T.scale(T.sum(T.mul(param, param)), beta / 2.0))
    return total if total is not None else Tensor(np.zeros(()))


# ============================================================================
# Strategies
# ============================================================================

@dataclass
class TrainingSetup:
    """A model configured for one strategy, plus what the loop needs to train it."""
    strategy: StrategySpec
    model: Module
    anchor: Optional[dict[str, np.ndarray]] = None
    frozen_units: int = 0

    @property
    def gated(self) -> bool:
        return isinstance(self.model, GatedModel)


def freeze_first_half(backbone: Backbone) -> int:
    """Freeze floor(L/2) main units in depth order; a block's projection follows its first unit."""
    units = backbone.units()
    count = len(units) // 2
    for unit in units[:count]:
        unit.set_frozen(True)
    for block in backbone.blocks():
        if block.has_shortcut and getattr(block.unit1, "frozen", False):
            block.shortcut.set_frozen(True)
    return count


def apply_strategy(spec: StrategySpec, model: Backbone, gate_settings: Optional[GateSettings] = None,
                   bn_mode: str = "gated", bn_statistics: str = "full_batch", seed: int = 0) -> TrainingSetup:
    """
    Configure a pretrained backbone (fresh head already in place) for spec.

    Gated strategies convert the backbone's units in place and wrap it in a
    GatedModel; the others keep the plain backbone.
    """
    name = getattr(spec, "name", spec)
    if name not in KNOWN_STRATEGIES:
        raise StrategyError(f"Unknown strategy {name!r}; choose from {', '.join(KNOWN_STRATEGIES)}")
    if not isinstance(spec, StrategySpec):
        spec = StrategySpec(name=name)
    if not isinstance(model, Backbone):
        raise StrategyError(f"apply_strategy expects a plain backbone, got {type(model).__name__}")

    if name == "standard_finetune":
        return TrainingSetup(spec, model)
    if name == "finetune_half":
        return TrainingSetup(spec, model, frozen_units=freeze_first_half(model))
    if name == "l2sp":
        anchor = {path: p.data.copy() for path, p in model.named_parameters() if not path.startswith("head.")}
        return TrainingSetup(spec, model, anchor=anchor)

    convert_units(model, bn_mode, bn_statistics)
    policy = "random" if name == "random_policy" else "gate"
    return TrainingSetup(spec, wrap_gated(model, policy, gate_settings, seed))


def setup_from_config(config: ExperimentConfig, pretrained: Union[Checkpoint, dict[str, np.ndarray]],
                      dtype=None, num_classes: Optional[int] = None) -> TrainingSetup:
    """Load the pretrained backbone with a fresh head for the target task and apply the configured strategy."""
    dtype = dtype or np.dtype(config.precision).type
    spec = config.backbone
    if num_classes is not None and num_classes != spec.num_classes:
        spec = spec.model_copy(update={"num_classes": num_classes})
    backbone = load_pretrained_backbone(pretrained, spec, config.seed, dtype)
    return apply_strategy(config.require_strategy(), backbone, config.gate, config.bn_mode, config.bn_statistics, config.seed)


# ============================================================================
# Evaluation and the fit loop
# ============================================================================

@dataclass
class EvalResult:
    loss: float
    accuracy: float
    count: int
    fractions: list[float] = field(default_factory=list)
    policy_bits: Optional[list[np.ndarray]] = None


def _batch_tensor(images: np.ndarray, dtype) -> Tensor:
    return Tensor(np.ascontiguousarray(images, dtype=dtype))


def evaluate(model: Module, batches: Iterable[tuple[np.ndarray, np.ndarray]], keep_policies: bool = False,
             dtype=np.float64) -> EvalResult:
    """Eval-mode loss/accuracy; gated models also report per-layer fine-tune fractions."""
    model.eval()
    total_loss, correct, count = 0.0, 0, 0
    layer_bits: list[list[np.ndarray]] = []
    with T.no_grad():
        for images, labels in batches:
            logits = model(_batch_tensor(images, dtype))
            loss = T.softmax_cross_entropy(logits, labels)
            n = len(labels)
            total_loss += float(loss.data) * n
            correct += int(np.count_nonzero(np.argmax(logits.data, axis=1) == labels))
            count += n
            if isinstance(model, GatedModel):
                for i, policy in enumerate(model.last_policies):
                    if len(layer_bits) <= i:
                        layer_bits.append([])
                    layer_bits[i].append(policy.bits.data.copy())
    model.train()
    if count == 0:
        raise ValueError("evaluate: the evaluation stream produced no examples")
    stacked = [np.concatenate(parts, axis=0) for parts in layer_bits]
    return EvalResult(
        loss=total_loss / count,
        accuracy=correct / count,
        count=count,
        fractions=policy_stats(stacked) if stacked else [],
        policy_bits=stacked if keep_policies and stacked else None,
    )


@dataclass
class FitResult:
    model: Module
    metrics: list[MetricsRow] = field(default_factory=list)
    policies: list[PolicyRow] = field(default_factory=list)
    final_eval: Optional[EvalResult] = None
    optimizer: Optional[OptimizerState] = None


def _nonfinite_error(loss: Tensor, epoch: int, step: int) -> NonFiniteLossError:
    entry = ComputationRecord.from_output(loss).first_nonfinite() if not loss.is_leaf else None
    op_name = entry.op if entry is not None else "unknown"
    return NonFiniteLossError(
        f"Non-finite loss at epoch {epoch}, step {step}; first non-finite output came from '{op_name}'",
        op_name=op_name, step=step,
    )


def fit(model: Module, optimizer: OptimizerState, train_batches: Callable[[int], Iterable],
        eval_batches: Optional[Callable[[], Iterable]], epochs: int,
        extra_loss: Optional[Callable[[Module], Tensor]] = None, keep_final_policies: bool = False,
        dtype=np.float64, label: str = "train") -> FitResult:
    """
    Generic epoch loop shared by pretraining and fine-tuning.

    Metrics rows use 1-based epochs; the schedule sees the 0-based index.
    """
    result = FitResult(model, optimizer=optimizer)
    step = 0
    for epoch in range(epochs):
        model.train()
        total_loss, correct, count = 0.0, 0, 0
        for images, labels in train_batches(epoch):
            model.zero_grad()
            logits = model(_batch_tensor(images, dtype))
            loss = T.softmax_cross_entropy(logits, labels)
            if extra_loss is not None:
                loss = T.add(loss, extra_loss(model))
            if not np.isfinite(loss.data).all():
                raise _nonfinite_error(loss, epoch + 1, step)
            loss.backward()
            sgd_momentum_step(optimizer, epoch)
            n = len(labels)
            total_loss += float(loss.data) * n
            correct += int(np.count_nonzero(np.argmax(logits.data, axis=1) == labels))
            count += n
            step += 1
            logger.debug(f"[{label}] epoch {epoch + 1} step {step}: loss {float(loss.data):.4f}")
        if count == 0:
            raise ValueError(f"[{label}] epoch {epoch + 1}: the training stream produced no examples")
        train_loss, train_acc = total_loss / count, correct / count
        result.metrics.append((epoch + 1, "train", train_loss, train_acc))
        summary = f"[{label}] epoch {epoch + 1}/{epochs}: train loss {train_loss:.4f} acc {train_acc:.3f}"
        if eval_batches is not None:
            last = epoch == epochs - 1
            evaluation = evaluate(model, eval_batches(), keep_policies=keep_final_policies and last, dtype=dtype)
            result.metrics.append((epoch + 1, "eval", evaluation.loss, evaluation.accuracy))
            for layer, fraction in enumerate(evaluation.fractions):
                result.policies.append((epoch + 1, layer, fraction))
            result.final_eval = evaluation
            summary += f", eval acc {evaluation.accuracy:.3f}"
            if evaluation.fractions:
                summary += " | finetune " + " ".join(f"{f:.2f}" for f in evaluation.fractions)
        logger.info(summary)
    return result


def train_run(config: ExperimentConfig, pretrained: Union[Checkpoint, dict[str, np.ndarray]],
              train_stream, eval_stream) -> FitResult:
    """
    Fine-tune the pretrained backbone on the target task with config.strategy.

    train_stream.epoch(e) yields shuffled (images, labels) batches; eval_stream
    is iterated once per epoch in fixed order.
    """
    dtype = np.dtype(config.precision).type
    setup = setup_from_config(config, pretrained, dtype, num_classes=train_stream.num_classes)
    opt = config.optimizer
    optimizer = build_optimizer(setup.model, opt.lr, opt.momentum, opt.decay_epochs, opt.decay_factor,
                                gate_lr=opt.gate_lr if setup.gated else None)
    extra = None
    if setup.strategy.name == "l2sp":
        alpha, beta, anchor = setup.strategy.l2sp_alpha, setup.strategy.l2sp_beta, setup.anchor
        extra = lambda model: l2sp_penalty(model, anchor, alpha, beta)  # noqa: E731
    logger.info(f"Fine-tuning with strategy '{setup.strategy.name}' for {opt.epochs} epochs "
                f"({setup.frozen_units} frozen units, {'gated' if setup.gated else 'no'} policies)")
    return fit(setup.model, optimizer, train_stream.epoch, eval_stream.epoch_fixed if eval_stream else None,
               opt.epochs, extra_loss=extra, keep_final_policies=config.dump_policies, dtype=dtype,
               label=setup.strategy.name)


def pretrain_run(config: ExperimentConfig, train_stream, eval_stream=None) -> FitResult:
    """
    Standard training of a fresh backbone on the source task.

    Seeded by task.seed so every fine-tuning seed starts from the same checkpoint.
    """
    dtype = np.dtype(config.precision).type
    spec = config.backbone.model_copy(update={"num_classes": train_stream.num_classes})
    model = build_backbone(spec, config.task.seed, dtype)
    settings = config.pretrain
    optimizer = build_optimizer(model, settings.lr, settings.momentum, settings.decay_epochs, settings.decay_factor)
    logger.info(f"Pre-training on the source task for {settings.epochs} epochs")
    return fit(model, optimizer, train_stream.epoch, eval_stream.epoch_fixed if eval_stream else None,
               settings.epochs, dtype=dtype, label="pretrain")
