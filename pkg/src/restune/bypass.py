"""Detached bypass network over cached backbone activations.

    xb_0 = x_0
    xb_l = lam_l * T_h(x_l) + (1 - lam_l) * T_v(xb_{l-1}),   lam_l = sigmoid(g_l)

The horizontal tuner T_h reads the backbone's layer output from an
:class:`ActivationCache`; the vertical tuner T_v reads the previous bypass
state.  Cached activations are detached, so no gradient can reach the backbone
and one backbone pass serves any number of task heads.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneModel, ForwardRecord, backbone_forward
from .tensor import ContractError, DimensionError, Tape, Tensor, backward, sigmoid
from .training import LinearHead, cross_entropy, mean_pool
from .tuners import (DEFAULT_WIDTH, TuningPlan, TunerSpec, apply_plan, bank_tuner,
                     init_state, res_adapter, token_tuner)


@dataclass(frozen=True)
class ActivationCache:
    """Read-only copies of x_0 ... x_L; ``segments`` gives token counts of stacked sequences."""

    activations: tuple
    source_forward_count: int
    segments: tuple = ()

    @property
    def depth(self) -> int:
        return len(self.activations) - 1


def _frozen_copy(t: Tensor) -> Tensor:
    c = Tensor(t.data.copy())
    c.data.setflags(write=False)
    return c


def build_cache(record: ForwardRecord) -> ActivationCache:
    acts = record.activations
    if len(acts) < 2 or any(a is None for a in acts):
        raise ContractError(f"forward record is incomplete ({len(acts)} activations)")
    if len(record.mha_out) != len(acts) - 1:
        raise ContractError("forward record has mismatched activation and sub-layer lists")
    return ActivationCache(tuple(_frozen_copy(a) for a in acts), record.forward_count,
                           (acts[0].shape[0],))


def stack_caches(caches) -> ActivationCache:
    """Row-stack several caches of equal depth into one batch cache."""
    caches = list(caches)
    depths = {c.depth for c in caches}
    if len(depths) != 1:
        raise DimensionError(f"caches of different depths {sorted(depths)}")
    acts = tuple(Tensor(np.concatenate([c.activations[l].data for c in caches]))
                 for l in range(caches[0].depth + 1))
    for a in acts:
        a.data.setflags(write=False)
    segments = tuple(s for c in caches for s in c.segments)
    return ActivationCache(acts, -1, segments)


@dataclass(frozen=True)
class BypassConfig:
    """Tuner structure per group; ``None`` makes that group an identity map."""

    depth: int
    horizontal: TunerSpec | None = field(default_factory=lambda: TunerSpec("adapter", "Block", DEFAULT_WIDTH))
    vertical: TunerSpec | None = field(default_factory=lambda: TunerSpec("adapter", "Block", DEFAULT_WIDTH))

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"bypass depth must be >= 1, got {self.depth}")


class Bypass:
    def __init__(self, cfg: BypassConfig, model_config, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg

        def group(spec):
            if spec is None:
                return [None] * cfg.depth
            spec = TunerSpec(spec.kind, "Block", spec.width)
            return [init_state(spec, model_config, rng) for _ in range(cfg.depth)]

        self.horizontal = group(cfg.horizontal)
        self.vertical = group(cfg.vertical)
        self.gates = [Tensor(np.zeros(1), requires_grad=True) for _ in range(cfg.depth)]

    def gate_values(self) -> np.ndarray:
        return np.array([sigmoid(g).item() for g in self.gates])

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for l in range(self.cfg.depth):
            for group, states in (("horizontal", self.horizontal), ("vertical", self.vertical)):
                if states[l] is not None:
                    for name, t in states[l].tensors().items():
                        out[f"bypass/{l + 1}/{group}/{name}"] = t
        for l, g in enumerate(self.gates):
            out[f"bypass/gate/{l + 1}"] = g
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())


def _tune(u: Tensor, spec: TunerSpec | None, state) -> Tensor:
    if spec is None:
        return u
    if spec.kind == "adapter":
        return u + res_adapter(u, state)
    if spec.kind == "prefix":
        return u + bank_tuner(u, state)
    return u + token_tuner(u, state)


def bypass_forward(cache: ActivationCache, bypass: Bypass) -> Tensor:
    """Final bypass state xb_L."""
    if cache.depth != bypass.cfg.depth:
        raise DimensionError(f"cache depth {cache.depth} != bypass depth {bypass.cfg.depth}")
    cfg = bypass.cfg
    xb = cache.activations[0]
    for l in range(1, cfg.depth + 1):
        lam = sigmoid(bypass.gates[l - 1])
        h = _tune(cache.activations[l], cfg.horizontal, bypass.horizontal[l - 1])
        v = _tune(xb, cfg.vertical, bypass.vertical[l - 1])
        xb = lam * h + (1.0 - lam) * v
    return xb


@dataclass
class TaskHead:
    """A task's private bypass and linear readout; ``bypass=None`` is a linear probe."""

    task_id: str
    head: LinearHead
    bypass: Bypass | None = None

    @classmethod
    def init(cls, task_id: str, model_config, num_classes: int,
             cfg: BypassConfig | None = None, seed: int = 0) -> "TaskHead":
        rng = np.random.default_rng(seed)
        head = LinearHead.init(model_config.model_dim, num_classes, rng)
        bypass = Bypass(cfg, model_config, seed + 1) if cfg is not None else None
        return cls(task_id, head, bypass)

    def features(self, cache: ActivationCache) -> Tensor:
        if self.bypass is None:
            return cache.activations[-1]
        return bypass_forward(cache, self.bypass)

    def logits(self, cache: ActivationCache) -> Tensor:
        return self.head(mean_pool(self.features(cache), cache.segments))

    def named_tensors(self) -> dict[str, Tensor]:
        out = self.head.named_tensors(f"task/{self.task_id}/head")
        if self.bypass is not None:
            out.update({f"task/{self.task_id}/{k}": v for k, v in self.bypass.named_tensors().items()})
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())


@dataclass
class StepResult:
    loss: float
    grad_recipients: set
    retained_scalars: int


def train_step(task: TaskHead, cache: ActivationCache, labels, optimizer,
               loss_fn=cross_entropy) -> StepResult:
    """One optimizer update of the task's tuners, gates and head."""
    optimizer.zero_grad()
    loss = loss_fn(task.logits(cache), labels)
    tape = backward(loss)
    names = {name for name, t in task.named_tensors().items() if t.grad is not None}
    optimizer.step()
    return StepResult(loss.item(), names, tape.retained_scalars())


@dataclass
class MultiTaskResult:
    outputs: dict
    forward_delta: int


def multi_task_infer(x0: Tensor, model: BackboneModel, tasks) -> MultiTaskResult:
    """Evaluate every task head from a single backbone pass."""
    tasks = list(tasks)
    if not tasks:
        raise ContractError("multi-task inference needs at least one task")
    before = model.forward_count
    cache = build_cache(backbone_forward(x0, model))
    outputs = {t.task_id: t.logits(cache).numpy() for t in tasks}
    delta = model.forward_count - before
    if delta != 1:
        raise ContractError(f"expected one backbone pass, saw {delta}")
    return MultiTaskResult(outputs, delta)


@dataclass
class PlanTask:
    """Baseline task: an embedded tuning plan with its own head."""

    task_id: str
    plan: TuningPlan
    head: LinearHead


def embedded_multi_task_infer(x0: Tensor, model: BackboneModel, tasks) -> MultiTaskResult:
    """Baseline: each task runs its own tuned backbone pass."""
    tasks = list(tasks)
    if not tasks:
        raise ContractError("multi-task inference needs at least one task")
    before = model.forward_count
    outputs = {t.task_id: t.head(mean_pool(apply_plan(x0, model, t.plan))).numpy() for t in tasks}
    return MultiTaskResult(outputs, model.forward_count - before)


@dataclass
class MemoryProxy:
    trainable_params: int
    retained_scalars: int


def memory_proxy(loss: Tensor, params) -> MemoryProxy:
    """Trainable scalars plus scalars the loss's tape holds for backward."""
    return MemoryProxy(sum(p.size for p in params if p.requires_grad),
                       Tape.from_output(loss).retained_scalars())
