"""Random-instance checks that embedded and unbound tuners compute the same thing.

Every check draws independent instances from ``numpy.random.default_rng(seed + trial)``
so a failing trial can be replayed from the ``seed`` column of the report.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, BackboneModel, BlockParams, ffn
from .tensor import Tensor, backward, finite_diff_grad, gradient_mismatch, mul, sum_all
from .training import LinearHead, mean_pool
from .tuners import (AdapterState, PrefixState, PromptState, TuningPlan, apply_plan,
                     embedded_prefix_mha, embedded_prompt_mha, res_adapter, res_prefix,
                     res_prompt, serial_adapter, unbound_prefix_mha, unbound_prompt_mha)

GENERATOR = "numpy.random.default_rng(PCG64)"
GATE_TOLERANCE = 1e-12
GRAD_TOLERANCE = 1e-8
FD_RELATIVE_TOLERANCE = 1e-4
FD_ABSOLUTE_TOLERANCE = 1e-6


@dataclass(frozen=True)
class InstanceSpec:
    seed: int = 0
    trials: int = 100
    n_max: int = 16
    r_max: int = 8
    head_dim_max: int = 8
    heads: tuple = (1, 2)
    ffn_hidden_max: int = 16
    tolerance: float = 1e-10
    adapter_tolerance: float = 1e-15
    weight_scale: float = 1.0

    def __post_init__(self):
        if self.tolerance <= 0 or self.adapter_tolerance <= 0:
            raise ValueError("tolerances must be positive")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")

    def trial_seed(self, trial: int) -> int:
        return self.seed + trial


@dataclass
class TrialResult:
    identity: str
    trial: int
    seed: int
    max_abs_diff: float
    tolerance: float
    passed: bool


@dataclass
class EquivalenceReport:
    rows: list = field(default_factory=list)
    agreement: dict = field(default_factory=dict)
    generator: str = GENERATOR

    def add(self, identity, trial, seed, diff, tolerance, extra_ok=True) -> None:
        diff = float(diff)
        self.rows.append(TrialResult(identity, trial, seed, diff, tolerance,
                                     bool(extra_ok and diff <= tolerance)))

    def extend(self, other: "EquivalenceReport") -> "EquivalenceReport":
        self.rows.extend(other.rows)
        self.agreement.update(other.agreement)
        return self

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows) and all(v == 1.0 for v in self.agreement.values())

    def identities(self) -> list[str]:
        return list(dict.fromkeys(r.identity for r in self.rows))

    def max_diff(self, identity: str) -> float:
        return max(r.max_abs_diff for r in self.rows if r.identity == identity)

    def failures(self) -> list[TrialResult]:
        return [r for r in self.rows if not r.passed]

    def summary(self) -> list[tuple[str, float, bool]]:
        out = []
        for name in self.identities():
            rows = [r for r in self.rows if r.identity == name]
            out.append((name, max(r.max_abs_diff for r in rows), all(r.passed for r in rows)))
        return out

    def write_csv(self, path, comment: str | None = None) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            if comment:
                fh.write(comment.rstrip("\n") + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["identity", "trial", "seed", "max_abs_diff", "pass"])
            rows = sorted(self.rows, key=lambda r: (r.identity, r.trial))
            for r in rows:
                w.writerow([r.identity, r.trial, r.seed, f"{r.max_abs_diff:.6e}", int(r.passed)])
            for name, rate in sorted(self.agreement.items()):
                w.writerow([f"agreement_{name}", -1, -1, f"{1.0 - rate:.6e}", int(rate == 1.0)])


# ---------------------------------------------------------------------------
# random instances
# ---------------------------------------------------------------------------

@dataclass
class Instance:
    x: Tensor
    params: BlockParams
    rng: np.random.Generator

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def model_dim(self) -> int:
        return self.x.shape[1]


def random_block(rng: np.random.Generator, model_dim: int, num_heads: int, ffn_hidden: int,
                 weight_scale: float = 1.0) -> BlockParams:
    """Block with O(1) attention logits so the softmax is far from uniform."""
    cfg = BackboneConfig(depth=1, model_dim=model_dim, num_heads=num_heads, ffn_hidden=ffn_hidden)
    params = BlockParams.init(cfg, rng)
    for name, t in params.tensors().items():
        if name.startswith("w_"):
            t.data = rng.normal(0.0, weight_scale / np.sqrt(t.shape[0]), t.shape)
        elif name.startswith("b_"):
            t.data = rng.normal(0.0, 0.1, t.shape)
    return params


def random_instance(spec: InstanceSpec, seed: int, n: int | None = None,
                    num_heads: int | None = None) -> Instance:
    rng = np.random.default_rng(seed)
    H = num_heads or int(rng.choice(spec.heads))
    d = int(rng.integers(1, spec.head_dim_max + 1))
    n = n or int(rng.integers(1, spec.n_max + 1))
    f = int(rng.integers(1, spec.ffn_hidden_max + 1))
    params = random_block(rng, H * d, H, f, spec.weight_scale)
    x = Tensor(rng.normal(size=(n, H * d)))
    return Instance(x, params, rng)


def random_prefix(inst: Instance, r: int | None = None, spec: InstanceSpec | None = None,
                  requires_grad: bool = False) -> PrefixState:
    r_max = spec.r_max if spec else 8
    r = int(inst.rng.integers(1, r_max + 1)) if r is None else r
    shape = (r, inst.model_dim)
    return PrefixState(Tensor(inst.rng.normal(size=shape), requires_grad=requires_grad),
                       Tensor(inst.rng.normal(size=shape), requires_grad=requires_grad))


def random_prompt(inst: Instance, r: int | None = None, spec: InstanceSpec | None = None,
                  requires_grad: bool = False) -> PromptState:
    r_max = spec.r_max if spec else 8
    r = int(inst.rng.integers(1, r_max + 1)) if r is None else r
    return PromptState(Tensor(inst.rng.normal(size=(r, inst.model_dim)), requires_grad=requires_grad))


def random_adapter(inst: Instance, r: int | None = None, requires_grad: bool = False) -> AdapterState:
    r = int(inst.rng.integers(1, 9)) if r is None else r
    dm = inst.model_dim
    return AdapterState(Tensor(inst.rng.normal(0.0, 1.0 / np.sqrt(dm), (dm, r)), requires_grad=requires_grad),
                        Tensor(inst.rng.normal(0.0, 1.0 / np.sqrt(r), (r, dm)), requires_grad=requires_grad))


# ---------------------------------------------------------------------------
# closed-form gates, computed straight from the definitions
# ---------------------------------------------------------------------------

def _head_logits(q: np.ndarray, k: np.ndarray, H: int) -> list[np.ndarray]:
    d = q.shape[1] // H
    return [q[:, h * d:(h + 1) * d] @ k[:, h * d:(h + 1) * d].T / np.sqrt(d) for h in range(H)]


def closed_form_gate(main_logits: np.ndarray, side_logits: np.ndarray) -> np.ndarray:
    """sum(exp(side)) / (sum(exp(main)) + sum(exp(side))) per row."""
    m = np.maximum(main_logits.max(axis=1), side_logits.max(axis=1))[:, None]
    side = np.exp(side_logits - m).sum(axis=1)
    main = np.exp(main_logits - m).sum(axis=1)
    return side / (main + side)


def mass_ratio_gate(main_logits: np.ndarray, side_logits: np.ndarray) -> np.ndarray:
    """Softmax mass on the side columns of the concatenated logit row."""
    s = np.concatenate([side_logits, main_logits], axis=1)
    p = np.exp(s - s.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    return p[:, :side_logits.shape[1]].sum(axis=1)


def _gate_row(report, name, trial, seed, closed, mass, tuned):
    diff = max(np.abs(closed - mass).max(), np.abs(closed - tuned).max())
    inside = bool(np.all((tuned > 0) & (tuned < 1)) and np.all((closed > 0) & (closed < 1)))
    report.add(name, trial, seed, diff, GATE_TOLERANCE, inside)


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------

def check_prefix_identity(spec: InstanceSpec = InstanceSpec()) -> EquivalenceReport:
    report = EquivalenceReport()
    for trial in range(spec.trials):
        seed = spec.trial_seed(trial)
        inst = random_instance(spec, seed)
        pre = random_prefix(inst, spec=spec)
        p = inst.params
        emb = embedded_prefix_mha(inst.x, p, pre).data
        unb = unbound_prefix_mha(inst.x, p, pre).data
        report.add("prefix", trial, seed, np.abs(emb - unb).max(), spec.tolerance)

        H = p.num_heads
        q = inst.x.data @ p.w_q.data
        k = inst.x.data @ p.w_k.data
        _, lam = res_prefix(inst.x, p, pre)
        main = _head_logits(q, k, H)
        side = _head_logits(q, pre.k_pre.data, H)
        closed = np.stack([closed_form_gate(a, b) for a, b in zip(main, side)])
        mass = np.stack([mass_ratio_gate(a, b) for a, b in zip(main, side)])
        _gate_row(report, "prefix_gate", trial, seed, closed, mass, lam.data)
    return report


def check_prompt_identity(spec: InstanceSpec = InstanceSpec()) -> EquivalenceReport:
    report = EquivalenceReport()
    for trial in range(spec.trials):
        seed = spec.trial_seed(trial)
        inst = random_instance(spec, seed)
        pro = random_prompt(inst, spec=spec)
        p = inst.params
        ex, ep = embedded_prompt_mha(inst.x, p, pro)
        ux, up = unbound_prompt_mha(inst.x, p, pro)
        report.add("prompt_rows", trial, seed, np.abs(ex.data - ux.data).max(), spec.tolerance)
        report.add("prompt_disposable", trial, seed, np.abs(ep.data - up.data).max(), spec.tolerance)

        H = p.num_heads
        x, xp = inst.x.data, pro.x_pro.data
        q, k = x @ p.w_q.data, x @ p.w_k.data
        qp, kp = xp @ p.w_q.data, xp @ p.w_k.data
        _, lam, _, beta = res_prompt(inst.x, p, pro)
        main, side = _head_logits(q, k, H), _head_logits(q, kp, H)
        _gate_row(report, "prompt_gate_lambda", trial, seed,
                  np.stack([closed_form_gate(a, b) for a, b in zip(main, side)]),
                  np.stack([mass_ratio_gate(a, b) for a, b in zip(main, side)]), lam.data)
        # beta weighs the original keys as seen from prompt queries
        own, cross = _head_logits(qp, kp, H), _head_logits(qp, k, H)
        _gate_row(report, "prompt_gate_beta", trial, seed,
                  np.stack([closed_form_gate(a, b) for a, b in zip(own, cross)]),
                  np.stack([mass_ratio_gate(a, b) for a, b in zip(own, cross)]), beta.data)
    return report


def check_adapter_identity(spec: InstanceSpec = InstanceSpec()) -> EquivalenceReport:
    report = EquivalenceReport()
    for trial in range(spec.trials):
        seed = spec.trial_seed(trial)
        inst = random_instance(spec, seed)
        ad = random_adapter(inst)
        h = ffn(inst.x, inst.params)
        serial = serial_adapter(h, ad).data
        parallel = (h + res_adapter(h, ad)).data
        report.add("adapter", trial, seed, np.abs(serial - parallel).max(), spec.adapter_tolerance)
    return report


def _grads(loss_fn, tensors):
    for t in tensors:
        t.grad = None
    backward(loss_fn())
    return [t.grad.copy() for t in tensors]


def _fd_row(report, name, trial, seed, analytic, f, x):
    numeric = finite_diff_grad(f, x, 1e-5)
    rel, ab = gradient_mismatch(analytic, numeric)
    report.add(name, trial, seed, rel, FD_RELATIVE_TOLERANCE, ab < FD_ABSOLUTE_TOLERANCE)


def check_gradient_identity(spec: InstanceSpec = InstanceSpec(trials=10, n_max=6, r_max=4,
                                                              head_dim_max=4)) -> EquivalenceReport:
    """Tuner-parameter gradients agree across forms and with finite differences."""
    report = EquivalenceReport()
    for trial in range(spec.trials):
        seed = spec.trial_seed(trial)
        inst = random_instance(spec, seed)
        p, x = inst.params, inst.x
        weights = Tensor(inst.rng.normal(size=(x.shape[0], inst.model_dim)))

        def weighted(out):
            return sum_all(mul(out, weights))

        pre = random_prefix(inst, spec=spec, requires_grad=True)
        ge = _grads(lambda: weighted(embedded_prefix_mha(x, p, pre)), [pre.k_pre, pre.v_pre])
        gu = _grads(lambda: weighted(unbound_prefix_mha(x, p, pre)), [pre.k_pre, pre.v_pre])
        report.add("prefix_grad", trial, seed,
                   max(np.abs(a - b).max() for a, b in zip(ge, gu)), GRAD_TOLERANCE)
        _fd_row(report, "prefix_grad_fd", trial, seed, gu[1],
                lambda v: weighted(unbound_prefix_mha(x, p, PrefixState(pre.k_pre, v))), pre.v_pre)

        pro = random_prompt(inst, spec=spec, requires_grad=True)
        ge = _grads(lambda: weighted(embedded_prompt_mha(x, p, pro)[0]), [pro.x_pro])
        gu = _grads(lambda: weighted(unbound_prompt_mha(x, p, pro)[0]), [pro.x_pro])
        report.add("prompt_grad", trial, seed, np.abs(ge[0] - gu[0]).max(), GRAD_TOLERANCE)
        _fd_row(report, "prompt_grad_fd", trial, seed, gu[0],
                lambda v: weighted(unbound_prompt_mha(x, p, PromptState(v))[0]), pro.x_pro)
        _fd_row(report, "prompt_grad_fd_embedded", trial, seed, ge[0],
                lambda v: weighted(embedded_prompt_mha(x, p, PromptState(v))[0]), pro.x_pro)

        ad = random_adapter(inst, requires_grad=True)
        h = ffn(x, p)
        ge = _grads(lambda: weighted(serial_adapter(h, ad)), [ad.w_down, ad.w_up])
        gu = _grads(lambda: weighted(h + res_adapter(h, ad)), [ad.w_down, ad.w_up])
        report.add("adapter_grad", trial, seed,
                   max(np.abs(a - b).max() for a, b in zip(ge, gu)), 1e-12)
    return report


def agreement_model(seed: int, kind: str, depth: int = 2, model_dim: int = 8, num_heads: int = 2,
                    width: int = 4, num_classes: int = 5):
    """A small backbone with O(1) weights, a Single plan of ``kind`` and a random head."""
    rng = np.random.default_rng(seed)
    cfg = BackboneConfig(depth=depth, model_dim=model_dim, num_heads=num_heads, ffn_hidden=2 * model_dim)
    model = BackboneModel.init(cfg, seed)
    for l in range(depth):
        model.blocks[l] = random_block(rng, model_dim, num_heads, cfg.ffn_hidden)
    attach = "FFN" if kind == "adapter" else "MHA"
    plan = TuningPlan.single(depth, kind, attach, width).initialize(cfg, seed)
    for t in plan.parameters():
        t.data = rng.normal(0.0, 1.0 / np.sqrt(t.shape[0]), t.shape)
    head = LinearHead(Tensor(rng.normal(size=(model_dim, num_classes))),
                      Tensor(rng.normal(size=num_classes)))
    return model, plan, head


def check_prediction_agreement(spec: InstanceSpec = InstanceSpec(), kind: str = "prefix",
                               inputs: int = 500) -> float:
    """Fraction of random inputs on which both forms predict the same class."""
    model, plan, head = agreement_model(spec.seed, kind)
    rng = np.random.default_rng(spec.seed + 7919)
    same = 0
    for _ in range(inputs):
        n = int(rng.integers(1, spec.n_max + 1))
        x = Tensor(rng.normal(size=(n, model.config.model_dim)))
        a = head(mean_pool(apply_plan(x, model, plan, "embedded"))).data
        b = head(mean_pool(apply_plan(x, model, plan, "unbound"))).data
        same += int(np.argmax(a) == np.argmax(b))
    return same / inputs


def run_suite(spec: InstanceSpec = InstanceSpec(), agreement_inputs: int = 500,
              gradient_trials: int = 10, jobs: int = 1) -> EquivalenceReport:
    """All identity, gate, gradient and agreement checks.

    With ``jobs > 1`` the independent checks run on a thread pool; results are
    merged in a fixed order, so the report does not depend on ``jobs``.
    """
    gspec = InstanceSpec(seed=spec.seed, trials=min(gradient_trials, spec.trials), n_max=6,
                         r_max=4, head_dim_max=4, heads=spec.heads)
    checks = [(check_prefix_identity, spec), (check_prompt_identity, spec),
              (check_adapter_identity, spec), (check_gradient_identity, gspec)]
    kinds = ("prefix", "prompt", "adapter")
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        parts = [pool.submit(fn, s) for fn, s in checks]
        rates = [pool.submit(check_prediction_agreement, spec, k, agreement_inputs) for k in kinds]
        report = EquivalenceReport()
        for f in parts:
            report.extend(f.result())
        for k, f in zip(kinds, rates):
            report.agreement[k] = f.result()
    return report
