"""Res-Tuners: adapter, prefix and prompt tuning in embedded and unbound form.

The unbound forms split attention over concatenated key sets into the frozen
branch and a parallel tuner branch, mixed by a gate equal to the tuner keys'
share of the softmax mass:

    lam = sum(exp(s_tuner)) / (sum(exp(s_main)) + sum(exp(s_tuner)))
        = sigmoid(logsumexp(s_tuner) - logsumexp(s_main))

Gates are per head and per query row, since softmax normalizes row by row.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import (INIT_STD, BackboneConfig, BackboneModel, BlockParams, ForwardRecord,
                       attention, attention_logits, block_forward, ffn, head_slices,
                       multi_head_attention, project_qkv)
from .tensor import (DimensionError, Tensor, gelu, hcat, matmul, ones, row_logsumexp,
                     row_slice, sigmoid, vcat, zeros)

KINDS = ("adapter", "prefix", "prompt")
ATTACH_POINTS = ("MHA", "FFN", "Block")
DEFAULT_WIDTH = 10


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class TunerSpec:
    kind: str = "adapter"
    attach: str = "FFN"
    width: int = DEFAULT_WIDTH
    activation: str = "gelu"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PlanError(f"unknown tuner kind {self.kind!r}; expected one of {KINDS}")
        if self.attach not in ATTACH_POINTS:
            raise PlanError(f"unknown attach point {self.attach!r}; expected one of {ATTACH_POINTS}")
        if self.width < 1:
            raise PlanError(f"tuner width must be >= 1, got {self.width}")
        if self.activation != "gelu":
            raise PlanError(f"unsupported activation {self.activation!r}")

    @property
    def native(self) -> bool:
        """True where the tuner has an embedded (original) form at this attach point."""
        return self.kind == "adapter" or self.attach == "MHA"


def _param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


class _State:
    def tensors(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}

    def parameters(self) -> list[Tensor]:
        return list(self.tensors().values())


@dataclass
class AdapterState(_State):
    w_down: Tensor
    w_up: Tensor

    @classmethod
    def init(cls, model_dim: int, width: int, rng: np.random.Generator) -> "AdapterState":
        return cls(_param(rng.normal(0.0, INIT_STD, (model_dim, width))),
                   _param(np.zeros((width, model_dim))))


@dataclass
class PrefixState(_State):
    """Key and value banks, r x model_dim; head h owns columns [h*d, (h+1)*d)."""

    k_pre: Tensor
    v_pre: Tensor

    @classmethod
    def init(cls, model_dim: int, width: int, rng: np.random.Generator) -> "PrefixState":
        return cls(_param(rng.normal(0.0, INIT_STD, (width, model_dim))),
                   _param(rng.normal(0.0, INIT_STD, (width, model_dim))))

    @property
    def width(self) -> int:
        return self.k_pre.shape[0]


@dataclass
class PromptState(_State):
    x_pro: Tensor

    @classmethod
    def init(cls, model_dim: int, width: int, rng: np.random.Generator) -> "PromptState":
        return cls(_param(rng.normal(0.0, INIT_STD, (width, model_dim))))

    @property
    def width(self) -> int:
        return self.x_pro.shape[0]


@dataclass
class BankState(_State):
    """Prefix-style tuner away from MHA: learnable query projection and key/value banks."""

    w_query: Tensor
    keys: Tensor
    values: Tensor

    @classmethod
    def init(cls, model_dim: int, head_dim: int, width: int,
             rng: np.random.Generator) -> "BankState":
        return cls(_param(rng.normal(0.0, INIT_STD, (model_dim, head_dim))),
                   _param(rng.normal(0.0, INIT_STD, (width, head_dim))),
                   _param(np.zeros((width, model_dim))))


@dataclass
class TokenState(_State):
    """Prompt-style tuner away from MHA: learnable tokens with their own projections."""

    x_pro: Tensor
    w_query: Tensor
    w_key: Tensor
    w_value: Tensor

    @classmethod
    def init(cls, model_dim: int, head_dim: int, width: int,
             rng: np.random.Generator) -> "TokenState":
        return cls(_param(rng.normal(0.0, INIT_STD, (width, model_dim))),
                   _param(rng.normal(0.0, INIT_STD, (model_dim, head_dim))),
                   _param(rng.normal(0.0, INIT_STD, (model_dim, head_dim))),
                   _param(np.zeros((model_dim, model_dim))))


def init_state(spec: TunerSpec, config: BackboneConfig, rng: np.random.Generator):
    d_model, d, r = config.model_dim, config.head_dim, spec.width
    if spec.kind == "adapter":
        return AdapterState.init(d_model, r, rng)
    if spec.attach == "MHA":
        cls = PrefixState if spec.kind == "prefix" else PromptState
        return cls.init(d_model, r, rng)
    if spec.kind == "prefix":
        return BankState.init(d_model, d, r, rng)
    return TokenState.init(d_model, d, r, rng)


# ---------------------------------------------------------------------------
# gates
# ---------------------------------------------------------------------------

def softmax_gate(main_logits: Tensor, side_logits: Tensor) -> Tensor:
    """Share of each row's softmax mass falling on the side keys (m x 1)."""
    if main_logits.shape[0] != side_logits.shape[0]:
        raise DimensionError(f"gate rows differ: {main_logits.shape} vs {side_logits.shape}")
    return sigmoid(row_logsumexp(side_logits) - row_logsumexp(main_logits))


def _expand(col: Tensor, width: int) -> Tensor:
    return matmul(col, ones(1, width))


def _mix(gate: Tensor, main: Tensor, side: Tensor) -> Tensor:
    """(1 - gate) * main + gate * side, gate broadcast along columns."""
    g = _expand(gate, main.shape[1])
    return (1.0 - g) * main + g * side


def _stack_gates(cols: list[Tensor]) -> Tensor:
    return hcat(cols).T


def _gate_col(gates: Tensor, h: int) -> Tensor:
    return row_slice(gates, h, h + 1).T


# ---------------------------------------------------------------------------
# prefix tuning
# ---------------------------------------------------------------------------

def embedded_prefix_mha(x: Tensor, params: BlockParams, pre: PrefixState) -> Tensor:
    """Attention with prefix banks prepended to the projected keys and values."""
    q, k, v = project_qkv(x, params)
    H = params.num_heads
    heads = [attention(qh, vcat([kp, kh]), vcat([vp, vh]))
             for qh, kh, vh, kp, vp in zip(head_slices(q, H), head_slices(k, H),
                                           head_slices(v, H), head_slices(pre.k_pre, H),
                                           head_slices(pre.v_pre, H))]
    return matmul(hcat(heads), params.w_o)


def _res_prefix_heads(qs, ks, kps, vps):
    outs, gates = [], []
    for qh, kh, kp, vp in zip(qs, ks, kps, vps):
        outs.append(attention(qh, kp, vp))
        gates.append(softmax_gate(attention_logits(qh, kh), attention_logits(qh, kp)))
    return outs, gates


def res_prefix(x: Tensor, params: BlockParams, pre: PrefixState) -> tuple[Tensor, Tensor]:
    """Parallel prefix branch.

    Returns the per-head prefix attention, heads concatenated (n x model_dim,
    before the output projection), and the gates as a heads x n tensor.
    An empty prefix yields a zero branch with zero gates.
    """
    n, H = x.shape[0], params.num_heads
    if pre.width == 0:
        return zeros(n, params.w_q.shape[1]), zeros(H, n)
    q, k, _ = project_qkv(x, params)
    outs, gates = _res_prefix_heads(head_slices(q, H), head_slices(k, H),
                                    head_slices(pre.k_pre, H), head_slices(pre.v_pre, H))
    return hcat(outs), _stack_gates(gates)


def unbound_prefix_mha(x: Tensor, params: BlockParams, pre: PrefixState) -> Tensor:
    """Frozen attention and prefix branch computed apart, then gated and projected."""
    q, k, v = project_qkv(x, params)
    H = params.num_heads
    qs, ks, vs = head_slices(q, H), head_slices(k, H), head_slices(v, H)
    main = [attention(qh, kh, vh) for qh, kh, vh in zip(qs, ks, vs)]
    if pre.width == 0:
        return matmul(hcat(main), params.w_o)
    outs, gates = _res_prefix_heads(qs, ks, head_slices(pre.k_pre, H), head_slices(pre.v_pre, H))
    heads = [_mix(g, m, t) for g, m, t in zip(gates, main, outs)]
    return matmul(hcat(heads), params.w_o)


# ---------------------------------------------------------------------------
# prompt tuning
# ---------------------------------------------------------------------------

def embedded_prompt_mha(x: Tensor, params: BlockParams,
                        pro: PromptState) -> tuple[Tensor, Tensor]:
    """MHA over [x; x_pro].  Returns (original-token rows, prompt rows)."""
    n = x.shape[0]
    xx = vcat([x, pro.x_pro]) if pro.width else x
    out = multi_head_attention(xx, params)
    y_x = row_slice(out, 0, n)
    y_pro = row_slice(out, n, n + pro.width) if pro.width else zeros(0, out.shape[1])
    return y_x, y_pro


def _res_prompt_heads(qs, ks, vs, qps, kps, vps):
    outs, lams, ds, betas = [], [], [], []
    for qh, kh, vh, qp, kp, vp in zip(qs, ks, vs, qps, kps, vps):
        outs.append(attention(qh, kp, vp))
        lams.append(softmax_gate(attention_logits(qh, kh), attention_logits(qh, kp)))
        beta = softmax_gate(attention_logits(qp, kp), attention_logits(qp, kh))
        ds.append(_mix(beta, attention(qp, kp, vp), attention(qp, kh, vh)))
        betas.append(beta)
    return outs, lams, ds, betas


def res_prompt(x: Tensor, params: BlockParams, pro: PromptState):
    """Parallel prompt branch: (tuner_out, lam, D, beta).

    ``tuner_out`` is Attn(Q, K_pro, V_pro) per head (n x model_dim); ``D`` holds
    the prompt-token rows (r x model_dim), both before the output projection.
    ``lam`` is heads x n, ``beta`` heads x r.
    """
    n, H, width = x.shape[0], params.num_heads, pro.width
    dm = params.w_q.shape[1]
    if width == 0:
        return zeros(n, dm), zeros(H, n), zeros(0, dm), zeros(H, 0)
    q, k, v = project_qkv(x, params)
    qp, kp, vp = project_qkv(pro.x_pro, params)
    parts = [head_slices(t, H) for t in (q, k, v, qp, kp, vp)]
    outs, lams, ds, betas = _res_prompt_heads(*parts)
    return hcat(outs), _stack_gates(lams), hcat(ds), _stack_gates(betas)


def unbound_prompt_mha(x: Tensor, params: BlockParams,
                       pro: PromptState) -> tuple[Tensor, Tensor]:
    """Gated frozen + prompt branches.  Returns (original-token rows, D projected)."""
    q, k, v = project_qkv(x, params)
    H = params.num_heads
    qs, ks, vs = head_slices(q, H), head_slices(k, H), head_slices(v, H)
    main = [attention(qh, kh, vh) for qh, kh, vh in zip(qs, ks, vs)]
    if pro.width == 0:
        return matmul(hcat(main), params.w_o), zeros(0, params.w_o.shape[1])
    qp, kp, vp = project_qkv(pro.x_pro, params)
    outs, lams, ds, _ = _res_prompt_heads(qs, ks, vs, head_slices(qp, H),
                                          head_slices(kp, H), head_slices(vp, H))
    heads = [_mix(g, m, t) for g, m, t in zip(lams, main, outs)]
    return matmul(hcat(heads), params.w_o), matmul(hcat(ds), params.w_o)


# ---------------------------------------------------------------------------
# adapters and off-MHA attention tuners
# ---------------------------------------------------------------------------

def _check_width(h: Tensor, w: Tensor) -> None:
    if h.ndim != 2 or h.shape[1] != w.shape[0]:
        raise DimensionError(f"input {h.shape} does not match projection {w.shape}")


def serial_adapter(h: Tensor, ad: AdapterState) -> Tensor:
    """Adapter inserted in series: h + phi(h W_down) W_up."""
    _check_width(h, ad.w_down)
    return h + matmul(gelu(matmul(h, ad.w_down)), ad.w_up)


def res_adapter(op_out: Tensor, ad: AdapterState) -> Tensor:
    """Residual term phi(op_out W_down) W_up; the caller adds it to ``op_out``."""
    _check_width(op_out, ad.w_down)
    return matmul(gelu(matmul(op_out, ad.w_down)), ad.w_up)


def bank_tuner(u: Tensor, st: BankState) -> Tensor:
    _check_width(u, st.w_query)
    return attention(matmul(u, st.w_query), st.keys, st.values)


def token_tuner(u: Tensor, st: TokenState) -> Tensor:
    _check_width(u, st.w_query)
    return attention(matmul(u, st.w_query), matmul(st.x_pro, st.w_key),
                     matmul(st.x_pro, st.w_value))


def res_tuner(op_in: Tensor, op_out: Tensor, spec: TunerSpec, state) -> Tensor:
    """Residual branch for an additive (non-gated) attachment."""
    if spec.kind == "adapter":
        return res_adapter(op_out, state)
    if spec.kind == "prefix":
        return bank_tuner(op_in, state)
    return token_tuner(op_in, state)


# ---------------------------------------------------------------------------
# plans
# ---------------------------------------------------------------------------

@dataclass
class PlanEntry:
    block: int
    spec: TunerSpec

    @property
    def key(self) -> tuple[int, str]:
        return self.block, self.spec.attach


@dataclass
class TuningPlan:
    """Which tuners attach where, plus their learnable states once initialized."""

    entries: list[PlanEntry] = field(default_factory=list)
    name: str = "custom"
    states: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        keys = [e.key for e in self.entries]
        dupes = {k for k in keys if keys.count(k) > 1}
        if dupes:
            raise PlanError(f"more than one tuner at {sorted(dupes)}")
        for e in self.entries:
            if e.block < 0:
                raise PlanError(f"negative block index {e.block}")

    @classmethod
    def build(cls, depth: int, kinds: dict[str, str], width: int = DEFAULT_WIDTH,
              name: str = "custom") -> "TuningPlan":
        entries = [PlanEntry(l, TunerSpec(kind, attach, width))
                   for l in range(depth) for attach, kind in kinds.items()]
        return cls(entries, name)

    @classmethod
    def single(cls, depth: int, kind: str = "adapter", attach: str = "FFN",
               width: int = DEFAULT_WIDTH) -> "TuningPlan":
        return cls.build(depth, {attach: kind}, width, "single")

    @classmethod
    def dual(cls, depth: int, mha: str = "adapter", ffn: str = "adapter",
             width: int = DEFAULT_WIDTH) -> "TuningPlan":
        return cls.build(depth, {"MHA": mha, "FFN": ffn}, width, "dual")

    @classmethod
    def tri(cls, depth: int, mha: str = "adapter", ffn: str = "adapter",
            block: str = "adapter", width: int = DEFAULT_WIDTH) -> "TuningPlan":
        return cls.build(depth, {"MHA": mha, "FFN": ffn, "Block": block}, width, "tri")

    def initialize(self, config: BackboneConfig, seed: int = 0) -> "TuningPlan":
        rng = np.random.default_rng(seed)
        for e in self.entries:
            if e.block >= config.depth:
                raise PlanError(f"block {e.block} does not exist in a depth-{config.depth} model")
            self.states[e.key] = init_state(e.spec, config, rng)
        return self

    def lookup(self, block: int, attach: str):
        for e in self.entries:
            if e.key == (block, attach):
                if e.key not in self.states:
                    raise PlanError(f"plan entry {e.key} has no state; call initialize()")
                return e.spec, self.states[e.key]
        return None, None

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for (block, attach), st in sorted(self.states.items()):
            for name, t in st.tensors().items():
                out[f"tuner/{block}/{attach}/{name}"] = t
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def to_dict(self) -> dict:
        return {"name": self.name,
                "entries": [{"block": e.block, "attach": e.spec.attach,
                             "kind": e.spec.kind, "r": e.spec.width} for e in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "TuningPlan":
        try:
            entries = [PlanEntry(int(e["block"]),
                                 TunerSpec(e["kind"], e["attach"], int(e.get("r", DEFAULT_WIDTH))))
                       for e in d["entries"]]
        except KeyError as exc:
            raise PlanError(f"plan entry missing field {exc}") from None
        return cls(entries, d.get("name", "custom"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TuningPlan":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save_states(self, path) -> None:
        from .checkpoint import save_tensors

        save_tensors(path, self.named_tensors(), {"plan": self.to_dict()})


def _mha_with(spec, state, form):
    if spec is None:
        return None
    if spec.kind == "adapter":
        if form == "embedded":
            return lambda h, p: serial_adapter(multi_head_attention(h, p), state)
        return lambda h, p: _add_res(multi_head_attention(h, p), state)
    if spec.kind == "prefix":
        fn = embedded_prefix_mha if form == "embedded" else unbound_prefix_mha
        return lambda h, p: fn(h, p, state)
    fn = embedded_prompt_mha if form == "embedded" else unbound_prompt_mha
    return lambda h, p: fn(h, p, state)[0]


def _add_res(op_out, state):
    return op_out + res_adapter(op_out, state)


def _ffn_with(spec, state, form):
    if spec is None:
        return None
    if spec.kind == "adapter":
        if form == "embedded":
            return lambda h, p: serial_adapter(ffn(h, p), state)
        return lambda h, p: _add_res(ffn(h, p), state)

    def fn(h, p):
        out = ffn(h, p)
        return out + res_tuner(h, out, spec, state)

    return fn


def plan_forward(x0: Tensor, model: BackboneModel, plan: TuningPlan,
                 form: str = "unbound") -> ForwardRecord:
    """Backbone pass with every planned tuner combined at its attach point.

    ``form="embedded"`` uses the original insertion for adapters, prefixes and
    prompts at MHA; off-MHA attention tuners have a single form.
    """
    if form not in ("unbound", "embedded"):
        raise PlanError(f"unknown form {form!r}")
    for e in plan.entries:
        if e.block >= len(model.blocks):
            raise PlanError(f"block {e.block} does not exist in a depth-{len(model.blocks)} model")
    acts, mhas, ffns = [x0], [], []
    x = x0
    for l, params in enumerate(model.blocks):
        mspec, mstate = plan.lookup(l, "MHA")
        fspec, fstate = plan.lookup(l, "FFN")
        bspec, bstate = plan.lookup(l, "Block")
        y, m, f = block_forward(x, params, _mha_with(mspec, mstate, form),
                                _ffn_with(fspec, fstate, form))
        if bspec is not None:
            if bspec.kind == "adapter" and form == "embedded":
                y = serial_adapter(y, bstate)
            else:
                y = y + res_tuner(x, y, bspec, bstate)
        x = y
        acts.append(y)
        mhas.append(m)
        ffns.append(f)
    return ForwardRecord(acts, mhas, ffns, model.count_forward())


def apply_plan(x_in: Tensor, model: BackboneModel, plan: TuningPlan,
               form: str = "unbound") -> Tensor:
    return plan_forward(x_in, model, plan, form).activations[-1]


def plan_param_count(plan: TuningPlan, config: BackboneConfig) -> int:
    """Closed-form trainable scalars of a plan, from shapes alone."""
    d_model, d = config.model_dim, config.head_dim
    total = 0
    for e in plan.entries:
        r = e.spec.width
        if e.spec.kind == "adapter":
            total += 2 * d_model * r
        elif e.spec.attach == "MHA":
            total += (2 if e.spec.kind == "prefix" else 1) * r * d_model
        elif e.spec.kind == "prefix":
            total += d_model * d + r * d + r * d_model
        else:
            total += r * d_model + 2 * d_model * d + d_model * d_model
    return total
