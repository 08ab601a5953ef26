"""Small pre-norm transformer backbone with per-layer activations."""
from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import (ContractError, DimensionError, Tensor, col_slice, gelu, hcat,
                     layer_norm, matmul, row_softmax)

INIT_STD = 0.02


class _Counter:
    """Thread-safe monotone counter."""

    def __init__(self):
        self._value = 0
        self._lock = threading.Lock()

    def increment(self) -> None:
        with self._lock:
            self._value += 1

    @property
    def value(self) -> int:
        return self._value


attention_calls = _Counter()


@dataclass(frozen=True)
class BackboneConfig:
    depth: int = 4
    model_dim: int = 32
    num_heads: int = 2
    ffn_hidden: int = 64

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.num_heads < 1 or self.ffn_hidden < 1 or self.model_dim < 1:
            raise ValueError("num_heads, ffn_hidden and model_dim must be >= 1")
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by "
                             f"num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


PARAM_NAMES = ("w_q", "w_k", "w_v", "w_o", "w_1", "b_1", "w_2", "b_2",
               "ln1_scale", "ln1_shift", "ln2_scale", "ln2_shift")


@dataclass
class BlockParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w_1: Tensor
    b_1: Tensor
    w_2: Tensor
    b_2: Tensor
    ln1_scale: Tensor
    ln1_shift: Tensor
    ln2_scale: Tensor
    ln2_shift: Tensor
    num_heads: int = 1

    @classmethod
    def init(cls, config: BackboneConfig, rng: np.random.Generator) -> "BlockParams":
        d, f = config.model_dim, config.ffn_hidden

        def w(*shape):
            return Tensor(rng.normal(0.0, INIT_STD, shape), is_param=True)

        def const(value, n):
            return Tensor(np.full(n, value), is_param=True)

        return cls(w_q=w(d, d), w_k=w(d, d), w_v=w(d, d), w_o=w(d, d),
                   w_1=w(d, f), b_1=const(0.0, f), w_2=w(f, d), b_2=const(0.0, d),
                   ln1_scale=const(1.0, d), ln1_shift=const(0.0, d),
                   ln2_scale=const(1.0, d), ln2_shift=const(0.0, d),
                   num_heads=config.num_heads)

    def tensors(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[1] // self.num_heads


@dataclass
class ForwardRecord:
    """Activations of one backbone pass; ``activations[l]`` is x_l."""

    activations: list[Tensor]
    mha_out: list[Tensor]
    ffn_out: list[Tensor]
    forward_count: int

    @property
    def x0(self) -> Tensor:
        return self.activations[0]

    @property
    def outputs(self) -> list[Tensor]:
        return self.activations[1:]

    @property
    def depth(self) -> int:
        return len(self.activations) - 1


@dataclass
class BackboneModel:
    config: BackboneConfig
    blocks: list[BlockParams]
    seed: int | None = None
    _forward_count: int = field(default=0, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @classmethod
    def init(cls, config: BackboneConfig, seed: int = 0) -> "BackboneModel":
        rng = np.random.default_rng(seed)
        model = cls(config, [BlockParams.init(config, rng) for _ in range(config.depth)], seed)
        freeze(model)
        return model

    @property
    def forward_count(self) -> int:
        return self._forward_count

    def count_forward(self) -> int:
        with self._lock:
            self._forward_count += 1
            return self._forward_count

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for l, block in enumerate(self.blocks):
            for name, t in block.tensors().items():
                out[f"blocks/{l}/{name}"] = t
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def total_param_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.named_tensors().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        from .checkpoint import save_tensors

        save_tensors(path, self.named_tensors(), {"backbone": self.config.to_dict(),
                                                  "seed": self.seed})

    @classmethod
    def load(cls, path: str | Path) -> "BackboneModel":
        from .checkpoint import load_tensors

        arrays, meta = load_tensors(path)
        config = BackboneConfig(**meta["backbone"])
        model = cls.init(config, seed=0)
        model.seed = meta.get("seed")
        for name, t in model.named_tensors().items():
            if name not in arrays:
                raise KeyError(f"checkpoint {path} is missing {name}")
            if arrays[name].shape != t.shape:
                raise DimensionError(f"{name}: checkpoint shape {arrays[name].shape} "
                                     f"!= model shape {t.shape}")
            t.data = arrays[name].astype(np.float64)
        return model


def freeze(model: BackboneModel) -> None:
    for t in model.parameters():
        t.requires_grad = False
        t.grad = None


def unfreeze(model: BackboneModel) -> None:
    for t in model.parameters():
        t.requires_grad = True


def trainable_param_count(obj) -> int:
    """Number of scalars with ``requires_grad`` set, for anything exposing ``parameters()``."""
    params = obj.parameters() if hasattr(obj, "parameters") else list(obj)
    return sum(t.size for t in params if t.requires_grad)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def attention_logits(q: Tensor, k: Tensor) -> Tensor:
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"query width {q.shape} != key width {k.shape}")
    return matmul(q, k.T) * (1.0 / np.sqrt(q.shape[1]))


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v; keys may outnumber or undercount queries."""
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"keys {k.shape} and values {v.shape} differ in rows")
    attention_calls.increment()
    return matmul(row_softmax(attention_logits(q, k)), v)


def head_slices(t: Tensor, num_heads: int) -> list[Tensor]:
    d = t.shape[1] // num_heads
    return [col_slice(t, h * d, (h + 1) * d) for h in range(num_heads)]


def project_qkv(x: Tensor, params: BlockParams) -> tuple[Tensor, Tensor, Tensor]:
    if x.ndim != 2 or x.shape[1] != params.w_q.shape[0]:
        raise DimensionError(f"input {x.shape} does not match model width {params.w_q.shape[0]}")
    return matmul(x, params.w_q), matmul(x, params.w_k), matmul(x, params.w_v)


def multi_head_attention(x: Tensor, params: BlockParams) -> Tensor:
    q, k, v = project_qkv(x, params)
    H = params.num_heads
    heads = [attention(qh, kh, vh) for qh, kh, vh in
             zip(head_slices(q, H), head_slices(k, H), head_slices(v, H))]
    return matmul(hcat(heads), params.w_o)


def ffn(x: Tensor, params: BlockParams) -> Tensor:
    if x.ndim != 2 or x.shape[1] != params.w_1.shape[0]:
        raise DimensionError(f"input {x.shape} does not match FFN width {params.w_1.shape[0]}")
    return matmul(gelu(matmul(x, params.w_1) + params.b_1), params.w_2) + params.b_2


def block_forward(x: Tensor, params: BlockParams, mha_fn=None, ffn_fn=None):
    """Pre-norm block.  Returns (y, mha_out, ffn_out).

    ``mha_fn`` / ``ffn_fn`` replace the sub-layer given its normalized input;
    tuners use them to combine their branch at the MHA or FFN output.
    """
    mha_fn = mha_fn or multi_head_attention
    ffn_fn = ffn_fn or ffn
    mha_out = mha_fn(layer_norm(x, params.ln1_scale, params.ln1_shift), params)
    u = x + mha_out
    ffn_out = ffn_fn(layer_norm(u, params.ln2_scale, params.ln2_shift), params)
    return u + ffn_out, mha_out, ffn_out


def backbone_forward(x0: Tensor, model: BackboneModel) -> ForwardRecord:
    if x0.ndim != 2 or x0.shape[1] != model.config.model_dim:
        raise DimensionError(f"x0 {x0.shape} does not match model width {model.config.model_dim}")
    if not model.blocks:
        raise ContractError("backbone has no blocks")
    acts, mhas, ffns = [x0], [], []
    x = x0
    for params in model.blocks:
        x, m, f = block_forward(x, params)
        acts.append(x)
        mhas.append(m)
        ffns.append(f)
    count = model.count_forward()
    return ForwardRecord(acts, mhas, ffns, count)


def save_config(path: str | Path, config: BackboneConfig) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2), encoding="utf-8")
