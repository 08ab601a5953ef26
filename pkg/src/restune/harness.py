"""Command-line harness: synthetic tasks, training modes, verification and reports.

    restune verify   [--trials N --seed S --tolerance T --jobs N --out PATH]
    restune train    --config PATH [--mode linear|plan|bypass|full]
    restune multitask --config PATH --tasks T
    restune report   PATHS... [--out PATH]

Exit codes: 0 success, 1 verification failure, 2 usage or config error.
Output files default to ``$RESTUNE_OUTPUT_DIR`` (else ``./restune-out``).
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import backbone as bb
from .backbone import BackboneConfig, BackboneModel, backbone_forward, freeze, unfreeze
from .bypass import (ActivationCache, BypassConfig, PlanTask, TaskHead, build_cache,
                     embedded_multi_task_infer, multi_task_infer, stack_caches)
from .equivalence import InstanceSpec, run_suite
from .tensor import Tape, Tensor, backward, vcat
from .training import Adam, LinearHead, accuracy, cross_entropy, mean_pool
from .tuners import TuningPlan, TunerSpec, apply_plan, plan_param_count

OUTPUT_ENV = "RESTUNE_OUTPUT_DIR"
MODES = ("linear", "plan", "bypass", "full")
METRIC_FIELDS = ("task_id", "mode", "seed", "step", "loss", "accuracy", "forward_count",
                 "trainable_params", "retained_scalars", "attention_ops")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


def output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "restune-out"))


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticTask:
    """Class-conditional Gaussian token sequences.

    ``kind="mean"`` shifts every token by a class mean, so mean-pooled tokens are
    linearly separable.  ``kind="scale"`` adds a weak mean shift and makes the
    per-token spread class dependent, which pooling a linear map cannot see but
    a per-token nonlinearity can.
    """

    task_id: str = "task0"
    seed: int = 0
    num_classes: int = 2
    seq_len: int = 16
    model_dim: int = 32
    train_size: int = 64
    test_size: int = 64
    kind: str = "mean"
    separation: float = 1.0
    noise: float = 1.0

    def __post_init__(self):
        if self.kind not in ("mean", "scale"):
            raise ConfigError(f"task.kind: expected 'mean' or 'scale', got {self.kind!r}")
        if self.num_classes < 2:
            raise ConfigError("task.num_classes: need at least 2 classes")

    def _means(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 0])
        dirs = rng.normal(size=(self.num_classes, self.model_dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return self.separation * dirs

    def _split(self, size: int, stream: int):
        rng = np.random.default_rng([self.seed, stream])
        labels = np.arange(size) % self.num_classes
        rng.shuffle(labels)
        means = self._means()
        xs = []
        for c in labels:
            tokens = rng.normal(size=(self.seq_len, self.model_dim))
            if self.kind == "mean":
                xs.append(means[c] + self.noise * tokens)
            else:
                spread = self.noise * (0.5 + c / max(self.num_classes - 1, 1))
                xs.append(0.1 * means[c] + spread * tokens)
        return xs, labels

    def train(self):
        return self._split(self.train_size, 1)

    def test(self):
        return self._split(self.test_size, 2)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

DEFAULT_CONFIG = {
    "seed": 0,
    "mode": "bypass",
    "backbone": {"depth": 4, "model_dim": 32, "num_heads": 2, "ffn_hidden": 64,
                 "checkpoint": None},
    "task": {"num_classes": 2, "seq_len": 16, "train_size": 64, "test_size": 64,
             "kind": "mean", "separation": 1.0, "noise": 1.0},
    "plan": {"arity": "dual", "kinds": None, "width": 4, "path": None},
    "bypass": {"horizontal": "adapter", "vertical": "adapter", "width": 4},
    "optimizer": {"lr": 1e-2, "steps": 200, "batch_size": 32, "eval_every": 20},
    "output": None,
}


@dataclass
class RunConfig:
    seed: int
    mode: str
    backbone: BackboneConfig
    checkpoint: str | None
    task: SyntheticTask
    plan: dict
    bypass: dict
    lr: float
    steps: int
    batch_size: int
    eval_every: int
    output: Path
    raw: dict = field(default_factory=dict, repr=False)

    def make_plan(self) -> TuningPlan:
        if self.plan.get("path"):
            return TuningPlan.load(self.plan["path"])
        arity = self.plan["arity"]
        kinds = self.plan.get("kinds") or {}
        width, depth = self.plan["width"], self.backbone.depth
        if arity == "single":
            attach, kind = next(iter(kinds.items()), ("FFN", "adapter"))
            return TuningPlan.single(depth, kind, attach, width)
        if arity == "dual":
            return TuningPlan.dual(depth, kinds.get("MHA", "adapter"), kinds.get("FFN", "adapter"), width)
        if arity == "tri":
            return TuningPlan.tri(depth, kinds.get("MHA", "adapter"), kinds.get("FFN", "adapter"),
                                  kinds.get("Block", "adapter"), width)
        if arity == "none":
            return TuningPlan(name="none")
        raise ConfigError(f"plan.arity: expected single|dual|tri|none, got {arity!r}")

    def make_bypass(self) -> BypassConfig:
        def spec(kind):
            return None if kind in (None, "none") else TunerSpec(kind, "Block", self.bypass["width"])

        return BypassConfig(self.backbone.depth, spec(self.bypass["horizontal"]),
                            spec(self.bypass["vertical"]))

    @property
    def mode_label(self) -> str:
        if self.mode == "plan":
            return f"plan-{self.plan.get('arity', 'custom')}"
        return self.mode


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"{path}: unknown field")
        if isinstance(base[key], dict) and value is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected an object")
            if key == "plan" and "kinds" in value and value["kinds"] is not None:
                value = dict(value)
                kinds = value.pop("kinds")
                out[key] = _merge(base[key], value, path + ".")
                out[key]["kinds"] = kinds
                continue
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = value
    return out


def _num(d: dict, key: str, where: str, kind=float, positive=True):
    value = d[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)) or \
            (kind is int and not float(value).is_integer()):
        raise ConfigError(f"{where}{key}: expected {'an integer' if kind is int else 'a number'}, got {value!r}")
    if positive and value <= 0:
        raise ConfigError(f"{where}{key}: must be positive, got {value!r}")
    return kind(value)


def parse_config(data: dict, mode: str | None = None) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a JSON object")
    cfg = _merge(DEFAULT_CONFIG, data)
    if mode is not None:
        cfg["mode"] = mode
    if cfg["mode"] not in MODES:
        raise ConfigError(f"mode: expected one of {MODES}, got {cfg['mode']!r}")
    b = cfg["backbone"]
    try:
        backbone = BackboneConfig(*(_num(b, k, "backbone.", int) for k in
                                    ("depth", "model_dim", "num_heads", "ffn_hidden")))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"backbone: {exc}") from None
    t = cfg["task"]
    task = SyntheticTask(task_id="task0", seed=_num(cfg, "seed", "", int, positive=False),
                         num_classes=_num(t, "num_classes", "task.", int),
                         seq_len=_num(t, "seq_len", "task.", int), model_dim=backbone.model_dim,
                         train_size=_num(t, "train_size", "task.", int),
                         test_size=_num(t, "test_size", "task.", int), kind=t["kind"],
                         separation=_num(t, "separation", "task.", positive=False),
                         noise=_num(t, "noise", "task."))
    o = cfg["optimizer"]
    out = cfg["output"]
    seed = _num(cfg, "seed", "", int, positive=False)
    run = RunConfig(seed=seed, mode=cfg["mode"], backbone=backbone,
                    checkpoint=b.get("checkpoint"), task=task, plan=cfg["plan"],
                    bypass=cfg["bypass"], lr=_num(o, "lr", "optimizer."),
                    steps=_num(o, "steps", "optimizer.", int),
                    batch_size=_num(o, "batch_size", "optimizer.", int),
                    eval_every=_num(o, "eval_every", "optimizer.", int),
                    output=Path(out) if out else output_dir() / f"train-{cfg['mode']}-{seed}.csv",
                    raw=cfg)
    _num(cfg["plan"], "width", "plan.", int)
    _num(cfg["bypass"], "width", "bypass.", int)
    try:
        run.make_plan()
        run.make_bypass()
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"plan/bypass: {exc}") from None
    return run


def load_config(path, mode: str | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(data, mode)


# ---------------------------------------------------------------------------
# metrics files
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def write_metrics(path, rows, stamp: bool = True) -> Path:
    """CSV with a leading timestamp comment; everything after it is deterministic."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    if stamp:
        buf.write(f"# generated {datetime.now(timezone.utc).isoformat(timespec='seconds')}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for row in rows:
        w.writerow([_fmt(row.get(k)) for k in METRIC_FIELDS])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_metrics(path) -> list[dict]:
    path = Path(path)
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _build_backbone(run: RunConfig) -> BackboneModel:
    if run.checkpoint:
        return BackboneModel.load(run.checkpoint)
    return BackboneModel.init(run.backbone, run.seed)


def _caches(model, xs) -> list[ActivationCache]:
    return [build_cache(backbone_forward(Tensor(x), model)) for x in xs]


def _batches(rng, size, batch_size):
    while True:
        order = rng.permutation(size)
        for i in range(0, size, batch_size):
            yield order[i:i + batch_size]


@dataclass
class TrainResult:
    rows: list
    final_accuracy: float
    trainable_params: int
    retained_scalars: int
    forward_count: int
    backbone_hash_before: str
    backbone_hash_after: str
    grad_recipients: set = field(default_factory=set)
    backbone_grads: int = 0


def _train_cached(run: RunConfig, model: BackboneModel, task_head: TaskHead, rng, log):
    xs, ys = run.task.train()
    xt, yt = run.task.test()
    train_c, test_c = _caches(model, xs), _caches(model, xt)
    test_all = stack_caches(test_c)
    opt = Adam(task_head.parameters(), lr=run.lr)
    batches = _batches(rng, len(xs), run.batch_size)
    recipients = set()
    for step in range(1, run.steps + 1):
        idx = next(batches)
        opt.zero_grad()
        loss = cross_entropy(task_head.logits(stack_caches([train_c[i] for i in idx])), ys[idx])
        backward(loss)
        recipients |= {n for n, t in task_head.named_tensors().items() if t.grad is not None}
        opt.step()
        if step % run.eval_every == 0 or step == run.steps:
            log(step, loss.item(), accuracy(task_head.logits(test_all).data, yt))
    probe = cross_entropy(task_head.logits(train_c[0]), ys[:1])
    retained = Tape.from_output(probe).retained_scalars()
    return accuracy(task_head.logits(test_all).data, yt), task_head.parameters(), retained, recipients


def _plan_logits(model, plan, head, xs) -> Tensor:
    return vcat([head(mean_pool(apply_plan(Tensor(x), model, plan))) for x in xs])


def _train_plan(run: RunConfig, model: BackboneModel, plan: TuningPlan, rng, log):
    xs, ys = run.task.train()
    xt, yt = run.task.test()
    head = LinearHead.init(run.backbone.model_dim, run.task.num_classes, rng)
    params = plan.parameters() + head.parameters()
    if run.mode == "full":
        params += model.parameters()
    opt = Adam(params, lr=run.lr)
    batches = _batches(rng, len(xs), run.batch_size)
    recipients = set()
    named = dict(plan.named_tensors())
    named.update(head.named_tensors())
    named.update(model.named_tensors())
    for step in range(1, run.steps + 1):
        idx = next(batches)
        opt.zero_grad()
        loss = cross_entropy(_plan_logits(model, plan, head, [xs[i] for i in idx]), ys[idx])
        backward(loss)
        recipients |= {n for n, t in named.items() if t.grad is not None}
        opt.step()
        if step % run.eval_every == 0 or step == run.steps:
            log(step, loss.item(), accuracy(_plan_logits(model, plan, head, xt).data, yt))
    probe = cross_entropy(_plan_logits(model, plan, head, xs[:1]), ys[:1])
    retained = Tape.from_output(probe).retained_scalars()
    final = accuracy(_plan_logits(model, plan, head, xt).data, yt)
    return final, params, retained, recipients


def train(run: RunConfig) -> TrainResult:
    """Train ``run.mode`` on the run's synthetic task."""
    model = _build_backbone(run)
    before = model.state_hash()
    rng = np.random.default_rng([run.seed, 99])
    rows = []
    label = run.mode_label

    def log(step, loss, acc):
        rows.append({"task_id": run.task.task_id, "mode": label, "seed": run.seed, "step": step,
                     "loss": loss, "accuracy": acc})

    if run.mode in ("linear", "bypass"):
        cfg = run.make_bypass() if run.mode == "bypass" else None
        task_head = TaskHead.init(run.task.task_id, run.backbone, run.task.num_classes, cfg, run.seed)
        final, params, retained, recipients = _train_cached(run, model, task_head, rng, log)
    else:
        plan = run.make_plan() if run.mode == "plan" else TuningPlan(name="none")
        plan.initialize(run.backbone, run.seed)
        if run.mode == "full":
            unfreeze(model)
        final, params, retained, recipients = _train_plan(run, model, plan, rng, log)
    backbone_grads = sum(t.grad is not None for t in model.parameters())
    trainable = sum(t.size for t in params if t.requires_grad)
    if run.mode == "full":
        freeze(model)
    rows.append({"task_id": run.task.task_id, "mode": label, "seed": run.seed, "step": "final",
                 "loss": rows[-1]["loss"] if rows else None, "accuracy": final,
                 "forward_count": model.forward_count, "trainable_params": trainable,
                 "retained_scalars": retained})
    return TrainResult(rows, final, trainable, retained, model.forward_count, before,
                       model.state_hash(), recipients, backbone_grads)


# ---------------------------------------------------------------------------
# multi-task inference
# ---------------------------------------------------------------------------

@dataclass
class MultiTaskReport:
    tasks: int
    bypass_forwards: int
    baseline_forwards: int
    bypass_attention_ops: int
    baseline_attention_ops: int
    isolated_match: bool
    rows: list


def multitask(run: RunConfig, num_tasks: int) -> MultiTaskReport:
    if num_tasks < 1:
        raise ConfigError("tasks: must be >= 1")
    model = _build_backbone(run)
    x0 = Tensor(run.task.test()[0][0])
    bcfg = run.make_bypass()
    tasks = [TaskHead.init(f"task{t}", run.backbone, run.task.num_classes, bcfg, run.seed + t)
             for t in range(num_tasks)]

    start = bb.attention_calls.value
    result = multi_task_infer(x0, model, tasks)
    bypass_ops = bb.attention_calls.value - start

    isolated = all(np.array_equal(multi_task_infer(x0, model, [t]).outputs[t.task_id],
                                  result.outputs[t.task_id]) for t in tasks)

    plan_tasks = []
    for t in range(num_tasks):
        plan = run.make_plan().initialize(run.backbone, run.seed + t)
        plan_tasks.append(PlanTask(f"task{t}", plan, tasks[t].head))
    start = bb.attention_calls.value
    base = embedded_multi_task_infer(x0, model, plan_tasks)
    base_ops = bb.attention_calls.value - start

    rows = []
    for t in tasks:
        rows.append({"task_id": t.task_id, "mode": "bypass", "seed": run.seed,
                     "trainable_params": sum(p.size for p in t.parameters())})
    rows.append({"task_id": "all", "mode": "bypass", "seed": run.seed,
                 "forward_count": result.forward_delta, "attention_ops": bypass_ops})
    rows.append({"task_id": "all", "mode": "embedded", "seed": run.seed,
                 "forward_count": base.forward_delta, "attention_ops": base_ops})
    return MultiTaskReport(num_tasks, result.forward_delta, base.forward_delta,
                           bypass_ops, base_ops, isolated, rows)


# ---------------------------------------------------------------------------
# report consolidation
# ---------------------------------------------------------------------------

def _seed_key(value: str):
    try:
        return (0, int(value))
    except (TypeError, ValueError):
        return (1, str(value))


def consolidate(paths) -> list[dict]:
    rows = []
    for p in paths:
        if not Path(p).exists():
            raise FileNotFoundError(f"metrics file not found: {p}")
        rows.extend(read_metrics(p))
    # stable: rows keep file order within a (mode, seed) group
    return sorted(rows, key=lambda r: (r.get("mode", ""), _seed_key(r.get("seed"))))


def format_table(rows: list[dict]) -> str:
    cols = list(METRIC_FIELDS)
    cells = [cols] + [[r.get(c, "") or "" for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_verify(args) -> int:
    spec = InstanceSpec(seed=args.seed, trials=args.trials, tolerance=args.tolerance,
                        adapter_tolerance=min(args.tolerance, 1e-15))
    report = run_suite(spec, agreement_inputs=args.agreement_inputs, jobs=args.jobs)
    out = Path(args.out) if args.out else output_dir() / "verify.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    stamp = f"# generated {datetime.now(timezone.utc).isoformat(timespec='seconds')}"
    report.write_csv(out, comment=stamp)
    for name, diff, ok in report.summary():
        print(f"{'PASS' if ok else 'FAIL'}  {name:<26} max_abs_diff={diff:.3e}")
    for name, rate in report.agreement.items():
        print(f"{'PASS' if rate == 1.0 else 'FAIL'}  agreement_{name:<16} rate={rate:.4f}")
    print(f"report: {out}")
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_train(args) -> int:
    run = load_config(args.config, args.mode)
    result = train(run)
    path = write_metrics(run.output, result.rows)
    print(f"{run.mode_label}: final accuracy {result.final_accuracy:.4f}, "
          f"trainable {result.trainable_params}, retained {result.retained_scalars}, "
          f"forwards {result.forward_count}")
    print(f"metrics: {path}")
    if run.mode != "full" and result.backbone_hash_before != result.backbone_hash_after:
        print("backbone parameters changed during tuning", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_multitask(args) -> int:
    run = load_config(args.config, "bypass")
    rep = multitask(run, args.tasks)
    out = Path(args.out) if args.out else output_dir() / f"multitask-{args.tasks}.csv"
    write_metrics(out, rep.rows)
    print(f"tasks={rep.tasks} bypass forwards={rep.bypass_forwards} "
          f"baseline forwards={rep.baseline_forwards} bypass attention ops={rep.bypass_attention_ops} "
          f"baseline attention ops={rep.baseline_attention_ops}")
    print(f"report: {out}")
    ok = rep.bypass_forwards == 1 and rep.baseline_forwards == rep.tasks and rep.isolated_match
    return EXIT_OK if ok else EXIT_FAIL


def cmd_report(args) -> int:
    rows = consolidate(args.paths)
    if args.out:
        write_metrics(args.out, rows)
    print(format_table(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="restune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the unbinding equivalence suite")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-10)
    p.add_argument("--agreement-inputs", type=int, default=500)
    p.add_argument("--jobs", type=int, default=1, help="worker threads for independent checks")
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train", help="train one mode on a synthetic task")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=MODES)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("multitask", help="compare backbone passes for T tasks")
    p.add_argument("--config", required=True)
    p.add_argument("--tasks", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_multitask)

    p = sub.add_parser("report", help="merge metrics files into one table")
    p.add_argument("paths", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
