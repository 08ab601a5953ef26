"""
Trainable parameters and retained activations
=============================================

Counts of trainable scalars per plan, and a memory proxy: the number of
scalars the autodiff tape must keep alive for the backward pass.
"""

import numpy as np

from restune import backbone as B
from restune.backbone import BackboneConfig, BackboneModel
from restune.bypass import BypassConfig, TaskHead, build_cache, memory_proxy
from restune.tensor import Tensor
from restune.training import LinearHead, cross_entropy, mean_pool
from restune.tuners import TunerSpec, TuningPlan, apply_plan, plan_param_count

config = BackboneConfig()

# %%
# Plans with more attach points train more scalars.  The counts follow from
# shapes alone.

for plan in (TuningPlan.single(4), TuningPlan.dual(4), TuningPlan.tri(4)):
    plan.initialize(config)
    print(f"{plan.name:>6}: {B.trainable_param_count(plan):5d} trainable "
          f"(closed form {plan_param_count(plan, config)})")

# %%
# Retained activations for one training sample.

model = BackboneModel.init(config, 0)
x = Tensor(np.random.default_rng(0).normal(size=(16, 32)))
cache = build_cache(B.backbone_forward(x, model))
spec = TunerSpec("adapter", "Block", 4)
probe = TaskHead.init("linear", config, 2, None)
bypass = TaskHead.init("bypass", config, 2, BypassConfig(4, spec, spec))
plan = TuningPlan.dual(4, width=4).initialize(config)
head = LinearHead.init(32, 2, np.random.default_rng(0))

rows = {
    "linear": memory_proxy(cross_entropy(probe.logits(cache), [0]), probe.parameters()),
    "bypass": memory_proxy(cross_entropy(bypass.logits(cache), [0]), bypass.parameters()),
    "embedded": memory_proxy(cross_entropy(head(mean_pool(apply_plan(x, model, plan))), [0]),
                             plan.parameters() + head.parameters()),
}
B.unfreeze(model)
rows["full"] = memory_proxy(cross_entropy(head(mean_pool(B.backbone_forward(x, model).activations[-1])), [0]),
                            model.parameters() + head.parameters())
B.freeze(model)
for name, m in rows.items():
    print(f"{name:>8}: trainable {m.trainable_params:6d}  retained {m.retained_scalars:6d}")
