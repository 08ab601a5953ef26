"""Residual (unbound) parameter-efficient tuners and a detached bypass network."""
from .backbone import (BackboneConfig, BackboneModel, BlockParams, ForwardRecord, attention,
                       backbone_forward, block_forward, ffn, freeze, multi_head_attention,
                       trainable_param_count, unfreeze)
from .bypass import (ActivationCache, Bypass, BypassConfig, TaskHead, build_cache,
                     bypass_forward, memory_proxy, multi_task_infer, train_step)
from .tensor import Tensor, backward, finite_diff_grad
from .tuners import (AdapterState, PrefixState, PromptState, TunerSpec, TuningPlan, apply_plan,
                     embedded_prefix_mha, embedded_prompt_mha, res_adapter, res_prefix,
                     res_prompt, serial_adapter)

__version__ = "0.1.0"
