"""
Unbinding prefix, prompt and adapter tuners
===========================================

Each tuner normally sits inside a frozen operation.  Here we rewrite it as a
parallel branch next to the frozen operation and check, numerically, that the
two forms give the same output.
"""

import numpy as np

from restune import backbone as B
from restune import tuners as TU
from restune.equivalence import closed_form_gate, mass_ratio_gate, random_block
from restune.tensor import Tensor

rng = np.random.default_rng(0)
params = random_block(rng, model_dim=8, num_heads=2, ffn_hidden=16)
x = Tensor(rng.normal(size=(5, 8)))

# %%
# Prefix tuning
# -------------
# Prepending key/value banks to attention equals a gated mix of the frozen
# attention and an attention over the banks alone.

pre = TU.PrefixState(Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(3, 8))))
embedded = TU.embedded_prefix_mha(x, params, pre).data
unbound = TU.unbound_prefix_mha(x, params, pre).data
print("prefix max |diff|:", np.abs(embedded - unbound).max())

_, lam = TU.res_prefix(x, params, pre)
print("per-head, per-token gates:\n", lam.data.round(3))

# %%
# The gate is the share of softmax mass landing on the prefix keys.  Two
# independent formulas agree to rounding error.

q = x.data @ params.w_q.data
main = q[:, :4] @ (x.data @ params.w_k.data)[:, :4].T / 2.0
side = q[:, :4] @ pre.k_pre.data[:, :4].T / 2.0
print("closed form vs mass ratio:",
      np.abs(closed_form_gate(main, side) - mass_ratio_gate(main, side)).max())

# %%
# Prompt tuning
# -------------
# Prompt tokens attend alongside the input.  The rows of the original tokens
# come out unchanged by the unbinding.  The prompt rows are the disposable
# part and are rebuilt separately.

pro = TU.PromptState(Tensor(rng.normal(size=(2, 8))))
ex, ep = TU.embedded_prompt_mha(x, params, pro)
ux, up = TU.unbound_prompt_mha(x, params, pro)
print("prompt rows:", np.abs(ex.data - ux.data).max(),
      " disposable rows:", np.abs(ep.data - up.data).max())

# %%
# Adapters
# --------
# A serial adapter already has the residual shape, so the parallel form is
# bit-for-bit identical.

ad = TU.AdapterState(Tensor(rng.normal(size=(8, 4))), Tensor(rng.normal(size=(4, 8))))
h = B.ffn(x, params)
print("adapter identical:", np.array_equal(TU.serial_adapter(h, ad).data,
                                           (h + TU.res_adapter(h, ad)).data))
