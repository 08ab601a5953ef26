import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from restune import backbone as B
from restune import tensor as T
from restune import tuners as TU
from restune.backbone import BackboneConfig, BackboneModel, BlockParams
from restune.tensor import DimensionError, Tensor, backward
from restune.tuners import (AdapterState, PlanError, PrefixState, PromptState, TunerSpec,
                            TuningPlan)


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _block(seed, d=4, heads=2, scale=0.5):
    rng = np.random.default_rng(seed)
    cfg = BackboneConfig(depth=1, model_dim=d, num_heads=heads, ffn_hidden=6)
    p = BlockParams.init(cfg, rng)
    for t in p.tensors().values():
        t.data = rng.normal(0, scale, t.shape)
    return p, rng


def _np_prefix_mha(x, p, kp, vp):
    q, k, v = x @ p.w_q.data, x @ p.w_k.data, x @ p.w_v.data
    d = q.shape[1] // p.num_heads
    heads = []
    for h in range(p.num_heads):
        s = slice(h * d, (h + 1) * d)
        kk = np.vstack([kp[:, s], k[:, s]])
        vv = np.vstack([vp[:, s], v[:, s]])
        heads.append(_softmax(q[:, s] @ kk.T / np.sqrt(d)) @ vv)
    return np.hstack(heads) @ p.w_o.data


class TestPrefix:
    def test_empty_prefix_is_plain_attention(self):
        p, rng = _block(0)
        x = Tensor(rng.normal(size=(3, 4)))
        pre = PrefixState(Tensor(np.zeros((0, 4))), Tensor(np.zeros((0, 4))))
        plain = B.multi_head_attention(x, p).data
        np.testing.assert_allclose(TU.embedded_prefix_mha(x, p, pre).data, plain, atol=1e-15)
        np.testing.assert_allclose(TU.unbound_prefix_mha(x, p, pre).data, plain, atol=1e-15)
        out, lam = TU.res_prefix(x, p, pre)
        assert not out.data.any() and not lam.data.any()

    def test_concat_oracle(self):
        p, rng = _block(1)
        x = rng.normal(size=(5, 4))
        kp, vp = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        pre = PrefixState(Tensor(kp), Tensor(vp))
        want = _np_prefix_mha(x, p, kp, vp)
        assert np.abs(TU.embedded_prefix_mha(Tensor(x), p, pre).data - want).max() <= 1e-12
        assert np.abs(TU.unbound_prefix_mha(Tensor(x), p, pre).data - want).max() <= 1e-12

    def test_copied_keys_give_half_gate(self):
        p, rng = _block(2)
        x = Tensor(rng.normal(size=(3, 4)))
        pre = PrefixState(Tensor(x.data @ p.w_k.data), Tensor(rng.normal(size=(3, 4))))
        _, lam = TU.res_prefix(x, p, pre)
        np.testing.assert_allclose(lam.data, 0.5, atol=1e-15)

    def test_negligible_prefix_vanishes(self):
        p, rng = _block(3)
        x = Tensor(rng.normal(size=(3, 4)))
        q = x.data @ p.w_q.data
        # keys pointing against every query push the prefix logits far negative
        kp = -1e3 * np.tile(q.sum(axis=0), (2, 1))
        pre = PrefixState(Tensor(kp), Tensor(rng.normal(size=(2, 4))))
        _, lam = TU.res_prefix(x, p, pre)
        assert lam.data.max() < 1e-12
        np.testing.assert_allclose(TU.unbound_prefix_mha(x, p, pre).data,
                                   B.multi_head_attention(x, p).data, atol=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(0.1, 3))
    def test_gate_grows_with_prefix_logit(self, seed, base, step):
        p, rng = _block(seed, heads=1)
        x = Tensor(rng.normal(size=(1, 4)))
        q = (x.data @ p.w_q.data)[0]
        direction = q / np.linalg.norm(q)
        lams = []
        for c in (base, base + step):
            pre = PrefixState(Tensor(c * direction[None, :]), Tensor(np.zeros((1, 4))))
            lams.append(TU.res_prefix(x, p, pre)[1].item())
        assert 0 < lams[0] < lams[1] < 1


class TestPrompt:
    def test_empty_prompt(self):
        p, rng = _block(4)
        x = Tensor(rng.normal(size=(3, 4)))
        pro = PromptState(Tensor(np.zeros((0, 4))))
        y_x, y_pro = TU.embedded_prompt_mha(x, p, pro)
        np.testing.assert_allclose(y_x.data, B.multi_head_attention(x, p).data, atol=1e-15)
        assert y_pro.shape == (0, 4)

    def test_concat_oracle(self):
        p, rng = _block(5)
        x, xp = rng.normal(size=(4, 4)), rng.normal(size=(2, 4))
        y_x, y_pro = TU.embedded_prompt_mha(Tensor(x), p, PromptState(Tensor(xp)))
        full = B.multi_head_attention(Tensor(np.vstack([x, xp])), p).data
        assert np.abs(y_x.data - full[:4]).max() <= 1e-15
        assert np.abs(y_pro.data - full[4:]).max() <= 1e-15
        u_x, u_pro = TU.unbound_prompt_mha(Tensor(x), p, PromptState(Tensor(xp)))
        assert np.abs(u_x.data - full[:4]).max() <= 1e-12
        assert np.abs(u_pro.data - full[4:]).max() <= 1e-12

    def test_duplicated_tokens_split_evenly(self):
        p, rng = _block(6)
        x = rng.normal(size=(3, 4))
        pro = PromptState(Tensor(x.copy()))
        _, lam, D, beta = TU.res_prompt(Tensor(x), p, pro)
        np.testing.assert_allclose(lam.data, 0.5, atol=1e-15)
        np.testing.assert_allclose(beta.data, 0.5, atol=1e-15)
        _, y_pro = TU.embedded_prompt_mha(Tensor(x), p, pro)
        y_x, _ = TU.embedded_prompt_mha(Tensor(x), p, pro)
        np.testing.assert_allclose(y_pro.data, y_x.data, atol=1e-14)
        np.testing.assert_allclose(D.data @ p.w_o.data, y_pro.data, atol=1e-14)


class TestAdapter:
    def test_zero_projections_are_identity(self):
        p, rng = _block(7)
        h = Tensor(rng.normal(size=(3, 4)))
        ad = AdapterState(Tensor(rng.normal(size=(4, 2))), Tensor(np.zeros((2, 4))))
        assert np.array_equal(TU.serial_adapter(h, ad).data, h.data)
        ad = AdapterState(Tensor(np.zeros((4, 2))), Tensor(rng.normal(size=(2, 4))))
        assert np.array_equal(TU.serial_adapter(h, ad).data, h.data)

    def test_serial_and_parallel_forms_agree_bitwise(self):
        rng = np.random.default_rng(8)
        h = Tensor(rng.normal(size=(5, 4)))
        ad = AdapterState(Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(3, 4))))
        assert np.array_equal(TU.serial_adapter(h, ad).data, (h + TU.res_adapter(h, ad)).data)

    def test_width_mismatch(self):
        ad = AdapterState(Tensor(np.ones((4, 2))), Tensor(np.ones((2, 4))))
        with pytest.raises(DimensionError):
            TU.res_adapter(Tensor(np.ones((3, 5))), ad)


CFG = BackboneConfig(depth=3, model_dim=8, num_heads=2, ffn_hidden=8)


def _x(seed=0, n=5):
    return Tensor(np.random.default_rng(seed).normal(size=(n, CFG.model_dim)))


class TestPlans:
    def test_empty_plan_is_backbone(self):
        model = BackboneModel.init(CFG, 1)
        x = _x()
        plan = TuningPlan().initialize(CFG)
        assert np.array_equal(TU.apply_plan(x, model, plan).data,
                              B.backbone_forward(x, model).activations[-1].data)

    @pytest.mark.parametrize("kind", ["prefix", "prompt", "adapter"])
    def test_single_plan_forms_agree_per_layer(self, kind):
        model = BackboneModel.init(CFG, 2)
        plan = TuningPlan.single(CFG.depth, kind, "MHA", width=3).initialize(CFG, 5)
        for st_ in plan.states.values():
            for t in st_.tensors().values():
                t.data = np.random.default_rng(0).normal(0, 0.5, t.shape)
        x = _x(1)
        emb = TU.plan_forward(x, model, plan, "embedded").activations
        unb = TU.plan_forward(x, model, plan, "unbound").activations
        for a, b in zip(emb, unb):
            assert np.abs(a.data - b.data).max() <= 1e-10

    @pytest.mark.parametrize("kind", TU.KINDS)
    def test_zero_init_tri_plan_matches_frozen_backbone(self, kind):
        model = BackboneModel.init(CFG, 3)
        plan = TuningPlan.build(CFG.depth, {"FFN": kind, "Block": kind}, width=4).initialize(CFG)
        x = _x(2)
        assert np.array_equal(TU.apply_plan(x, model, plan).data,
                              B.backbone_forward(x, model).activations[-1].data)
        tri = TuningPlan.tri(CFG.depth).initialize(CFG)
        assert np.array_equal(TU.apply_plan(x, model, tri).data,
                              B.backbone_forward(x, model).activations[-1].data)

    @pytest.mark.parametrize("kind", TU.KINDS)
    @pytest.mark.parametrize("attach", TU.ATTACH_POINTS)
    def test_every_cell_runs_and_trains_only_tuners(self, kind, attach):
        model = BackboneModel.init(CFG, 4)
        plan = TuningPlan.single(CFG.depth, kind, attach, width=3).initialize(CFG, 1)
        backward(T.sum_all(T.row_softmax(TU.apply_plan(_x(3), model, plan))))
        assert all(t.grad is None for t in model.parameters())
        assert any(t.grad is not None and np.any(t.grad) for t in plan.parameters())
        assert B.trainable_param_count(plan) == TU.plan_param_count(plan, CFG)

    def test_every_prefix_param_gets_gradient(self):
        model = BackboneModel.init(CFG, 4)
        plan = TuningPlan.dual(CFG.depth, mha="prefix", ffn="adapter", width=3).initialize(CFG, 1)
        for st_ in plan.states.values():
            for t in st_.tensors().values():
                t.data = np.random.default_rng(1).normal(0, 0.3, t.shape)
        backward(T.sum_all(T.row_softmax(TU.apply_plan(_x(3), model, plan))))
        assert all(t.grad is not None for t in plan.parameters())

    def test_adapter_count_closed_form(self):
        cfg = BackboneConfig(depth=1, model_dim=16, num_heads=2, ffn_hidden=16)
        plan = TuningPlan.single(1, "adapter", "FFN", width=10).initialize(cfg)
        assert B.trainable_param_count(plan) == 320

    def test_single_dual_tri_ordering(self):
        counts = []
        for plan in (TuningPlan.single(CFG.depth), TuningPlan.dual(CFG.depth), TuningPlan.tri(CFG.depth)):
            plan.initialize(CFG)
            counts.append(B.trainable_param_count(plan))
            assert counts[-1] == TU.plan_param_count(plan, CFG)
        assert counts[0] < counts[1] < counts[2]

    def test_json_round_trip(self, tmp_path):
        plan = TuningPlan.tri(2, mha="prefix", ffn="prompt", width=7)
        plan.save(tmp_path / "plan.json")
        loaded = TuningPlan.load(tmp_path / "plan.json")
        assert loaded.to_dict() == plan.to_dict()

    def test_state_checkpoint_names(self, tmp_path):
        from restune.checkpoint import load_tensors

        plan = TuningPlan.dual(2).initialize(BackboneConfig(depth=2, model_dim=8, num_heads=2, ffn_hidden=8))
        plan.save_states(tmp_path / "t.npz")
        arrays, meta = load_tensors(tmp_path / "t.npz")
        assert all(k.startswith("tuner/") for k in arrays)
        assert "tuner/0/MHA/w_down" in arrays and meta["plan"]["name"] == "dual"

    def test_plan_errors(self):
        with pytest.raises(PlanError):
            TuningPlan([TU.PlanEntry(0, TunerSpec("adapter", "FFN")),
                        TU.PlanEntry(0, TunerSpec("prefix", "FFN"))])
        with pytest.raises(PlanError):
            TuningPlan.single(5).initialize(CFG)
        with pytest.raises(PlanError):
            TuningPlan.from_dict({"entries": [{"block": 0, "kind": "adapter"}]})
        with pytest.raises((PlanError, ValueError)):
            TunerSpec("lora", "FFN")
        with pytest.raises((PlanError, ValueError)):
            TunerSpec("adapter", "Norm")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 6))
def test_gates_are_probabilities(seed, n, r):
    p, rng = _block(seed)
    x = Tensor(rng.normal(size=(n, 4)))
    _, lam = TU.res_prefix(x, p, PrefixState(Tensor(rng.normal(size=(r, 4))),
                                             Tensor(rng.normal(size=(r, 4)))))
    _, lam2, _, beta = TU.res_prompt(x, p, PromptState(Tensor(rng.normal(size=(r, 4)))))
    for g in (lam.data, lam2.data, beta.data):
        assert np.all(g > 0) and np.all(g < 1)
