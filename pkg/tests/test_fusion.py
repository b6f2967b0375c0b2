import numpy as np
import pytest

from coherent_cast import diffcore as dc
from coherent_cast import fusion
from coherent_cast.diffcore import Param
from coherent_cast.errors import DimensionMismatch, MissingLevelParams


def zero_mlp(sizes, bias=0.0):
    layers = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        layers.append((Param(np.zeros((a, b))), Param(np.full((1, b), bias))))
    return fusion.Mlp(layers)


class TestReorganize:
    def test_root_stack(self, fig1, rng):
        H = rng.normal(size=(8, 3))
        stacks = fusion.reorganize(H, fig1)
        np.testing.assert_array_equal(stacks[0].value, H[:1])

    def test_leaf_path(self, fig1, rng):
        H = rng.normal(size=(8, 3))
        D = fig1.index("D")
        rows = [fig1.index(x) for x in "ABD"]
        np.testing.assert_array_equal(fusion.reorganize(H, fig1)[D].value, H[rows])

    def test_constant_features(self, fig1):
        H = np.tile([[1.0, 2.0]], (8, 1))
        for stack in fusion.reorganize(H, fig1):
            np.testing.assert_array_equal(stack.value, np.tile([[1.0, 2.0]], (stack.shape[0], 1)))

    def test_row_count(self, fig1):
        with pytest.raises(DimensionMismatch):
            fusion.reorganize(np.zeros((7, 2)), fig1)


class TestTdConv:
    def conv(self, weights, d_h):
        return fusion.ConvParams([Param(w) for w in weights], [Param(np.zeros((1, d_h))) for _ in weights])

    def test_level_one_identity(self):
        from coherent_cast import hierarchy

        h = hierarchy.build([hierarchy.NodeSpec("r")])
        p = self.conv([np.ones((1, 2))], 2)
        out = fusion.td_conv([[0.5, 2.0]], fusion.TreeIndex.build(h), p)
        np.testing.assert_array_equal(out.value, [[0.5, 2.0]])

    def test_hand_example(self, three):
        p = self.conv([np.ones((1, 2)), np.ones((2, 2))], 2)
        H = np.array([[1.0, -2.0], [3.0, 1.0], [0.0, 0.0]])
        out = fusion.td_conv(H, fusion.TreeIndex.build(three), p).value
        np.testing.assert_array_equal(out[1], [4.0, 0.0])

    def test_zero_weights(self, fig1, rng):
        p = fusion.init_conv(3, 4, rng)
        for w in p.weights:
            w.value[...] = 0.0
        for b in p.biases:
            b.value[...] = [[-1.0, 0.0, 0.5, 2.0]]
        out = fusion.td_conv(rng.normal(size=(8, 4)), fusion.TreeIndex.build(fig1), p).value
        np.testing.assert_array_equal(out, np.tile([[0.0, 0.0, 0.5, 2.0]], (8, 1)))

    @pytest.mark.parametrize("mode", ["channel", "scalar"])
    def test_matches_stack_form(self, fig1, rng, mode):
        p = fusion.init_conv(3, 5, rng, mode=mode)
        for b in p.biases:
            b.value[...] = rng.normal(size=b.shape)
        H = rng.normal(size=(8, 5))
        fast = fusion.td_conv(H, fusion.TreeIndex.build(fig1), p).value
        ref = fusion.td_conv_stacks(fusion.reorganize(H, fig1), fig1.levels, p).value
        np.testing.assert_allclose(fast, ref, atol=1e-14)

    def test_copies_are_independent(self, fig1, rng):
        p = fusion.init_conv(3, 3, rng)
        A, B = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
        both = fusion.td_conv(np.vstack([A, B]), fusion.TreeIndex.build(fig1, copies=2), p).value
        one = fusion.TreeIndex.build(fig1)
        np.testing.assert_allclose(both[:8], fusion.td_conv(A, one, p).value, atol=1e-15)
        np.testing.assert_allclose(both[8:], fusion.td_conv(B, one, p).value, atol=1e-15)

    def test_missing_level(self, fig1, rng):
        p = fusion.init_conv(2, 3, rng)
        with pytest.raises(MissingLevelParams):
            fusion.td_conv(np.zeros((8, 3)), fusion.TreeIndex.build(fig1), p)


class TestBuAttention:
    def identity_attn(self, d_h=1):
        eye, zero = np.eye(d_h), np.zeros((1, d_h))
        return fusion.AttnParams(Param(eye), Param(zero), Param(eye.copy()), Param(zero.copy()))

    def test_hand_example(self, three):
        Hbar = np.array([[1.0], [1.0], [2.0]])
        Hhat = np.array([[0.0], [3.0], [5.0]])
        out = fusion.bu_attention(Hbar, Hhat, fusion.TreeIndex.build(three), self.identity_attn()).value
        w = np.exp([1.0, 2.0]) / np.exp([1.0, 2.0]).sum()
        assert out[0, 0] == pytest.approx(w @ [3.0, 5.0], abs=1e-12)
        assert out[0, 0] == pytest.approx(4.46212, abs=1e-5)

    def test_leaves_keep_top_down(self, fig1, rng):
        Hbar, Hhat = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
        out = fusion.bu_attention(Hbar, Hhat, fusion.TreeIndex.build(fig1), fusion.init_attn(4, rng)).value
        np.testing.assert_array_equal(out[3:], Hhat[3:])

    def test_single_child(self, rng):
        from coherent_cast import hierarchy

        h = hierarchy.from_parent_map([("r", None), ("c", "r")])
        Hbar, Hhat = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        out = fusion.bu_attention(Hbar, Hhat, fusion.TreeIndex.build(h), fusion.init_attn(3, rng)).value
        np.testing.assert_allclose(out[0], Hhat[1], atol=1e-15)

    def test_value_recursion(self, fig1, rng):
        # root sees the level-2 values h_tilde - h_hat + h_bar, not h_tilde
        Hbar, Hhat = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
        attn = fusion.init_attn(2, rng)
        trace = fusion.AttentionTrace()
        out = fusion.bu_attention(Hbar, Hhat, fusion.TreeIndex.build(fig1), attn, trace=trace).value
        alpha_root = trace.weights[0]
        V = out[1:3] - Hhat[1:3] + Hbar[1:3]
        np.testing.assert_allclose(out[0], alpha_root @ V, atol=1e-14)

    @pytest.mark.parametrize("scope", ["children", "level"])
    def test_weights_are_distributions(self, fig1, rng, scope):
        trace = fusion.AttentionTrace()
        fusion.bu_attention(
            rng.normal(size=(8, 4)), rng.normal(size=(8, 4)), fusion.TreeIndex.build(fig1), fusion.init_attn(4, rng), scope, trace
        )
        for alpha, (pp, _) in zip(trace.weights, trace.pairs):
            sums = np.bincount(pp, weights=alpha)
            np.testing.assert_allclose(sums, 1.0, atol=1e-12)
            assert np.all(alpha > 0)

    def test_level_scope_attends_across_siblings(self, fig1, rng):
        trace = fusion.AttentionTrace()
        fusion.bu_attention(
            rng.normal(size=(8, 4)), rng.normal(size=(8, 4)), fusion.TreeIndex.build(fig1), fusion.init_attn(4, rng), "level", trace
        )
        pp, _ = trace.pairs[1]
        assert len(pp) == 2 * 5  # both level-2 parents see all five leaves

    def test_lower_levels_ignore_upper_features(self, fig1, rng):
        Hbar, Hhat = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
        attn, index = fusion.init_attn(3, rng), fusion.TreeIndex.build(fig1)
        ref = fusion.bu_attention(Hbar, Hhat, index, attn).value
        bumped = Hbar.copy()
        bumped[0] += 5.0
        got = fusion.bu_attention(bumped, Hhat, index, attn).value
        np.testing.assert_array_equal(got[1:], ref[1:])
        assert not np.allclose(got[0], ref[0])  # the root query moved
        bumped = Hbar.copy()
        bumped[1] += 5.0
        got = fusion.bu_attention(bumped, Hhat, index, attn).value
        np.testing.assert_array_equal(got[3:], ref[3:])
        np.testing.assert_array_equal(got[2], ref[2])

    def test_sibling_order_irrelevant(self, rng):
        from coherent_cast import hierarchy

        h1 = hierarchy.from_parent_map([("r", None), ("a", "r"), ("b", "r"), ("c", "r")])
        h2 = hierarchy.from_parent_map([("r", None), ("c", "r"), ("a", "r"), ("b", "r")])
        Hbar, Hhat = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        attn = fusion.init_attn(3, rng)
        order = [0, 3, 1, 2]
        a = fusion.bu_attention(Hbar, Hhat, fusion.TreeIndex.build(h1), attn).value
        b = fusion.bu_attention(Hbar[order], Hhat[order], fusion.TreeIndex.build(h2), attn).value
        np.testing.assert_allclose(b, a[order], atol=1e-14)


class TestGateAndHead:
    def test_midpoint(self, rng):
        Ht, Hb = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        z, H = fusion.residual_gate(Ht, Hb, zero_mlp([3, 3]))
        np.testing.assert_array_equal(z.value, 0.5)
        np.testing.assert_allclose(H.value, 0.5 * (Ht + Hb))

    def test_saturated(self, rng):
        Ht, Hb = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        _, H = fusion.residual_gate(Ht, Hb, zero_mlp([3, 3], bias=30.0))
        np.testing.assert_allclose(H.value, Hb, atol=1e-9, rtol=0)

    def test_equal_inputs(self, rng):
        Hb = rng.normal(size=(4, 3))
        _, H = fusion.residual_gate(Hb.copy(), Hb, fusion.init_mlp([3, 3, 3], rng, "g"))
        np.testing.assert_allclose(H.value, Hb, atol=1e-15)

    def test_constant_head(self, rng):
        out = fusion.base_forecast(rng.normal(size=(5, 3)), zero_mlp([3, 4], bias=2.5), 4)
        np.testing.assert_array_equal(out.value, 2.5)

    def test_shared_head(self, rng):
        row = rng.normal(size=(1, 3))
        out = fusion.base_forecast(np.vstack([row, row]), fusion.init_mlp([3, 2], rng, "h"), 2).value
        np.testing.assert_array_equal(out[0], out[1])

    def test_linear_unit(self):
        head = fusion.Mlp([(Param([[2.0]]), Param([[1.0]]))])
        assert fusion.base_forecast([[3.0]], head, 1).item() == 7.0

    def test_denormalised(self):
        head = fusion.Mlp([(Param([[1.0]]), Param([[0.0]]))])
        out = fusion.base_forecast([[1.0], [2.0]], head, 1, loc=[10.0, 20.0], scale=[2.0, 3.0])
        np.testing.assert_array_equal(out.value, [[12.0], [26.0]])

    def test_horizon_mismatch(self, rng):
        with pytest.raises(DimensionMismatch):
            fusion.base_forecast(np.zeros((2, 3)), fusion.init_mlp([3, 2], rng, "h"), 3)


class TestFuse:
    def test_no_stages_passes_raw_features(self, fig1, rng):
        H = rng.normal(size=(8, 3))
        bank = fusion.fuse(H, fusion.TreeIndex.build(fig1), None, None, None)
        assert bank.z is None
        np.testing.assert_array_equal(bank.H.value, H)

    def test_end_to_end_gradient(self, fig1, rng):
        d_h = 4
        index = fusion.TreeIndex.build(fig1)
        conv = fusion.init_conv(3, d_h, rng)
        for b in conv.biases:
            b.value[...] = rng.uniform(0.2, 0.5, size=b.shape)
        attn = fusion.init_attn(d_h, rng)
        gate = fusion.init_mlp([d_h, d_h, d_h], rng, "gate")
        for W, b in gate.layers:
            b.value[...] = rng.uniform(0.1, 0.3, size=b.shape)
        head = fusion.init_mlp([d_h, 2], rng, "head")
        Hbar = Param(rng.normal(size=(8, d_h)), name="Hbar")
        w = rng.normal(size=(8, 2))
        params = [Hbar, *conv.params(), *attn.params(), *gate.params(), *head.params()]

        def f():
            bank = fusion.fuse(Hbar, index, conv, attn, gate)
            return dc.total(fusion.base_forecast(bank.H, head, 2) * w)

        report = dc.grad_check(f, params, tol=1e-4)
        assert report.passed, report
