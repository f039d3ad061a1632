import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modtune import model as M
from modtune import selection as S
from modtune.trainer import AdamState, adam_step

BASE = M.describe_registry(M.preset("base"))
TOY_CFG = M.preset("toy")


def _stats(spec, registry=BASE):
    return S.mask_stats(S.resolve(spec, registry), registry)


def _brute_outliers(t, n):
    # independent oracle: exact mean via sorted-pairwise fsum, python sort on (-dev, index)
    import math
    t = [float(x) for x in t]
    mean = math.fsum(t) / len(t)
    ranked = sorted(range(len(t)), key=lambda i: (-abs(t[i] - mean), i))
    return sorted(ranked[:min(n, len(t))])


class TestSpec:
    def test_required_fields(self):
        with pytest.raises(S.SelectionError):
            S.SelectionSpec(S.OUTLIER_LN)
        with pytest.raises(S.SelectionError):
            S.SelectionSpec(S.RAND)
        with pytest.raises(S.SelectionError):
            S.SelectionSpec(S.SINGLE_LAYER_LN)
        with pytest.raises(S.SelectionError):
            S.SelectionSpec(S.FREEZE, n_outliers=3)
        with pytest.raises(S.SelectionError):
            S.SelectionSpec("Everything")

    def test_spec_from_mapping(self):
        spec = S.spec_from_mapping({"regime": "SingleLayerLN", "layers": "1, 3"})
        assert spec.layers == frozenset({1, 3})
        assert spec.label() == "SingleLayerLN(1,3)"


class TestResolve:
    def test_full_ft(self):
        s = _stats(S.SelectionSpec(S.FULL_FT))
        assert s.trainable == s.total and s.ratio == 1.0

    def test_freeze_trains_classifier_only(self):
        reg = M.describe_registry(TOY_CFG)
        s = _stats(S.SelectionSpec(S.FREEZE), reg)
        assert s.encoder_trainable == 0
        assert s.trainable == 64 * 2 + 2
        assert s.breakdown == {M.CLASSIFIER: 130}
        s = _stats(S.SelectionSpec(S.FREEZE, include_classifier=False), reg)
        assert s.trainable == 0

    def test_layer_norms_base(self):
        s = _stats(S.SelectionSpec(S.LAYER_NORMS))
        assert s.encoder_trainable == 36_864
        assert f"{100 * s.encoder_trainable / s.total:.3f}" == "0.034"

    def test_layer_norm_partition(self):
        both = _stats(S.SelectionSpec(S.LAYER_NORMS)).encoder_trainable
        att = _stats(S.SelectionSpec(S.LAYER_NORMS_ATT)).encoder_trainable
        ffn = _stats(S.SelectionSpec(S.LAYER_NORMS_FFN)).encoder_trainable
        assert att + ffn == both and att == ffn == 18_432
        a = S.resolve(S.SelectionSpec(S.LAYER_NORMS_ATT), BASE)
        f = S.resolve(S.SelectionSpec(S.LAYER_NORMS_FFN), BASE)
        ln = S.resolve(S.SelectionSpec(S.LAYER_NORMS), BASE)
        for g in BASE:
            union = S.ALL if S.ALL in (a[g.name], f[g.name]) else S.NONE
            assert ln[g.name] == union

    def test_rand_matches_layer_norm_budget(self):
        spec = S.SelectionSpec(S.RAND, rand_budget=36_864, rand_seed=3)
        s = _stats(spec)
        assert s.encoder_trainable == 36_864
        mask = S.resolve(spec, BASE)
        for g in BASE:
            e = mask[g.name]
            if not isinstance(e, str):
                assert np.all(np.diff(e) > 0) and e[0] >= 0 and e[-1] < g.size

    def test_rand_deterministic(self):
        spec = S.SelectionSpec(S.RAND, rand_budget=500, rand_seed=9)
        reg = M.describe_registry(TOY_CFG)
        assert S.resolve(spec, reg) == S.resolve(spec, reg)
        other = S.SelectionSpec(S.RAND, rand_budget=500, rand_seed=10)
        assert S.resolve(spec, reg) != S.resolve(other, reg)

    def test_rand_budget_too_large(self):
        reg = M.describe_registry(TOY_CFG)
        with pytest.raises(S.SelectionError):
            S.resolve(S.SelectionSpec(S.RAND, rand_budget=10**9), reg)

    def test_single_layer(self):
        s = _stats(S.SelectionSpec(S.SINGLE_LAYER_LN, layers={5}))
        assert s.trainable == 4 * 768 + 768 * 2 + 2 == 4_610
        assert s.percent < 0.005
        with pytest.raises(S.SelectionError):
            S.resolve(S.SelectionSpec(S.SINGLE_LAYER_LN, layers={12}), BASE)

    def test_bitfit_counts_linear_biases(self):
        s = _stats(S.SelectionSpec(S.BITFIT))
        oracle = sum(g.shape[0] for g in BASE
                     if g.name.endswith(".bias") and g.name.startswith("layer."))
        assert s.encoder_trainable == oracle == 12 * (4 * 768 + 3072 + 768)
        assert s.breakdown[M.BIAS] == oracle
        assert not any(g.name.endswith(".beta") for g in BASE
                       if S.resolve(S.SelectionSpec(S.BITFIT), BASE)[g.name] == S.ALL)

    def test_outlier_counts(self):
        assert _stats(S.SelectionSpec(S.OUTLIER_LN, n_outliers=256)).encoder_trainable == 6_144
        assert _stats(S.SelectionSpec(S.OUTLIER_LN, n_outliers=4)).encoder_trainable == 96
        # saturation: a norm only has 2H entries
        assert _stats(S.SelectionSpec(S.OUTLIER_LN, n_outliers=10**6)).encoder_trainable == 36_864

    def test_outlier_regime_on_fresh_norms(self):
        # gamma=1, beta=0: every entry deviates by 0.5, so the lowest indices (gamma) win
        mask = S.apply_outlier_regime(BASE, 4)
        np.testing.assert_array_equal(mask["layer.0.ln_att.gamma"], [0, 1, 2, 3])
        assert len(mask["layer.0.ln_att.beta"]) == 0

    def test_mismatched_registry(self):
        toy = M.describe_registry(TOY_CFG)
        mask = S.resolve(S.SelectionSpec(S.FREEZE), toy)
        with pytest.raises(S.SelectionError):
            S.mask_stats(mask, BASE)

    def test_breakdown_sums(self):
        for regime in (S.FULL_FT, S.BITFIT, S.LAYER_NORMS, S.REGIME_MULTI_HEAD):
            s = _stats(S.SelectionSpec(regime))
            assert sum(s.breakdown.values()) == s.trainable


class TestSelectOutliers:
    def test_worked_example(self):
        t = [0.9, 1.1, 1.0, 4.2, -0.5, 1.05]
        mean = sum(t) / len(t)
        assert abs(mean - 1.2917) < 1e-4
        np.testing.assert_array_equal(S.select_outliers(t, 2), [3, 4])
        assert S.select_outliers(t, 2).tolist() == _brute_outliers(t, 2)

    def test_saturation_and_ties(self):
        np.testing.assert_array_equal(S.select_outliers([1.0, 2.0], 5), [0, 1])
        np.testing.assert_array_equal(S.select_outliers(np.full(7, 3.0), 3), [0, 1, 2])

    def test_invalid_n(self):
        with pytest.raises(S.SelectionError):
            S.select_outliers([1.0], 0)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=200),
           st.integers(1, 250))
    def test_matches_brute_force(self, t, n):
        got = S.select_outliers(t, n).tolist()
        assert got == _brute_outliers(t, n)
        mean = sum(t) / len(t)
        chosen = set(got)
        rest = [abs(x - mean) for i, x in enumerate(t) if i not in chosen]
        if rest:
            assert min(abs(t[i] - mean) for i in got) >= max(rest) - 1e-9


REGIME_SPECS = [
    S.SelectionSpec(S.FULL_FT), S.SelectionSpec(S.FREEZE), S.SelectionSpec(S.REGIME_MULTI_HEAD),
    S.SelectionSpec(S.REGIME_FEED_FORWARD), S.SelectionSpec(S.LAYER_NORMS),
    S.SelectionSpec(S.LAYER_NORMS_ATT), S.SelectionSpec(S.LAYER_NORMS_FFN),
    S.SelectionSpec(S.BITFIT), S.SelectionSpec(S.RAND, rand_budget=512, rand_seed=1),
    S.SelectionSpec(S.OUTLIER_LN, n_outliers=16), S.SelectionSpec(S.SINGLE_LAYER_LN, layers={2}),
]


@pytest.mark.parametrize("spec", REGIME_SPECS, ids=lambda s: s.label())
def test_one_step_probe_changes_exactly_the_mask(spec):
    m = M.build_model(TOY_CFG, seed=0)
    rng = np.random.default_rng(0)
    for g in m.registry:
        g.tensor.data += 0.1 * rng.standard_normal(g.shape)
    mask = S.resolve(spec, m.registry)
    before = m.state()
    for g in m.registry:
        g.tensor.grad = rng.standard_normal(g.shape) + 0.5
    adam_step(m.registry, mask, AdamState(m.registry, mask), 1e-2)
    changed = sum(int(np.sum(before[g.name] != g.tensor.data)) for g in m.registry)
    assert changed == S.mask_stats(mask, m.registry).trainable
