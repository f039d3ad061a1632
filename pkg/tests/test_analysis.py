import csv
import json

import numpy as np
import pytest

from modtune import analysis as A
from modtune import model as M
from modtune import selection as S

TOY = M.preset("toy")


@pytest.fixture(scope="module")
def fresh():
    return M.build_model(TOY, seed=0)


def _plain_bimodality(x):
    # textbook moment formulas with python floats
    n = len(x)
    mu = sum(x) / n
    m2 = sum((v - mu) ** 2 for v in x) / n
    m3 = sum((v - mu) ** 3 for v in x) / n
    m4 = sum((v - mu) ** 4 for v in x) / n
    return ((m3 / m2**1.5) ** 2 + 1) / (m4 / m2**2)


class TestBimodality:
    def test_two_point_mass(self):
        x = np.array([0.0] * 500 + [1.0] * 500)
        assert A.bimodality_coefficient(x) == pytest.approx(1.0)
        assert A.bimodality_coefficient(x) > A.BIMODAL_THRESHOLD

    def test_normal_is_unimodal(self):
        x = np.random.default_rng(0).standard_normal(20000)
        assert A.bimodality_coefficient(x) == pytest.approx(1 / 3, abs=0.02)

    def test_matches_plain_formula(self):
        x = np.random.default_rng(1).gamma(2.0, size=300)
        assert A.bimodality_coefficient(x) == pytest.approx(_plain_bimodality(x.tolist()), rel=1e-10)


class TestModuleStats:
    def test_fresh_layer_norms(self, fresh):
        s = A.module_weight_stats(fresh, A.LAYER_NORM_POOLED, 10_000, seed=0)
        assert s.sample_size == 2 * 4 * 2 * 64
        assert s.subgroups["gamma"]["mean"] == 1.0 and s.subgroups["beta"]["mean"] == 0.0
        assert s.mean == 0.5 and s.bimodal

    def test_feed_forward(self, fresh):
        s = A.module_weight_stats(fresh, M.FEED_FORWARD, 10_000, seed=0)
        assert s.sample_size == 10_000
        assert not s.bimodal
        assert abs(s.mean) < 0.005
        assert s.std >= 0
        assert s.trimmed + sum(s.counts) == s.sample_size

    def test_untrimmed_histogram_counts_everything(self, fresh):
        s = A.module_weight_stats(fresh, M.MULTI_HEAD, 5000, seed=2, trim=False)
        assert sum(s.counts) == 5000 and s.trimmed == 0

    def test_histogram_reconstructs_mean(self, fresh):
        s = A.module_weight_stats(fresh, M.FEED_FORWARD, 10_000, seed=1)
        edges = np.array(s.bin_edges)
        mids = (edges[:-1] + edges[1:]) / 2
        approx = float(np.dot(s.counts, mids) / sum(s.counts))
        width = edges[1] - edges[0]
        model_vals = np.concatenate([g.values for g in fresh.registry if g.tag == M.FEED_FORWARD])
        rng = np.random.default_rng(1)
        idx = np.sort(rng.choice(model_vals.size, size=10_000, replace=False))
        trimmed = A.trim_outliers(model_vals[idx])
        assert abs(approx - trimmed.mean()) <= 2 * width

    def test_deterministic(self, fresh):
        a = A.module_weight_stats(fresh, M.MULTI_HEAD, 2000, seed=5)
        b = A.module_weight_stats(fresh, M.MULTI_HEAD, 2000, seed=5)
        assert a == b

    def test_errors(self, fresh):
        with pytest.raises(ValueError):
            A.module_weight_stats(fresh, "Pooler")

    def test_trim_rule(self):
        x = np.array([0.0] * 10 + [1.0] * 10 + [100.0])
        kept = A.trim_outliers(x)
        assert 100.0 not in kept and kept.size == 20


class TestOutlierReport:
    def test_dominant_entry_first(self):
        m = M.build_model(TOY, seed=0)
        m["layer.1.ln_ffn.gamma"].data[7] = 10.0
        report = {r.norm: r for r in A.outlier_report(m, 4)}
        r = report["layer.1.ln_ffn"]
        assert r.indices[0] == 7 and r.values[0] == 10.0
        assert all(len(x.indices) == 4 for x in report.values())
        assert r.deviations == sorted(r.deviations, reverse=True)

    def test_agrees_with_mask(self):
        m = M.build_model(TOY, seed=0)
        rng = np.random.default_rng(3)
        for g in m.registry:
            if g.tag in (M.LN_ATT, M.LN_FFN):
                g.tensor.data += 0.1 * rng.standard_normal(g.shape)
        mask = S.apply_outlier_regime(m.registry, 16)
        for r in A.outlier_report(m, 16):
            got = sorted(r.indices)
            expected = sorted(list(mask[r.norm + ".gamma"]) + [64 + i for i in mask[r.norm + ".beta"]])
            assert got == expected


class TestRatioTable:
    def test_base_rows(self):
        rows = {r.regime: r for r in A.ratio_table(M.describe_registry(M.preset("base")),
                                                  single_layers=[5])}
        # encoder-only numerator over a head-inclusive total: prints as 100%
        assert f"{rows['FullFT'].percent:.4g}" == "100"
        assert rows["FullFT"].trainable == rows["FullFT"].total
        assert rows["LayerNorms"].encoder_trainable == 36_864
        assert f"{rows['LayerNorms'].percent:.3f}" == "0.034"
        assert rows["LayerNormsAtt"].encoder_trainable == 18_432
        assert f"{rows['LayerNormsAtt'].percent:.3f}" == "0.017"
        assert rows["OutlierLN(n=256)"].encoder_trainable == 6_144
        assert rows["SingleLayerLN(5)"].trainable == 4_610

    def test_toy_layer_norms(self):
        rows = {r.regime: r for r in A.ratio_table(M.describe_registry(TOY))}
        assert rows["LayerNorms"].encoder_trainable == 2 * 4 * 2 * 64 == 1024
        # 9 table regimes + 4 outlier sizes + 4 single layers
        assert len(rows) == 17

    def test_writers(self, tmp_path, fresh):
        s = A.module_weight_stats(fresh, M.FEED_FORWARD, 1000, seed=0, bins=10)
        A.write_histogram_csv(s, tmp_path / "h.csv")
        with open(tmp_path / "h.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["bin_lo", "bin_hi", "count"] and len(rows) == 11
        A.write_json(s.as_dict(), tmp_path / "s.json")
        assert json.loads((tmp_path / "s.json").read_text())["sample_size"] == 1000
