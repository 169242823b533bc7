import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from embedexp.balance import (
    SMD_TERMS,
    assess_plausibility,
    balance_report,
    balance_table,
    ks_two_sample,
    pair_distances,
    smd,
)
from embedexp.design import (
    MATCH_COVARIATES,
    DesignResult,
    Pair,
    caliper_match,
    design_none,
    discard_nonoverlap,
    fit_propensity,
    optimal_match,
)
from embedexp.errors import NotApplicableError, UndefinedStatisticError


def _ones(n):
    return [1.0] * n


def _ks_brute(x, y):
    """Exact permutation p-value by listing every split of the pooled sample."""
    z = np.concatenate([x, y])
    m, N = len(x), len(x) + len(y)

    def D(mask):
        a, b = z[mask], z[~mask]
        grid = np.unique(z)
        Fa = np.searchsorted(np.sort(a), grid, side="right") / len(a)
        Fb = np.searchsorted(np.sort(b), grid, side="right") / len(b)
        return np.max(np.abs(Fa - Fb))

    obs = D(np.r_[np.ones(m, bool), np.zeros(N - m, bool)])
    hits = total = 0
    for idx in itertools.combinations(range(N), m):
        mask = np.zeros(N, bool)
        mask[list(idx)] = True
        hits += D(mask) >= obs - 1e-12
        total += 1
    return obs, hits / total


class TestSmd:
    def test_hand_computation(self, make_ds):
        # treated ages 4, 8 (mean 6, var 8); control 2, 4 (mean 3, var 2); pooled sd sqrt(5)
        ds = make_ds([4, 8, 2, 4], [50, 52, 49, 53], [0, 1, 1, 0], [1, 1, 0, 0], _ones(4))
        s = smd(None, ds, ("age", "height"))
        assert s["age"] == pytest.approx(3 / math.sqrt(5))
        assert s["height"] == pytest.approx(0.0)

    def test_identical_groups(self, make_ds):
        ds = make_ds([5, 9, 5, 9], [45, 55, 45, 55], [0, 1, 0, 1], [1, 1, 0, 0], _ones(4))
        assert all(v == 0 for v in smd(None, ds).values())

    def test_zero_pooled_sd(self, make_ds):
        ds = make_ds([5, 5, 6, 6], [45, 46, 45, 46], [0, 1, 0, 1], [1, 1, 0, 0], _ones(4))
        with pytest.raises(UndefinedStatisticError, match="age"):
            smd(None, ds, ("age",))

    def test_label_swap_flips_sign(self, make_ds, synthetic_ds):
        ds = synthetic_ds
        swapped = make_ds(ds.column("age"), ds.column("height"), ds.column("sex"), 1 - ds.treatment, _ones(len(ds)))
        a, b = smd(None, ds), smd(None, swapped)
        for t in SMD_TERMS:
            assert b[t] == pytest.approx(-a[t], rel=1e-12)


class TestKs:
    def test_identical_and_disjoint(self):
        r = ks_two_sample([1, 2, 3], [1, 2, 3])
        assert r.statistic == 0 and r.p_value == 1
        r = ks_two_sample([1, 2, 3], [4, 5, 6])
        assert r.statistic == 1
        assert r.p_value == pytest.approx(2 / math.comb(6, 3))

    def test_empty(self):
        with pytest.raises(ValueError):
            ks_two_sample([], [1.0])

    @pytest.mark.parametrize("seed", range(12))
    def test_exact_matches_enumeration_with_ties(self, seed):
        rng = np.random.default_rng(seed)
        m, n = rng.integers(2, 6), rng.integers(2, 7)
        x = rng.integers(0, 4, m).astype(float)
        y = rng.integers(0, 5, n).astype(float)
        D, p = _ks_brute(x, y)
        r = ks_two_sample(x, y, method="exact")
        assert r.statistic == pytest.approx(D)
        assert r.p_value == pytest.approx(p, abs=1e-12)

    def test_exact_agrees_with_scipy_without_ties(self):
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=14), rng.normal(0.8, 1, size=11)
        r = ks_two_sample(x, y)
        ref = stats.ks_2samp(x, y, method="exact")
        assert r.method == "exact"
        assert r.statistic == pytest.approx(ref.statistic)
        assert r.p_value == pytest.approx(ref.pvalue, rel=1e-6)

    def test_asymptotic_formula(self):
        rng = np.random.default_rng(4)
        x, y = rng.normal(size=200), rng.normal(0.25, 1, size=150)
        r = ks_two_sample(x, y)
        assert r.method == "asymptotic"
        en = math.sqrt(200 * 150 / 350)
        lam = (en + 0.12 + 0.11 / en) * r.statistic
        series = 2 * sum((-1) ** (k - 1) * math.exp(-2 * k * k * lam * lam) for k in range(1, 200))
        assert r.p_value == pytest.approx(series, rel=1e-9)
        assert r.statistic == pytest.approx(stats.ks_2samp(x, y).statistic)

    def test_auto_uses_exact_under_ties(self):
        x = np.repeat(np.arange(40.0), 2)
        assert ks_two_sample(x, x + 1).method == "exact"

    @settings(max_examples=40, deadline=None)
    @given(
        st.lists(st.integers(-50, 50), min_size=1, max_size=15),
        st.lists(st.integers(-50, 50), min_size=1, max_size=15),
    )
    def test_monotone_transform_invariance(self, xs, ys):
        x, y = np.array(xs, float), np.array(ys, float)
        r = ks_two_sample(x, y)
        t = ks_two_sample(np.exp(x / 10), np.exp(y / 10))
        assert 0 <= r.statistic <= 1
        assert t.statistic == pytest.approx(r.statistic)
        assert t.p_value == pytest.approx(r.p_value)


class TestTablesAndVerdict:
    def test_single_identical_pair(self, make_ds):
        ds = make_ds([9, 9], [55, 55], [1, 1], [1, 0], _ones(2))
        row = balance_table(None, ds)
        assert row.treated.age_mean == row.control.age_mean == 9
        assert row.treated.male == row.control.male == 1
        assert row.treated.age_sd == 0

    def test_identical_groups_plausible(self, make_ds):
        ds = make_ds([5, 9, 5, 9], [45, 55, 45, 55], [0, 1, 0, 1], [1, 1, 0, 0], _ones(4))
        v = assess_plausibility(None, ds)
        assert v.plausible and all(p == 1 for p in v.p_values.values())

    def test_verdict_rule(self, synthetic_ds):
        v = assess_plausibility(None, synthetic_ds)
        assert v.plausible == all(p >= v.alpha for p in v.p_values.values())
        assert not v.plausible  # exposed children are much older
        assert v.p_values["age"] == pytest.approx(
            stats.ttest_ind(
                synthetic_ds.column("age")[synthetic_ds.treatment == 1],
                synthetic_ds.column("age")[synthetic_ds.treatment == 0],
                equal_var=False,
            ).pvalue
        )

    def test_no_pairs(self, synthetic_ds):
        with pytest.raises(NotApplicableError):
            pair_distances(design_none(synthetic_ds), synthetic_ds)

    def test_twin_pairs_zero(self, make_ds):
        ds = make_ds([8, 12, 8, 12, 10], [50, 60, 50, 60, 57], [0, 1, 0, 1, 1], [1, 1, 0, 0, 0], _ones(5))
        d = DesignResult("x", (1, 2, 3, 4), pairs=(Pair(1, 3, 0.0), Pair(2, 4, 0.0)), provenance={"reference_ids": [1, 2, 3, 4, 5]})
        pd_ = pair_distances(d, ds)
        assert np.all(pd_.distances == 0)
        assert pd_.counts.sum() == 2


@pytest.fixture(scope="module")
def designs(synthetic_ds):
    pm = fit_propensity(synthetic_ds)
    ov = discard_nonoverlap(synthetic_ds, pm)
    return caliper_match(ov, pm), optimal_match(ov, MATCH_COVARIATES, synthetic_ds)


class TestReport:
    def test_report_shapes(self, designs, synthetic_ds):
        for d in designs:
            rep = balance_report(d, synthetic_ds)
            assert rep.pair_distances.counts.sum() == len(d.pairs)
            assert all(np.isfinite(v) for v in rep.smd_after.values())
            for phases in rep.ks.values():
                for r in phases.values():
                    assert 0 <= r.statistic <= 1 and 0 <= r.p_value <= 1
            love = rep.love_csv().splitlines()
            assert love[0] == "term,phase,value" and len(love) == 1 + 2 * len(SMD_TERMS)
            hist = rep.histogram_csv().splitlines()
            assert sum(int(line.split(",")[2]) for line in hist[1:]) == len(d.pairs)
            assert rep.ks_csv().startswith("covariate,phase,statistic,p_value,method")
            assert rep.to_dict()["verdict"]["alpha"] == 0.05

    def test_matching_improves_age_balance(self, designs, synthetic_ds):
        before = abs(smd(None, synthetic_ds)["age"])
        for d in designs:
            assert abs(smd(d, synthetic_ds)["age"]) < before
