import numpy as np
import pandas as pd
import pytest

from dtrkit import (
    AlignmentError,
    EvalResult,
    Policy,
    TableRule,
    clustered_variance,
    conditional_value,
    contrast,
    dr_scores,
    fit_g,
    g_spec,
    ingest_wide,
    merge_results,
    policy_eval,
    q_spec,
    sim_two_stage,
    static_policy,
    value_dr,
    value_ipw,
    value_or,
)
from dtrkit.evaluation import _q_chain
from dtrkit.nuisance import _normalize_specs
from dtrkit.policy import policy_actions_matrix

from helpers import sim_discrete_toy


def balanced_pair():
    table = pd.DataFrame({"X": [0.0, 1.0], "A": ["1", "0"], "U": [2.0, 7.0]})
    return ingest_wide(table, action_cols=["A"], covariate_map={"X": ["X"]}, utility_cols=["U"])


class TestScores:
    def test_hand_evaluated_single_stage_score(self):
        # Q fixed at zero, g = 1/2, subject follows the policy with U = 2 -> score 4
        pdat = balanced_pair()
        gset = fit_g(pdat, g_spec("~1", family="empirical"))[0]
        sm = dr_scores(pdat, static_policy("1"), gset, None)
        np.testing.assert_allclose(sm.z_policy, [4.0, 0.0], atol=1e-12)

    def test_non_follower_score_is_plug_in(self):
        # noiseless cells: the fitted saturated outcome model reproduces U exactly,
        # so every score equals the plug-in at the policy action
        x = np.array([0.0, 0.0, 1.0, 1.0, 0.0, 1.0])
        a = np.array(["0", "1", "0", "1", "0", "1"])
        u = 1.0 + 2.0 * x + (a == "1") * (2.0 * x - 1.0)
        pdat = ingest_wide(
            pd.DataFrame({"X": x, "A": a, "U": u}),
            action_cols=["A"],
            covariate_map={"X": ["X"]},
            utility_cols=["U"],
        )
        gset = fit_g(pdat, g_spec("~1", family="empirical"))[0]
        d_mat = policy_actions_matrix(static_policy("1"), pdat)
        q_specs, _ = _normalize_specs(q_spec("~A*X"), 1, "~A*.", "q")
        pred_d, pred_all, _ = _q_chain(pdat, q_specs, d_mat, None, want_all_actions=True)
        sm = dr_scores(pdat, static_policy("1"), gset, pred_d, pred_all)
        x_sorted = pdat.state["X"][:, 0].astype(float)
        np.testing.assert_allclose(sm.z_policy, 4.0 * x_sorted, atol=1e-10)

    def test_zero_outcome_model_reduces_to_ipw_pointwise(self):
        pdat, _ = sim_two_stage(80, seed=4)
        gset = fit_g(pdat, g_spec("~L+C"))[0]
        pol = static_policy("1")
        sm = dr_scores(pdat, pol, gset, None)
        ipw = value_ipw(pdat, pol, g_models=g_spec("~L+C"))
        np.testing.assert_allclose(sm.z_policy, ipw.scores()[:, 0], atol=1e-10)

    def test_scores_finite_and_stagewise_shape(self):
        pdat, _ = sim_two_stage(50, seed=9)
        gset = fit_g(pdat, g_spec("~L+C"))[0]
        sm = dr_scores(pdat, static_policy("1"), gset, None)
        assert sm.gamma.shape == (50, 2, 2)
        assert np.all(np.isfinite(sm.gamma)) and np.all(np.isfinite(sm.z_policy))


class TestIpw:
    def test_following_everyone_with_unit_propensity(self):
        table = pd.DataFrame({"X": [0.1, 0.2, 0.3], "A": ["1", "1", "1"], "U": [1.0, 2.0, 4.0]})
        pdat = ingest_wide(table, action_cols=["A"], covariate_map={"X": ["X"]}, utility_cols=["U"])
        res = value_ipw(pdat, static_policy("1"))
        assert res.estimate == pytest.approx(pdat.utility().mean(), abs=1e-12)

    def test_no_followers_gives_zero(self):
        table = pd.DataFrame({"X": [0.1, 0.2], "A": ["0", "1"], "U": [5.0, 5.0]})
        pdat = ingest_wide(table, action_cols=["A"], covariate_map={"X": ["X"]}, utility_cols=["U"])
        rule = TableRule(variables=("X",), mapping={("0.1",): "1", ("0.2",): "0"})
        res = value_ipw(pdat, Policy(rules=(rule,), history="state"), g_models=g_spec("~1"))
        assert res.estimate == pytest.approx(0.0, abs=1e-12)


class TestOr:
    def test_saturated_fit_matches_backward_induction_oracle(self):
        pdat, table = sim_discrete_toy(400, seed=8)
        pol = static_policy("1")
        res = value_or(
            pdat,
            pol,
            q_models=[q_spec("~A*X_1", history="full"), q_spec("~A*A_1*X_1*X_2", history="full")],
        )
        # oracle: empirical cell means, backward, under the static policy
        q2 = table.groupby(["X_1", "A_1", "X_2", "A_2"])["U"].mean()
        v2 = {k: q2.get((k[0], k[1], k[2], 1), np.nan) for k, _ in table.groupby(["X_1", "A_1", "X_2"]).size().items()}
        df = table.assign(v2=[v2[(r.X_1, r.A_1, r.X_2)] for r in table.itertuples()])
        q1 = df.groupby(["X_1", "A_1"])["v2"].mean()
        plug = np.array([q1[(r.X_1, 1)] for r in table.itertuples()])
        assert res.estimate == pytest.approx(plug.mean(), abs=1e-8)
        assert res.naive_variance

    def test_observed_action_policy_recovers_mean_utility(self):
        rng = np.random.default_rng(3)
        x = rng.integers(0, 2, 60).astype(float)
        a = rng.integers(0, 2, 60)
        u = rng.normal(size=60)
        table = pd.DataFrame({"X": x, "Aobs": a.astype(float), "A": a, "U": u})
        pdat = ingest_wide(
            table,
            action_cols=["A"],
            covariate_map={"X": ["X"], "Aobs": ["Aobs"]},
            utility_cols=["U"],
        )
        rule = TableRule(variables=("Aobs",), mapping={("0",): "0", ("1",): "1"})
        res = value_or(pdat, Policy(rules=(rule,), history="state"), q_models=q_spec("~A*X*Aobs"))
        assert res.estimate == pytest.approx(u.mean(), abs=1e-10)

    def test_intercept_only_outcome_model_gives_sample_mean(self, single_small):
        pdat, _ = single_small
        res = value_or(pdat, static_policy("0"), q_models=q_spec("~1"))
        assert res.estimate == pytest.approx(pdat.utility().mean(), abs=1e-10)


class TestDr:
    def test_mean_ic_zero_and_variance_nonnegative(self, single_small):
        pdat, _ = single_small
        res = value_dr(pdat, static_policy("1"), m=3, seed=2)
        assert abs(res.ic.mean()) <= 1e-12
        assert res.variance_of_mean[0] >= 0

    def test_deterministic_given_seed(self, single_small):
        pdat, _ = single_small
        a = value_dr(pdat, static_policy("1"), m=4, seed=11)
        b = value_dr(pdat, static_policy("1"), m=4, seed=11)
        assert a.estimate == b.estimate
        np.testing.assert_array_equal(a.ic, b.ic)

    def test_learner_constant_matches_fixed_policy(self, single_small):
        from sklearn.base import BaseEstimator

        class ConstantLearner(BaseEstimator):
            learner_kind = "const"

            def __init__(self, seed=0):
                self.seed = seed

            def fit(self, policy_data, g_models=None, q_models=None):
                return self

            def get_policy(self):
                return static_policy("1")

        pdat, _ = single_small
        a = policy_eval(pdat, learner=ConstantLearner(), m=3, seed=5, name="A=1")
        b = policy_eval(pdat, policy=static_policy("1"), m=3, seed=5)
        assert a.estimate == pytest.approx(b.estimate, abs=1e-12)
        np.testing.assert_allclose(a.ic, b.ic, atol=1e-12)


class TestMergeContrast:
    def test_linear_contrast_exact(self, single_small):
        pdat, _ = single_small
        r0 = value_dr(pdat, static_policy("0"))
        r1 = value_dr(pdat, static_policy("1"))
        joint = merge_results([r0, r1])
        ate = contrast(joint, np.array([-1.0, 1.0]), labels="ATE")
        assert ate.estimates[0] == pytest.approx(r1.estimate - r0.estimate, abs=1e-14)
        np.testing.assert_allclose(ate.ic[:, 0], r1.ic[:, 0] - r0.ic[:, 0], atol=1e-14)

    def test_identity_transform_keeps_result(self, single_small):
        pdat, _ = single_small
        r1 = value_dr(pdat, static_policy("1"))
        same = contrast(r1, np.array([1.0]), labels=r1.names[0])
        assert same.estimates[0] == r1.estimate
        np.testing.assert_array_equal(same.ic, r1.ic)

    def test_finite_difference_matches_linear_path(self, single_small):
        pdat, _ = single_small
        r0 = value_dr(pdat, static_policy("0"))
        r1 = value_dr(pdat, static_policy("1"))
        joint = merge_results([r0, r1])
        exact = contrast(joint, np.array([-1.0, 1.0]))
        fd = contrast(joint, lambda x: x[1] - x[0])
        assert fd.estimates[0] == pytest.approx(exact.estimates[0], abs=1e-12)
        np.testing.assert_allclose(fd.ic, exact.ic, atol=1e-8)

    def test_mismatched_ids_rejected(self, single_small, two_small):
        p1, _ = single_small
        p2, _ = two_small
        r1 = value_dr(p1, static_policy("1"))
        r2 = value_dr(p2, static_policy("1"), g_models=g_spec("~L+C"))
        with pytest.raises(AlignmentError):
            merge_results([r1, r2])


def manual_result(ic_column, ids=None, estimate=0.0):
    ic = np.asarray(ic_column, dtype=float)[:, None]
    n = len(ic)
    return EvalResult(
        names=("manual",),
        estimates=np.array([estimate]),
        ic=ic,
        ids=tuple(ids or (str(i + 1) for i in range(n))),
        estimator="dr",
        variance_of_mean=np.array([(ic[:, 0] ** 2).sum() / n**2]),
    )


class TestClustered:
    def test_singleton_clusters_match_unclustered(self, single_small):
        pdat, _ = single_small
        res = value_dr(pdat, static_policy("1"))
        clustered = clustered_variance(res, {i: i for i in res.ids})
        np.testing.assert_allclose(clustered.variance_of_mean, res.variance_of_mean, rtol=1e-12)
        assert clustered.clustered

    def test_single_cluster_degenerate(self):
        res = manual_result([1.0, -1.0, 2.0, -2.0])
        with pytest.warns(UserWarning, match="one cluster"):
            out = clustered_variance(res, {i: "all" for i in res.ids})
        assert out.variance_of_mean[0] == pytest.approx(0.0, abs=1e-25)

    def test_two_perfectly_correlated_clusters_double_variance(self):
        res = manual_result([1.0, -1.0, 1.0, -1.0])
        out = clustered_variance(res, {"1": "a", "2": "b", "3": "a", "4": "b"})
        assert out.variance_of_mean[0] == pytest.approx(2.0 * res.variance_of_mean[0], abs=1e-15)


class TestConditional:
    def fixture(self):
        rng = np.random.default_rng(1)
        table = pd.DataFrame(
            {
                "X": rng.normal(size=40),
                "G": ["a"] * 20 + ["b"] * 20,
                "A": rng.integers(0, 2, 40),
                "U": rng.normal(size=40),
            }
        )
        return ingest_wide(
            table,
            action_cols=["A"],
            covariate_map={"X": ["X"]},
            utility_cols=["U"],
            baseline_cols=["G"],
        )

    def test_single_level_reproduces_marginal(self):
        pdat = self.fixture()
        res = value_dr(pdat, static_policy("1"))
        pdat_single = self.fixture()
        pdat_single.baseline["G"] = "a"
        cond = conditional_value(res, pdat_single, "G")
        assert cond.names == ("G:a",)
        assert cond.estimates[0] == pytest.approx(res.estimate, abs=1e-12)
        np.testing.assert_allclose(cond.ic[:, 0], res.ic[:, 0], atol=1e-12)

    def test_shifted_groups(self):
        # constructed scores: exactly theta + 1 in group a, theta - 1 in group b
        pdat = self.fixture()
        theta = 3.0
        shift = np.where(np.asarray(pdat.baseline["G"]) == "a", 1.0, -1.0)
        res = manual_result(shift, ids=tuple(pdat.ids), estimate=theta)
        cond = conditional_value(res, pdat, "G")
        est = dict(zip(cond.names, cond.estimates))
        assert est["G:a"] == pytest.approx(theta + 1.0, abs=1e-12)
        assert est["G:b"] == pytest.approx(theta - 1.0, abs=1e-12)

    def test_recombination_identity(self):
        pdat = self.fixture()
        res = value_dr(pdat, static_policy("1"))
        cond = conditional_value(res, pdat, "G")
        shares = np.array([m["share"] for m in [
            {"share": (np.asarray(pdat.baseline["G"]) == lvl).mean()} for lvl in ("a", "b")
        ]])
        recombined = float((shares * cond.estimates).sum())
        assert recombined == pytest.approx(res.estimate, abs=1e-10)

    def test_requires_baseline_variable(self):
        pdat = self.fixture()
        res = value_dr(pdat, static_policy("1"))
        from dtrkit import ConfigError

        with pytest.raises(ConfigError):
            conditional_value(res, pdat, "X")
