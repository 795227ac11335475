"""Cross-checks of the full estimator assembly against independent
re-implementations that share no code with the package internals."""

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

import dtrkit as dk


class TestSingleStageAipw:
    def test_value_dr_matches_hand_rolled_aipw(self):
        pdat, tab = dk.sim_single_stage(3000, seed=17)
        res = dk.value_dr(pdat, dk.static_policy("1"))  # defaults: g ~., q ~A*.

        z_, l_, b_, a_, u_ = (tab[c].to_numpy().astype(float) for c in ("Z", "L", "B", "A", "U"))
        xg = np.column_stack([z_, b_, l_])
        lr = LogisticRegression(penalty=None, tol=1e-12, max_iter=5000).fit(xg, a_)
        g1 = lr.predict_proba(xg)[:, 1]

        def qdesign(a):
            return np.column_stack([np.ones_like(z_), a, z_, b_, l_, a * z_, a * b_, a * l_])

        beta, *_ = np.linalg.lstsq(qdesign(a_), u_, rcond=None)
        q_obs = qdesign(a_) @ beta
        q1 = qdesign(np.ones_like(a_)) @ beta
        scores = q1 + (a_ == 1) / g1 * (u_ - q_obs)

        assert res.estimate == pytest.approx(scores.mean(), abs=1e-8)
        assert res.std_err[0] == pytest.approx(scores.std(ddof=0) / np.sqrt(len(scores)), abs=1e-8)


class TestTwoStageTelescopingSum:
    def test_policy_scores_match_literal_telescoping_formula(self):
        """The backward score recursion equals the telescoping-sum form written out directly."""
        pdat, tab = dk.sim_two_stage(500, seed=23)
        pol = dk.optimal_policy_two_stage()
        gm = dk.g_spec("~L+C")
        qm = dk.q_spec("~A*.", history="full")
        res = dk.value_dr(pdat, pol, g_models=gm, q_models=qm, m=1)

        l1, c1, a1, l2, c2, a2 = (
            tab[c].to_numpy().astype(float) for c in ("L_1", "C_1", "A_1", "L_2", "C_2", "A_2")
        )
        u1, u2, u3 = (tab[c].to_numpy() for c in ("U_1", "U_2", "U_3"))
        u_total = u1 + u2 + u3

        # pooled propensity on the stage-stacked state history
        xg = np.column_stack([np.concatenate([l1, l2]), np.concatenate([c1, c2])])
        ag = np.concatenate([a1, a2])
        lr = LogisticRegression(penalty=None, tol=1e-12, max_iter=5000).fit(xg, ag)
        p1_stage1 = lr.predict_proba(np.column_stack([l1, c1]))[:, 1]
        p1_stage2 = lr.predict_proba(np.column_stack([l2, c2]))[:, 1]
        g_obs1 = np.where(a1 == 1, p1_stage1, 1 - p1_stage1)
        g_obs2 = np.where(a2 == 1, p1_stage2, 1 - p1_stage2)

        # policy actions
        kap = dk.simulate.truncated_mean_positive
        d1 = (c1 + kap(0.5 * l1 + 1.0) - kap(0.5 * l1) > 0).astype(float)
        d2 = (c2 > 0).astype(float)

        # stage-2 residual regression on the full history, action-interacted
        def design2(act):
            base = np.column_stack([a1, l1, l2, c1, c2])
            return np.column_stack([np.ones(len(act)), act, base, act[:, None] * base])

        beta2, *_ = np.linalg.lstsq(design2(a2), u3, rcond=None)
        qres2 = lambda act: design2(act) @ beta2

        # stage-1 residual regression with the stage-2 plug-in pseudo-outcome
        pseudo1 = u2 + qres2(d2)

        def design1(act):
            base = np.column_stack([l1, c1])
            return np.column_stack([np.ones(len(act)), act, base, act[:, None] * base])

        beta1, *_ = np.linalg.lstsq(design1(a1), pseudo1, rcond=None)
        qres1 = lambda act: design1(act) @ beta1

        # literal telescoping sum with Q_k = accumulated rewards + residual fit
        q1_d = u1 + qres1(d1)
        q2_d = u1 + u2 + qres2(d2)
        w1 = (a1 == d1).astype(float) / g_obs1
        w2 = (a2 == d2).astype(float) / g_obs2
        scores = q1_d + w1 * (q2_d - q1_d) + w1 * w2 * (u_total - q2_d)

        assert res.estimate == pytest.approx(scores.mean(), abs=1e-8)
        got_scores = res.scores()[:, 0]
        # PolicyData canonicalizes by numeric id, matching the table row order here
        np.testing.assert_allclose(got_scores, scores, atol=1e-7)
