import numpy as np
import pandas as pd
import pytest

from dtrkit import (
    ConfigError,
    StageRangeError,
    fit_g,
    fit_logistic,
    g_spec,
    ingest_wide,
    make_folds,
    q_spec,
    sim_two_stage,
    value_dr,
    static_policy,
)
from dtrkit.nuisance import fit_q_stage


class TestFolds:
    def test_even_split(self):
        folds = make_folds([str(i) for i in range(10)], 5, seed=1)
        sizes = pd.Series(list(folds.fold_of.values())).value_counts()
        assert sorted(sizes) == [2, 2, 2, 2, 2]

    def test_single_fold(self):
        folds = make_folds(["a", "b"], 1, seed=0)
        assert set(folds.fold_of.values()) == {0}

    def test_deterministic(self):
        ids = [str(i) for i in range(23)]
        assert make_folds(ids, 4, seed=9).fold_of == make_folds(ids, 4, seed=9).fold_of

    def test_sizes_differ_by_at_most_one(self):
        folds = make_folds([str(i) for i in range(23)], 4, seed=9)
        sizes = pd.Series(list(folds.fold_of.values())).value_counts()
        assert sizes.max() - sizes.min() <= 1

    def test_too_many_folds(self):
        with pytest.raises(StageRangeError):
            make_folds(["a", "b"], 3, seed=0)


class TestGModels:
    def test_pooled_markov_model_fits_on_stacked_rows(self, two_small):
        pdat, table = two_small
        gset = fit_g(pdat, g_spec("~L+C"))[0]
        assert gset.pooled and len(gset.stage_fits) == 1
        # oracle: logistic fit on the hand-stacked 2n-row state history
        x = np.column_stack(
            [
                np.ones(2 * pdat.n),
                np.concatenate([table["L_1"], table["L_2"]]),
                np.concatenate([table["C_1"], table["C_2"]]),
            ]
        )
        y = np.concatenate([table["A_1"], table["A_2"]]).astype(float)
        oracle = fit_logistic(x, y)
        np.testing.assert_allclose(gset.stage_fits[0].fit.coef, oracle.coef, atol=1e-8)

    def test_probability_rows_sum_to_one(self, two_small):
        pdat, _ = two_small
        probs = fit_g(pdat, g_spec("~L+C"))[0].predict_all(pdat)
        sums = probs.sum(axis=2)
        assert np.abs(sums[pdat.present] - 1.0).max() <= 1e-12
        assert probs.min() >= 0.0 and probs.max() <= 1.0

    def test_per_stage_full_history(self, two_small):
        pdat, _ = two_small
        gset = fit_g(pdat, [g_spec("~C_1", history="full"), g_spec("~C_2", history="full")])[0]
        assert not gset.pooled and len(gset.stage_fits) == 2

    def test_pooled_full_history_rejected(self):
        with pytest.raises(ConfigError):
            g_spec("~.", history="full", pooled=True)

    def test_spec_list_length_mismatch(self, two_small):
        pdat, _ = two_small
        with pytest.raises(ConfigError):
            fit_g(pdat, [g_spec("~C")])


class TestEmpirical:
    def fixture(self):
        # stage 1: 112 cct vs 105 lt; stage 2: responders always continue
        n = 217
        rng = np.random.default_rng(0)
        a1 = np.array(["cct"] * 112 + ["lt"] * 105)
        responder = rng.random(n) < 36 / 217
        a2 = np.where(responder, "continue", np.where(rng.random(n) < 0.5248, "text", "notext"))
        table = pd.DataFrame(
            {
                "A_1": a1,
                "responder": responder,
                "A_2": a2,
                "U": rng.normal(size=n),
            }
        )
        return ingest_wide(
            table,
            action_cols=["A_1", "A_2"],
            covariate_map={"responder": [None, "responder"]},
            utility_cols=["U"],
        )

    def test_marginal_probability(self):
        pdat = self.fixture()
        gset = fit_g(pdat, [g_spec("~1", family="empirical"), g_spec("~responder", family="empirical")])[0]
        stage1 = gset.stage_fits[0]
        idx = stage1.levels.index("cct")
        np.testing.assert_allclose(stage1.empirical.table[()][idx], 112 / 217, atol=1e-12)

    def test_degenerate_responder_probability(self):
        pdat = self.fixture()
        gset = fit_g(pdat, [g_spec("~1", family="empirical"), g_spec("~responder", family="empirical")])[0]
        stage2 = gset.stage_fits[1]
        row = stage2.empirical.table[("True",)]
        assert row[stage2.levels.index("continue")] == 1.0

    def test_unseen_stratum_uniform_with_warning(self):
        pdat = self.fixture()
        gset = fit_g(pdat, [g_spec("~1", family="empirical"), g_spec("~responder", family="empirical")])[0]
        stage2 = gset.stage_fits[1]
        with pytest.warns(UserWarning, match="unseen"):
            probs = stage2.predict(pd.DataFrame({"responder": ["maybe"]}))
        np.testing.assert_allclose(probs, np.full((1, 3), 1 / 3), atol=1e-12)

    def test_numeric_variable_rejected(self, two_small):
        pdat, _ = two_small
        with pytest.raises(ConfigError):
            fit_g(pdat, g_spec("~C", family="empirical"))

    def test_variable_missing_at_stage_rejected(self):
        from dtrkit import SchemaError

        pdat = self.fixture()  # responder is declared absent at stage 1
        with pytest.raises(SchemaError):
            fit_g(pdat, [g_spec("~responder", family="empirical"), g_spec("~responder", family="empirical")])


class TestQModels:
    def test_stage2_design_includes_prior_action_interactions(self, two_small):
        pdat, _ = two_small
        model = fit_q_stage(pdat, 2, pdat.terminal, q_spec("~A*.", history="full"), None)
        hist = pdat.get_history(stage=2, kind="full")
        from dtrkit.formula import build_design

        dm = build_design(
            model.spec,
            hist.frame(),
            action_labels=model.action_levels,
            action_values=hist.actions.to_numpy(),
            coding=model.coding,
        )
        assert "A1:C_2" in dm.names and "A_11" in dm.names

    def test_counterfactual_prediction_changes_with_action(self, two_small):
        pdat, _ = two_small
        model = fit_q_stage(pdat, 2, pdat.terminal, q_spec("~A*C"), None)
        p0 = model.predict(pdat, np.asarray("0", dtype=object))
        p1 = model.predict(pdat, np.asarray("1", dtype=object))
        assert not np.allclose(p0, p1)


class TestCrossFitDiscipline:
    def test_held_out_scoring(self):
        pdat, _ = sim_two_stage(60, seed=2)
        res = value_dr(
            pdat, static_policy("1"), g_models=g_spec("~L+C"), q_models=q_spec("~A*."), m=3, seed=5
        )
        fold_of = res.metadata["fold_of"]
        train_ids = res.metadata["train_ids"]
        for i in pdat.ids:
            assert i not in train_ids[fold_of[i]]

    def test_single_fold_trains_on_everything(self):
        pdat, _ = sim_two_stage(40, seed=3)
        res = value_dr(
            pdat, static_policy("1"), g_models=g_spec("~L+C"), q_models=q_spec("~A*."), m=1, seed=5
        )
        assert res.metadata["train_ids"][0] == frozenset(pdat.ids.tolist())
