"""Action-probability and outcome regressions with cross-fitting folds.

Model specifications are declarative (:class:`ModelSpec`): a formula, a
family, which history the design is built over, and (for action-probability
models) whether one Markov-type model is pooled across stages.  Fitted
objects carry their training-id set so cross-fit discipline can be audited.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .data import PolicyData
from .errors import ConfigError, FitError, SchemaError, StageRangeError
from .formula import DesignSpec, build_design, parse_formula
from .glm import LinearFit, LogisticFit, MultinomialFit, fit_logistic, fit_multinomial, fit_ols
from .rng import substream

__all__ = [
    "ModelSpec",
    "FoldAssignment",
    "make_folds",
    "GModelSet",
    "QStageModel",
    "fit_g",
    "fit_q_stage",
    "g_spec",
    "q_spec",
]

_FAMILIES = ("auto", "gaussian", "binomial", "multinomial", "empirical")


@dataclass(frozen=True)
class ModelSpec:
    """Declarative regression specification.

    ``history`` selects the covariate set the formula resolves against
    ("state": baseline plus current state, "full": everything observed so
    far).  ``pooled`` (action-probability models only) fits one model on the
    stage-stacked state history; when None it defaults to True for a single
    state-history spec, matching the usual Markov shortcut.
    """

    formula: str
    family: str = "auto"
    history: str = "state"
    pooled: bool | None = None

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.history not in ("state", "full"):
            raise ConfigError(f"history must be 'state' or 'full', got {self.history!r}")
        if self.pooled and self.history == "full":
            raise ConfigError("a pooled model cannot use the full history")

    def to_json(self) -> dict:
        return {
            "formula": self.formula,
            "family": self.family,
            "history": self.history,
            "pooled": bool(self.pooled) if self.pooled is not None else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelSpec":
        return cls(
            formula=obj["formula"],
            family=obj.get("family", "auto"),
            history=obj.get("history", "state"),
            pooled=obj.get("pooled"),
        )


def g_spec(formula: str = "~.", **kw) -> ModelSpec:
    """Action-probability model spec (default: all main effects)."""
    return ModelSpec(formula=formula, **kw)


def q_spec(formula: str = "~A*.", **kw) -> ModelSpec:
    """Outcome model spec (default: action interacted with every covariate)."""
    return ModelSpec(formula=formula, **kw)


# ---------------------------------------------------------------------------
# Folds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldAssignment:
    """Partition of subject ids into M folds (sizes differ by at most one)."""

    fold_of: dict
    m: int
    seed: int

    def fold_mask(self, pd_: PolicyData, fold: int) -> np.ndarray:
        return np.array([self.fold_of[i] == fold for i in pd_.ids], dtype=bool)

    def train_mask(self, pd_: PolicyData, fold: int) -> np.ndarray:
        if self.m == 1:
            return np.ones(pd_.n, dtype=bool)
        return ~self.fold_mask(pd_, fold)


def make_folds(ids, m: int, seed: int) -> FoldAssignment:
    ids = list(ids)
    n = len(ids)
    if m < 1:
        raise StageRangeError(f"fold count must be >= 1, got {m}")
    if m > n:
        raise StageRangeError(f"fold count {m} exceeds the {n} available subjects")
    if m == 1:
        return FoldAssignment(fold_of={i: 0 for i in ids}, m=1, seed=seed)
    gen = np.random.Generator(substream(seed, 0xF01D5))
    perm = gen.permutation(n)
    fold_of = {ids[perm[pos]]: pos % m for pos in range(n)}
    return FoldAssignment(fold_of=fold_of, m=m, seed=seed)


# ---------------------------------------------------------------------------
# Action-probability models
# ---------------------------------------------------------------------------


@dataclass
class _EmpiricalTable:
    variables: tuple[str, ...]
    table: dict  # stratum tuple -> probability vector over stage action set
    levels: tuple[str, ...]

    def predict(self, frame: pd.DataFrame) -> np.ndarray:
        out = np.empty((len(frame), len(self.levels)))
        unseen = 0
        if self.variables:
            strata = list(zip(*[[str(v) for v in frame[c]] for c in self.variables]))
        else:
            strata = [()] * len(frame)
        uniform = np.full(len(self.levels), 1.0 / len(self.levels))
        for r, s in enumerate(strata):
            probs = self.table.get(s)
            if probs is None:
                unseen += 1
                out[r] = uniform
            else:
                out[r] = probs
        if unseen:
            warnings.warn(
                f"{unseen} row(s) fell in strata unseen at fit time; using uniform action probabilities",
                stacklevel=2,
            )
        return out


@dataclass
class _GStageFit:
    family: str
    levels: tuple[str, ...]  # stage action set, declared order
    spec: DesignSpec | None = None
    coding: dict | None = None
    fit: LogisticFit | MultinomialFit | None = None
    empirical: _EmpiricalTable | None = None
    separation: bool = False
    # maps incoming-frame column names to the names the model was fit with
    # (set when a state-history fit is applied to full-history frames)
    rename: dict | None = None

    def predict(self, frame: pd.DataFrame) -> np.ndarray:
        """Probability matrix over ``levels`` for each row of ``frame``."""
        if self.rename:
            frame = frame.rename(columns=self.rename)
        if self.family == "empirical":
            return self.empirical.predict(frame)
        dm = build_design(self.spec, frame, coding=self.coding)
        if self.family == "binomial":
            p1 = self.fit.predict_prob(dm.matrix)
            return np.column_stack([1.0 - p1, p1])
        return self.fit.predict_prob(dm.matrix)


def _resolve_g_family(spec: ModelSpec, n_levels: int) -> str:
    if spec.family != "auto":
        return spec.family
    if n_levels <= 1:
        return "empirical"
    return "binomial" if n_levels == 2 else "multinomial"


def _fit_g_frame(spec: ModelSpec, frame: pd.DataFrame, acts: np.ndarray, levels: tuple[str, ...]) -> _GStageFit:
    if len(levels) == 1:  # a single possible action has probability one regardless of covariates
        table = {(): np.array([1.0])}
        return _GStageFit(family="empirical", levels=levels, empirical=_EmpiricalTable((), table, levels))
    family = _resolve_g_family(spec, len(levels))
    if family == "gaussian":
        raise ConfigError("action-probability models cannot be gaussian")
    if family == "empirical":
        fs = parse_formula(spec.formula, schema=[c for c in frame.columns if c not in ("id", "stage")])
        variables = fs.variables()
        for v in variables:
            if v not in frame.columns:
                raise SchemaError(f"variable {v!r} not found in history columns")
            if frame[v].isna().any():
                raise SchemaError(f"variable {v!r} has missing values in this history")
            if pd.api.types.is_float_dtype(frame[v]):
                raise ConfigError(f"empirical probabilities require categorical variables; {v!r} is numeric")
        if variables:
            strata = list(zip(*[[str(x) for x in frame[c]] for c in variables]))
        else:
            strata = [()] * len(frame)
        table: dict = {}
        for s, a in zip(strata, acts):
            table.setdefault(s, np.zeros(len(levels)))[levels.index(a)] += 1.0
        for s in table:
            table[s] = table[s] / table[s].sum()
        return _GStageFit(family="empirical", levels=levels, empirical=_EmpiricalTable(variables, table, levels))

    fs = parse_formula(spec.formula)
    dm = build_design(fs, frame)
    if family == "binomial":
        if len(levels) != 2:
            raise ConfigError(f"binomial model needs a binary action set, got {list(levels)}")
        y = (acts == levels[1]).astype(float)
        fit = fit_logistic(dm.matrix, y)
    else:
        codes = np.array([levels.index(a) for a in acts])
        try:
            fit = fit_multinomial(dm.matrix, codes, len(levels))
        except FitError as e:
            raise FitError(f"{e} (restrict the stage action set or use more data)") from e
    return _GStageFit(
        family=family,
        levels=levels,
        spec=fs,
        coding=dm.coding,
        fit=fit,
        separation=getattr(fit, "separation", False),
    )


@dataclass
class GModelSet:
    """Fitted action-probability models (one per stage, or one pooled)."""

    specs: tuple[ModelSpec, ...]
    pooled: bool
    stage_fits: list
    action_set: tuple[str, ...]
    stage_action_sets: tuple[tuple[str, ...], ...]
    train_ids: frozenset

    def stage_fit(self, stage: int) -> _GStageFit:
        return self.stage_fits[0] if self.pooled else self.stage_fits[stage - 1]

    def predict_all(self, pd_: PolicyData) -> np.ndarray:
        """(n, K, |action_set|) probabilities; degenerate rows get mass 1 on the default action."""
        n, k_max, na = pd_.n, pd_.max_stages, len(self.action_set)
        out = np.zeros((n, k_max, na))
        col_of = {a: j for j, a in enumerate(self.action_set)}
        for k in range(1, k_max + 1):
            rows = pd_.observed[:, k - 1]
            if rows.any():
                sf = self.stage_fit(k)
                hist = pd_.get_history(stage=k, kind=self.specs[0].history if self.pooled else self.specs[k - 1].history)
                probs = sf.predict(hist.frame())
                idx = np.where(rows)[0]
                for j, a in enumerate(sf.levels):
                    out[idx, k - 1, col_of[a]] = probs[:, j]
            deg = pd_.present[:, k - 1] & ~pd_.observed[:, k - 1]
            if deg.any():
                out[np.where(deg)[0], k - 1, col_of[pd_.augment_default]] = 1.0
        return out

    def prob_observed(self, pd_: PolicyData, probs: np.ndarray | None = None) -> np.ndarray:
        """(n, K) probability of the action actually taken; 1 on degenerate/absent rows."""
        if probs is None:
            probs = self.predict_all(pd_)
        col_of = {a: j for j, a in enumerate(self.action_set)}
        out = np.ones((pd_.n, pd_.max_stages))
        for k in range(pd_.max_stages):
            rows = np.where(pd_.observed[:, k])[0]
            cols = np.array([col_of[a] for a in pd_.actions[rows, k]], dtype=int)
            out[rows, k] = probs[rows, k, cols]
        return out


def _normalize_specs(specs, k_max: int, default_formula: str, role: str) -> tuple[tuple[ModelSpec, ...], bool]:
    """Expand a single spec or list into per-stage specs; returns (specs, pooled)."""
    if specs is None:
        specs = ModelSpec(formula=default_formula)
    if isinstance(specs, ModelSpec):
        if role == "g":
            pooled = specs.pooled if specs.pooled is not None else specs.history == "state"
            if pooled:
                return (specs,) * k_max, True
        return (specs,) * k_max, False
    specs = tuple(specs)
    if len(specs) != k_max:
        raise ConfigError(f"{role}-model list must have one spec per stage ({k_max}), got {len(specs)}")
    if any(s.pooled for s in specs):
        raise ConfigError("per-stage model lists cannot be pooled")
    return specs, False


def fit_g(pd_: PolicyData, specs=None, folds: FoldAssignment | None = None) -> list[GModelSet]:
    """Fit action-probability models per fold (trained on each fold's complement)."""
    specs, pooled = _normalize_specs(specs, pd_.max_stages, "~.", "g")
    if pooled and len(set(pd_.stage_action_sets)) > 1:
        raise ConfigError("a pooled action-probability model requires identical stage action sets")
    folds = folds or make_folds(pd_.ids, 1, 0)
    out = []
    for m in range(folds.m):
        train = folds.train_mask(pd_, m)
        sub = pd_.subset(train) if not train.all() else pd_
        if pooled:
            hist = sub.get_history(stage=None, kind="state")
            fitted = [_fit_g_frame(specs[0], hist.frame(), hist.actions.to_numpy(), pd_.stage_action_sets[0])]
        else:
            fitted = []
            for k in range(1, pd_.max_stages + 1):
                hist = sub.get_history(stage=k, kind=specs[k - 1].history)
                if len(hist.table) == 0:
                    raise FitError(f"no data to fit the stage-{k} action model in fold {m + 1}")
                fitted.append(_fit_g_frame(specs[k - 1], hist.frame(), hist.actions.to_numpy(), pd_.stage_action_sets[k - 1]))
        out.append(
            GModelSet(
                specs=specs,
                pooled=pooled,
                stage_fits=fitted,
                action_set=pd_.action_set,
                stage_action_sets=pd_.stage_action_sets,
                train_ids=frozenset(sub.ids.tolist()),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Outcome models
# ---------------------------------------------------------------------------


@dataclass
class QStageModel:
    """Per-stage outcome regression on the action-interacted design.

    The fitted target is the *residual* value (rewards accrued after the
    stage); callers add accumulated rewards back where the total is needed.
    Predictions plug an arbitrary action into the saved design.
    """

    stage: int
    spec: DesignSpec
    history: str
    coding: dict
    fit: LinearFit
    action_levels: tuple[str, ...]
    train_ids: frozenset

    def predict(self, pd_: PolicyData, actions) -> np.ndarray:
        """Predictions for subjects observed at this stage, in row order of the stage history.

        ``actions`` is a single label or an array aligned with those rows.
        """
        hist = pd_.get_history(stage=self.stage, kind=self.history)
        vals = np.asarray(actions, dtype=object)
        if vals.ndim == 0:
            vals = np.repeat(vals, len(hist.table))
        dm = build_design(self.spec, hist.frame(), action_labels=self.action_levels, action_values=vals, coding=self.coding)
        return self.fit.predict(dm.matrix)


def fit_q_stage(
    pd_: PolicyData,
    stage: int,
    pseudo_outcome: np.ndarray,
    spec: ModelSpec,
    train_mask: np.ndarray | None = None,
) -> QStageModel:
    """Fit the stage-``stage`` outcome model on ``train_mask`` subjects.

    ``pseudo_outcome`` is aligned with all subjects (length n); only entries
    for subjects observed at the stage and in the training set are used.
    """
    if spec.family not in ("auto", "gaussian"):
        raise ConfigError("outcome models are gaussian")
    rows = pd_.observed[:, stage - 1]
    train = rows if train_mask is None else (rows & train_mask)
    if not train.any():
        raise FitError(f"no rows to fit the stage-{stage} outcome model")
    hist_all = pd_.get_history(stage=stage, kind=spec.history)
    obs_idx = np.where(rows)[0]
    sel = np.isin(obs_idx, np.where(train)[0])
    frame = hist_all.frame().loc[sel].reset_index(drop=True)
    acts = hist_all.actions.to_numpy()[sel]
    levels = pd_.stage_action_sets[stage - 1]
    fs = parse_formula(spec.formula)
    dm = build_design(fs, frame, action_labels=levels, action_values=acts)
    y = np.asarray(pseudo_outcome, dtype=float)[np.where(train)[0]]
    fit = fit_ols(dm.matrix, y)
    return QStageModel(
        stage=stage,
        spec=fs,
        history=spec.history,
        coding=dm.coding,
        fit=fit,
        action_levels=levels,
        train_ids=frozenset(np.asarray(pd_.ids)[train].tolist()),
    )
