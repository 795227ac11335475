"""Sequential decision data: trajectories, ingestion, histories.

A subject contributes a baseline covariate vector, an ordered list of stage
records (state covariates, reward, action) and a terminal reward.  The number
of stages may differ across subjects; :meth:`PolicyData.augment` pads every
subject to the maximal stage count with degenerate records (default action,
empty state, zero reward) so that fixed-horizon machinery applies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import (
    DomainError,
    DuplicateKeyError,
    InvalidValueError,
    SchemaError,
    StageRangeError,
    StructureError,
)

__all__ = [
    "StageRecord",
    "Trajectory",
    "HistoryTable",
    "PolicyData",
    "ingest_wide",
    "ingest_long",
    "augment_stages",
    "partial_stages",
    "utility",
    "canonical_label",
]


def canonical_label(value) -> str:
    """Canonical string form of an action label (int-valued floats lose '.0')."""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (float, np.floating)):
        if math.isnan(value):
            raise DomainError("missing action label")
        if float(value).is_integer():
            return str(int(value))
        return str(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def _id_sort_key(s: str):
    # natural order for purely numeric ids, lexicographic otherwise
    return (0, int(s), "") if s.isdigit() else (1, 0, s)


@dataclass(frozen=True)
class StageRecord:
    """One decision stage: state covariates, reward collected, action taken."""

    stage: int
    state: dict
    reward: float
    action: str
    degenerate: bool = False


@dataclass(frozen=True)
class Trajectory:
    """All records of one subject."""

    id: str
    baseline: dict
    stages: tuple[StageRecord, ...]
    terminal_reward: float

    def utility(self) -> float:
        return float(sum(s.reward for s in self.stages) + self.terminal_reward)


@dataclass(frozen=True)
class HistoryTable:
    """History rows at one stage (or pooled across stages).

    ``table`` has ``id`` and ``stage`` key columns followed by covariate
    columns; ``actions`` holds the observed action per row.  ``kind`` is
    ``"full"`` (everything up to the current state, stage-suffixed names) or
    ``"state"`` (baseline plus current state, bare names).
    """

    table: pd.DataFrame
    actions: pd.Series
    kind: str
    stage: int | None

    @property
    def columns(self) -> tuple[str, ...]:
        return tuple(c for c in self.table.columns if c not in ("id", "stage"))

    def frame(self) -> pd.DataFrame:
        """Covariate columns only (keys dropped)."""
        return self.table.drop(columns=["id", "stage"])


class PolicyData:
    """Immutable container of staged decision data in columnar form."""

    def __init__(
        self,
        *,
        ids: np.ndarray,
        baseline: pd.DataFrame,
        state: dict[str, np.ndarray],
        rewards: np.ndarray,
        terminal: np.ndarray,
        actions: np.ndarray,
        present: np.ndarray,
        observed: np.ndarray,
        action_set: tuple[str, ...],
        stage_action_sets: tuple[tuple[str, ...], ...],
        state_names: tuple[str, ...],
        missing_at: frozenset,
        baseline_names: tuple[str, ...],
        augmented: bool = False,
        augment_default: str | None = None,
    ):
        self.ids = np.asarray(ids, dtype=object)
        self.n = len(self.ids)
        self.max_stages = rewards.shape[1]
        self.baseline = baseline.reset_index(drop=True)
        self.state = state
        self.rewards = rewards
        self.terminal = terminal
        self.actions = actions
        self.present = present
        self.observed = observed
        self.action_set = tuple(action_set)
        self.stage_action_sets = tuple(tuple(s) for s in stage_action_sets)
        self.state_names = tuple(state_names)
        self.missing_at = frozenset(missing_at)
        self.baseline_names = tuple(baseline_names)
        self.augmented = augmented
        self.augment_default = augment_default
        self._validate()

    # -- construction ------------------------------------------------------

    @classmethod
    def from_trajectories(
        cls,
        trajectories: list[Trajectory],
        *,
        action_set: tuple[str, ...] | None = None,
        state_names: tuple[str, ...] | None = None,
        missing_at: frozenset = frozenset(),
        baseline_names: tuple[str, ...] | None = None,
        augmented: bool = False,
        augment_default: str | None = None,
    ) -> "PolicyData":
        if not trajectories:
            raise StructureError("no trajectories")
        trajs = sorted(trajectories, key=lambda t: _id_sort_key(str(t.id)))
        seen = set()
        for t in trajs:
            if t.id in seen:
                raise DuplicateKeyError(f"duplicate id {t.id!r}")
            seen.add(t.id)
        n = len(trajs)
        k_max = max(len(t.stages) for t in trajs)
        if state_names is None:
            names: list[str] = []
            for t in trajs:
                for s in t.stages:
                    for nm in s.state:
                        if nm not in names:
                            names.append(nm)
            state_names = tuple(names)
        if baseline_names is None:
            bnames: list[str] = []
            for t in trajs:
                for nm in t.baseline:
                    if nm not in bnames:
                        bnames.append(nm)
            baseline_names = tuple(bnames)

        ids = np.array([str(t.id) for t in trajs], dtype=object)
        rewards = np.zeros((n, k_max))
        terminal = np.array([float(t.terminal_reward) for t in trajs])
        actions = np.full((n, k_max), "", dtype=object)
        present = np.zeros((n, k_max), dtype=bool)
        observed = np.zeros((n, k_max), dtype=bool)
        state = {nm: np.full((n, k_max), np.nan, dtype=object) for nm in state_names}
        for i, t in enumerate(trajs):
            for j, s in enumerate(t.stages):
                if s.stage != j + 1:
                    raise StructureError(f"id {t.id!r}: stages not contiguous from 1")
                present[i, j] = True
                observed[i, j] = not s.degenerate
                rewards[i, j] = float(s.reward)
                actions[i, j] = canonical_label(s.action)
                for nm, v in s.state.items():
                    if nm not in state:
                        raise SchemaError(f"undeclared state covariate {nm!r}")
                    state[nm][i, j] = v

        if action_set is None:
            labels = sorted({a for row in actions for a in row if a != ""}, key=str)
            action_set = tuple(labels)
        stage_sets = []
        for k in range(k_max):
            obs = observed[:, k]
            labels = sorted({a for a in actions[obs, k]}, key=str)
            deg = present[:, k] & ~observed[:, k]
            if deg.any() and augment_default is not None and augment_default not in labels:
                labels = labels + [augment_default]
            stage_sets.append(tuple(labels))

        baseline = pd.DataFrame(
            {nm: [t.baseline.get(nm, np.nan) for t in trajs] for nm in baseline_names},
            index=range(n),
        )
        return cls(
            ids=ids,
            baseline=baseline,
            state=state,
            rewards=rewards,
            terminal=terminal,
            actions=actions,
            present=present,
            observed=observed,
            action_set=action_set,
            stage_action_sets=tuple(stage_sets),
            state_names=state_names,
            missing_at=missing_at,
            baseline_names=baseline_names,
            augmented=augmented,
            augment_default=augment_default,
        )

    def _validate(self):
        if self.n == 0:
            raise StructureError("no trajectories")
        if len(self.baseline) != self.n:
            raise StructureError("baseline table must have one row per subject")
        if not np.all(np.isfinite(self.rewards[self.present])):
            raise InvalidValueError("non-finite reward")
        if not np.all(np.isfinite(self.terminal)):
            raise InvalidValueError("non-finite terminal reward")
        # stage records must be contiguous, degenerate records only in the tail
        for k in range(1, self.max_stages):
            bad = self.present[:, k] & ~self.present[:, k - 1]
            if bad.any():
                raise StructureError("stage records are not contiguous")
            bad = self.observed[:, k] & self.present[:, k - 1] & ~self.observed[:, k - 1]
            if bad.any():
                raise StructureError("degenerate stages must form a trailing block")
        if not self.present[:, 0].all():
            raise StructureError("every trajectory needs a stage-1 record")
        action_set = set(self.action_set)
        for k in range(self.max_stages):
            obs = self.observed[:, k]
            labels = set(self.actions[obs, k])
            if not labels <= action_set:
                raise DomainError(
                    f"stage {k + 1} has action label(s) {sorted(labels - action_set)} outside the action set"
                )
            deg = self.present[:, k] & ~obs
            if deg.any():
                deg_labels = set(self.actions[deg, k])
                if self.augment_default is None or deg_labels != {self.augment_default}:
                    raise StructureError("degenerate records must carry the augmentation default action")
        if self.augmented and not self.present.all():
            raise StructureError("augmented data must have the same stage count everywhere")

    # -- basic quantities ----------------------------------------------------

    @property
    def k_star(self) -> np.ndarray:
        """Number of non-degenerate stages per subject."""
        return self.observed.sum(axis=1)

    @property
    def trajectories(self) -> list[Trajectory]:
        out = []
        for i in range(self.n):
            stages = []
            for k in range(self.max_stages):
                if not self.present[i, k]:
                    break
                deg = not self.observed[i, k]
                st = {}
                if not deg:
                    for nm in self.state_names:
                        v = self.state[nm][i, k]
                        if not (isinstance(v, float) and math.isnan(v)):
                            st[nm] = v
                stages.append(
                    StageRecord(
                        stage=k + 1,
                        state=st,
                        reward=float(self.rewards[i, k]),
                        action=self.actions[i, k],
                        degenerate=deg,
                    )
                )
            out.append(
                Trajectory(
                    id=self.ids[i],
                    baseline={nm: self.baseline[nm].iloc[i] for nm in self.baseline_names},
                    stages=tuple(stages),
                    terminal_reward=float(self.terminal[i]),
                )
            )
        return out

    def utility(self) -> pd.Series:
        """Per-subject total reward (all stage rewards plus the terminal one)."""
        vals = self.rewards.sum(axis=1) + self.terminal
        return pd.Series(vals, index=pd.Index(self.ids, name="id"), name="utility")

    def action_counts(self) -> pd.DataFrame:
        rows = []
        for k in range(self.max_stages):
            counts = {a: int(np.sum(self.actions[self.observed[:, k], k] == a)) for a in self.action_set}
            counts["stage"] = k + 1
            rows.append(counts)
        return pd.DataFrame(rows).set_index("stage")

    def __repr__(self):
        return (
            f"PolicyData(n={self.n}, max_stages={self.max_stages}, "
            f"actions={list(self.action_set)}, augmented={self.augmented})"
        )

    # -- transforms ----------------------------------------------------------

    def augment(self, default_action: str) -> "PolicyData":
        """Pad every subject to the maximal stage count with degenerate records."""
        if self.augmented:
            raise StructureError("data is already augmented")
        default_action = canonical_label(default_action)
        if default_action not in self.action_set:
            raise DomainError(f"default action {default_action!r} not in action set {list(self.action_set)}")
        actions = self.actions.copy()
        actions[~self.present] = default_action
        present = np.ones_like(self.present, dtype=bool)
        stage_sets = []
        for k in range(self.max_stages):
            labels = list(self.stage_action_sets[k])
            if (~self.observed[:, k]).any() and default_action not in labels:
                labels = sorted(labels + [default_action], key=str)
            stage_sets.append(tuple(labels))
        return PolicyData(
            ids=self.ids,
            baseline=self.baseline,
            state=self.state,
            rewards=self.rewards.copy(),
            terminal=self.terminal,
            actions=actions,
            present=present,
            observed=self.observed,
            action_set=self.action_set,
            stage_action_sets=tuple(stage_sets),
            state_names=self.state_names,
            missing_at=self.missing_at,
            baseline_names=self.baseline_names,
            augmented=True,
            augment_default=default_action,
        )

    def partial(self, k_max: int) -> "PolicyData":
        """Truncate to the first ``k_max`` stages, folding later rewards into the terminal reward."""
        if not 1 <= k_max < self.max_stages:
            raise StageRangeError(f"k_max must be in [1, {self.max_stages - 1}], got {k_max}")
        folded = self.rewards[:, k_max:].sum(axis=1) + self.terminal
        return PolicyData(
            ids=self.ids,
            baseline=self.baseline,
            state={nm: arr[:, :k_max] for nm, arr in self.state.items()},
            rewards=self.rewards[:, :k_max].copy(),
            terminal=folded,
            actions=self.actions[:, :k_max].copy(),
            present=self.present[:, :k_max].copy(),
            observed=self.observed[:, :k_max].copy(),
            action_set=self.action_set,
            stage_action_sets=self.stage_action_sets[:k_max],
            state_names=self.state_names,
            missing_at=frozenset((nm, k) for nm, k in self.missing_at if k <= k_max),
            baseline_names=self.baseline_names,
            augmented=self.augmented,
            augment_default=self.augment_default,
        )

    def subset(self, mask: np.ndarray) -> "PolicyData":
        """Row subset by boolean mask (canonical order preserved)."""
        mask = np.asarray(mask, dtype=bool)
        return PolicyData(
            ids=self.ids[mask],
            baseline=self.baseline.loc[mask].reset_index(drop=True),
            state={nm: arr[mask] for nm, arr in self.state.items()},
            rewards=self.rewards[mask],
            terminal=self.terminal[mask],
            actions=self.actions[mask],
            present=self.present[mask],
            observed=self.observed[mask],
            action_set=self.action_set,
            stage_action_sets=self.stage_action_sets,
            state_names=self.state_names,
            missing_at=self.missing_at,
            baseline_names=self.baseline_names,
            augmented=self.augmented,
            augment_default=self.augment_default,
        )

    # -- histories -------------------------------------------------------------

    def _state_column(self, name: str, k: int) -> np.ndarray:
        return self.state[name][:, k].copy()

    def get_history(self, stage: int | None = None, kind: str = "state") -> HistoryTable:
        """History table at ``stage`` (1-based), or pooled over stages when ``stage`` is None.

        Full histories use stage-suffixed names ``(A_1, ..., X_1, ..., X_k, B)``;
        state histories use bare covariate names ``(X, B)``.  Rows cover the
        subjects with a non-degenerate record at the stage.
        """
        if kind not in ("full", "state"):
            raise SchemaError(f"unknown history kind {kind!r}")
        if stage is not None and not 1 <= stage <= self.max_stages:
            raise StageRangeError(f"stage must be in [1, {self.max_stages}], got {stage}")
        if stage is None and kind == "full":
            raise SchemaError("pooled histories are only defined for kind='state'")

        if stage is None:
            frames = [self._history_at(k, "state") for k in range(1, self.max_stages + 1)]
            table = pd.concat([f.table for f in frames], ignore_index=True)
            acts = pd.concat([f.actions for f in frames], ignore_index=True)
            # ids are already in canonical order; sort by (canonical rank, stage)
            rank = {i: pos for pos, i in enumerate(self.ids)}
            key = (
                np.array([rank[i] for i in table["id"]], dtype=np.int64) * (self.max_stages + 1)
                + table["stage"].to_numpy()
            )
            order = np.argsort(key, kind="stable")
            table = table.iloc[order].reset_index(drop=True)
            acts = acts.iloc[order].reset_index(drop=True)
            return HistoryTable(table=table, actions=acts, kind="state", stage=None)
        return self._history_at(stage, kind)

    def _history_at(self, stage: int, kind: str) -> HistoryTable:
        k = stage - 1
        rows = self.observed[:, k]
        data: dict[str, np.ndarray] = {
            "id": self.ids[rows],
            "stage": np.full(int(rows.sum()), stage, dtype=int),
        }
        if kind == "full":
            for j in range(k):
                data[f"A_{j + 1}"] = self.actions[rows, j]
            for nm in self.state_names:
                for j in range(k + 1):
                    data[f"{nm}_{j + 1}"] = self._state_column(nm, j)[rows]
        else:
            for nm in self.state_names:
                data[nm] = self._state_column(nm, k)[rows]
        for nm in self.baseline_names:
            data[nm] = self.baseline[nm].to_numpy()[rows]
        table = pd.DataFrame(data)
        for c in table.columns:
            if c in ("id", "stage"):
                continue
            table[c] = _tighten_dtype(table[c])
        acts = pd.Series(self.actions[rows, k], name="A")
        return HistoryTable(table=table, actions=acts, kind=kind, stage=stage)


def _tighten_dtype(col: pd.Series) -> pd.Series:
    """Represent object columns numerically when every value is a plain number."""
    if col.dtype != object:
        return col
    kind = pd.api.types.infer_dtype(col, skipna=False)
    if kind in ("floating", "integer", "mixed-integer-float"):
        return col.astype(float)
    return col


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


def _require_columns(table: pd.DataFrame, cols, what: str):
    missing = [c for c in cols if c is not None and c not in table.columns]
    if missing:
        raise SchemaError(f"unknown {what} column(s): {missing}")


def ingest_wide(
    table: pd.DataFrame,
    action_cols: list[str],
    covariate_map: dict[str, list[str | None]] | None = None,
    utility_cols: list[str] | None = None,
    baseline_cols: list[str] = (),
    action_set: tuple[str, ...] | None = None,
    id_col: str | None = None,
) -> PolicyData:
    """Build :class:`PolicyData` from one-row-per-subject (wide) data.

    ``covariate_map`` maps a state-covariate name to one source column per
    stage; a ``None`` entry declares the covariate absent at that stage.
    ``utility_cols`` holds either a single final-utility column or K+1
    per-stage reward columns (the last one being the terminal reward).
    """
    covariate_map = covariate_map or {}
    k_max = len(action_cols)
    if k_max < 1:
        raise SchemaError("need at least one action column")
    utility_cols = list(utility_cols or [])
    if len(utility_cols) not in (1, k_max + 1):
        raise SchemaError(f"utility_cols must have length 1 or {k_max + 1}, got {len(utility_cols)}")
    _require_columns(table, action_cols, "action")
    _require_columns(table, utility_cols, "utility")
    _require_columns(table, baseline_cols, "baseline")
    if id_col is not None:
        _require_columns(table, [id_col], "id")
    for name, cols in covariate_map.items():
        if len(cols) != k_max:
            raise SchemaError(f"covariate {name!r} must map to {k_max} per-stage entries")
        _require_columns(table, [c for c in cols if c is not None and not (isinstance(c, float) and math.isnan(c))], "covariate")

    n = len(table)
    if n == 0:
        raise StructureError("empty table")
    if id_col is not None:
        ids = np.array([str(v) for v in table[id_col]], dtype=object)
    else:
        ids = np.array([str(i + 1) for i in range(n)], dtype=object)

    order = sorted(range(n), key=lambda i: _id_sort_key(ids[i]))
    table = table.iloc[order].reset_index(drop=True)
    ids = ids[order]
    if len(set(ids)) != n:
        raise DuplicateKeyError("duplicate ids in wide table")

    actions = np.empty((n, k_max), dtype=object)
    for k, c in enumerate(action_cols):
        actions[:, k] = [canonical_label(v) for v in table[c]]

    rewards = np.zeros((n, k_max))
    if len(utility_cols) == 1:
        terminal = np.asarray(table[utility_cols[0]], dtype=float)
    else:
        for k in range(k_max):
            rewards[:, k] = np.asarray(table[utility_cols[k]], dtype=float)
        terminal = np.asarray(table[utility_cols[-1]], dtype=float)
    if not (np.all(np.isfinite(rewards)) and np.all(np.isfinite(terminal))):
        raise InvalidValueError("non-finite utility/reward values")

    state: dict[str, np.ndarray] = {}
    missing_at = set()
    for name, cols in covariate_map.items():
        arr = np.full((n, k_max), np.nan, dtype=object)
        for k, c in enumerate(cols):
            if c is None or (isinstance(c, float) and math.isnan(c)):
                missing_at.add((name, k + 1))
            else:
                arr[:, k] = table[c].to_numpy()
        state[name] = arr

    if action_set is not None:
        action_set = tuple(canonical_label(a) for a in action_set)
        bad = sorted(set(actions.ravel()) - set(action_set))
        if bad:
            raise DomainError(f"action label(s) {bad} outside the declared action set")
    else:
        action_set = tuple(sorted(set(actions.ravel()), key=str))

    present = np.ones((n, k_max), dtype=bool)
    stage_sets = tuple(tuple(sorted(set(actions[:, k]), key=str)) for k in range(k_max))
    baseline = table[list(baseline_cols)].copy() if baseline_cols else pd.DataFrame(index=range(n))
    return PolicyData(
        ids=ids,
        baseline=baseline,
        state=state,
        rewards=rewards,
        terminal=terminal,
        actions=actions,
        present=present,
        observed=present.copy(),
        action_set=action_set,
        stage_action_sets=stage_sets,
        state_names=tuple(covariate_map.keys()),
        missing_at=frozenset(missing_at),
        baseline_names=tuple(baseline_cols),
        augmented=False,
        augment_default=None,
    )


def ingest_long(
    stage_table: pd.DataFrame,
    baseline_table: pd.DataFrame | None = None,
    *,
    id_col: str = "id",
    stage_col: str = "stage",
    event_col: str = "event",
    action_col: str = "A",
    reward_col: str = "U",
    covariate_cols: list[str] | None = None,
    action_set: tuple[str, ...] | None = None,
) -> PolicyData:
    """Build :class:`PolicyData` from stacked per-stage (long) data.

    A subject with K* decision stages spans K*+1 rows: K* rows with
    ``event == 0`` holding state, action and reward, then one terminal row
    with ``event == 1`` holding the terminal reward.
    """
    _require_columns(stage_table, [id_col, stage_col, event_col, reward_col], "stage")
    if covariate_cols is None:
        covariate_cols = [
            c
            for c in stage_table.columns
            if c not in (id_col, stage_col, event_col, action_col, reward_col)
        ]
    _require_columns(stage_table, covariate_cols, "covariate")

    keys = list(zip(stage_table[id_col], stage_table[stage_col]))
    if len(set(keys)) != len(keys):
        raise DuplicateKeyError("duplicate (id, stage) rows in long table")

    baseline_lookup: dict[str, dict] = {}
    baseline_names: tuple[str, ...] = ()
    if baseline_table is not None:
        _require_columns(baseline_table, [id_col], "baseline id")
        baseline_names = tuple(c for c in baseline_table.columns if c != id_col)
        # column-wise access keeps each column's dtype (iterrows would coerce)
        for i in range(len(baseline_table)):
            key = str(baseline_table[id_col].iloc[i])
            baseline_lookup[key] = {c: baseline_table[c].iloc[i] for c in baseline_names}

    trajs: list[Trajectory] = []
    for sid, grp in stage_table.groupby(id_col, sort=False):
        grp = grp.sort_values(stage_col)
        stages = grp[stage_col].tolist()
        if stages != list(range(1, len(stages) + 1)):
            raise StructureError(f"id {sid!r}: stage numbers must be contiguous from 1")
        events = grp[event_col].tolist()
        if events[-1] != 1 or any(e != 0 for e in events[:-1]):
            raise StructureError(f"id {sid!r}: expected event=0 decision rows then one terminal event=1 row")
        if len(stages) < 2:
            raise StructureError(f"id {sid!r}: needs at least one decision row and one terminal row")
        recs = []
        for _, row in grp.iloc[:-1].iterrows():
            st = {}
            for c in covariate_cols:
                v = row[c]
                if not (isinstance(v, float) and math.isnan(v)):
                    st[c] = v
            recs.append(
                StageRecord(
                    stage=int(row[stage_col]),
                    state=st,
                    reward=float(row[reward_col]),
                    action=canonical_label(row[action_col]),
                )
            )
        term = float(grp.iloc[-1][reward_col])
        trajs.append(
            Trajectory(
                id=str(sid),
                baseline=baseline_lookup.get(str(sid), {}),
                stages=tuple(recs),
                terminal_reward=term,
            )
        )
    return PolicyData.from_trajectories(
        trajs,
        action_set=tuple(canonical_label(a) for a in action_set) if action_set else None,
        state_names=tuple(covariate_cols),
        baseline_names=baseline_names,
    )


# thin functional aliases mirroring the method API


def augment_stages(pd_: PolicyData, default_action: str) -> PolicyData:
    return pd_.augment(default_action)


def partial_stages(pd_: PolicyData, k_max: int) -> PolicyData:
    return pd_.partial(k_max)


def utility(pd_: PolicyData) -> pd.Series:
    return pd_.utility()
