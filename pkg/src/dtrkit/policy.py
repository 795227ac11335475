"""Static and dynamic decision policies, realistic-action restriction, JSON round trip.

A policy holds one rule per stage (or a single rule reused at every stage).
Rules consume the covariate frame of their declared history kind and return
one action label per row.  Serializable rule kinds register themselves in
``RULE_REGISTRY``; arbitrary Python callables are accepted by the library but
refuse to serialize.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .data import PolicyData, canonical_label
from .errors import (
    ConfigError,
    DomainError,
    FormatError,
    InvalidValueError,
    PositivityError,
    SchemaError,
)

__all__ = [
    "Rule",
    "StaticRule",
    "LinearThresholdRule",
    "TableRule",
    "CallableRule",
    "Policy",
    "static_policy",
    "apply_policy",
    "RealisticActionSet",
    "realistic_set",
    "overrule_unrealistic",
    "serialize_policy",
    "deserialize_policy",
    "RULE_REGISTRY",
]

POLICY_FORMAT = "dtrkit-policy"
POLICY_VERSION = 1

RULE_REGISTRY: dict[str, type] = {}


def register_rule(cls):
    RULE_REGISTRY[cls.kind] = cls
    return cls


class Rule:
    """Stage rule protocol: map a history frame to action labels."""

    kind = "abstract"

    def actions(self, frame: pd.DataFrame) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    def to_json(self) -> dict:
        raise FormatError(f"rule kind {type(self).__name__!r} is not serializable")


@register_rule
@dataclass(frozen=True)
class StaticRule(Rule):
    action: str
    kind = "static"

    def actions(self, frame: pd.DataFrame) -> np.ndarray:
        return np.full(len(frame), canonical_label(self.action), dtype=object)

    def to_json(self) -> dict:
        return {"kind": self.kind, "action": self.action}

    @classmethod
    def from_json(cls, obj: dict) -> "StaticRule":
        return cls(action=obj["action"])


@register_rule
@dataclass(frozen=True)
class LinearThresholdRule(Rule):
    """Choose ``action_if_positive`` when coef . x + intercept > 0, else ``action_else``.

    A score of exactly zero resolves to ``action_else`` (strict inequality).
    """

    coefficients: dict
    intercept: float
    action_if_positive: str
    action_else: str
    kind = "linear_threshold"

    def actions(self, frame: pd.DataFrame) -> np.ndarray:
        score = np.full(len(frame), float(self.intercept))
        for var, coef in self.coefficients.items():
            if var not in frame.columns:
                raise SchemaError(f"rule references {var!r}, not in history columns {list(frame.columns)}")
            score = score + float(coef) * np.asarray(frame[var], dtype=float)
        out = np.where(score > 0, canonical_label(self.action_if_positive), canonical_label(self.action_else))
        return out.astype(object)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "coefficients": dict(self.coefficients),
            "intercept": float(self.intercept),
            "action_if_positive": self.action_if_positive,
            "action_else": self.action_else,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LinearThresholdRule":
        return cls(
            coefficients=dict(obj["coefficients"]),
            intercept=float(obj["intercept"]),
            action_if_positive=obj["action_if_positive"],
            action_else=obj["action_else"],
        )


@register_rule
@dataclass(frozen=True)
class TableRule(Rule):
    """Look up the action by the (stringified) values of ``variables``."""

    variables: tuple[str, ...]
    mapping: dict  # stratum tuple (stringified) -> action label
    kind = "table"

    def actions(self, frame: pd.DataFrame) -> np.ndarray:
        for v in self.variables:
            if v not in frame.columns:
                raise SchemaError(f"rule references {v!r}, not in history columns {list(frame.columns)}")
        strata = zip(*[[canonical_label(x) for x in frame[v]] for v in self.variables])
        out = np.empty(len(frame), dtype=object)
        for r, s in enumerate(strata):
            if s not in self.mapping:
                raise DomainError(f"no action mapped for stratum {s!r} of {self.variables}")
            out[r] = canonical_label(self.mapping[s])
        return out

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "variables": list(self.variables),
            "mapping": [{"stratum": list(k), "action": v} for k, v in self.mapping.items()],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TableRule":
        mapping = {tuple(e["stratum"]): e["action"] for e in obj["mapping"]}
        return cls(variables=tuple(obj["variables"]), mapping=mapping)


@dataclass(frozen=True)
class CallableRule(Rule):
    """Arbitrary vectorized rule ``frame -> labels`` (library-only, not serializable)."""

    fn: object
    kind = "callable"

    def actions(self, frame: pd.DataFrame) -> np.ndarray:
        out = np.asarray(self.fn(frame), dtype=object)
        return np.array([canonical_label(v) for v in out], dtype=object)


@dataclass(frozen=True)
class Policy:
    """Per-stage decision rules over a declared history kind."""

    rules: tuple[Rule, ...]
    history: str = "state"
    name: str = "policy"

    def __post_init__(self):
        if self.history not in ("state", "full"):
            raise ConfigError(f"history must be 'state' or 'full', got {self.history!r}")
        if not self.rules:
            raise ConfigError("a policy needs at least one rule")

    def rule_for_stage(self, stage: int) -> Rule:
        if len(self.rules) == 1:
            return self.rules[0]
        if stage > len(self.rules):
            raise ConfigError(f"policy has {len(self.rules)} rules but stage {stage} was requested")
        return self.rules[stage - 1]

    def covers(self, k_max: int) -> bool:
        return len(self.rules) in (1, k_max)


def static_policy(action: str, name: str | None = None) -> Policy:
    label = canonical_label(action)
    return Policy(rules=(StaticRule(label),), name=name or f"A={label}")


def policy_actions_matrix(policy: Policy, pd_: PolicyData, validate: bool = True) -> np.ndarray:
    """(n, K) matrix of recommended actions; degenerate rows get the default action."""
    if not policy.covers(pd_.max_stages):
        raise ConfigError(
            f"policy has {len(policy.rules)} rules but the data has {pd_.max_stages} stages"
        )
    out = np.full((pd_.n, pd_.max_stages), "", dtype=object)
    for k in range(1, pd_.max_stages + 1):
        rows = pd_.observed[:, k - 1]
        if rows.any():
            hist = pd_.get_history(stage=k, kind=policy.history)
            acts = policy.rule_for_stage(k).actions(hist.frame())
            if len(acts) != int(rows.sum()):
                raise ConfigError("rule returned a wrong number of actions")
            if validate:
                allowed = set(pd_.stage_action_sets[k - 1])
                bad = sorted(set(acts) - allowed)
                if bad:
                    raise DomainError(
                        f"policy recommends action(s) {bad} at stage {k}, outside {sorted(allowed)}"
                    )
            out[np.where(rows)[0], k - 1] = acts
        deg = pd_.present[:, k - 1] & ~pd_.observed[:, k - 1]
        if deg.any():
            out[np.where(deg)[0], k - 1] = pd_.augment_default
    return out


def apply_policy(policy: Policy, pd_: PolicyData) -> pd.DataFrame:
    """Actions keyed by (id, stage) for every stage record in the data."""
    mat = policy_actions_matrix(policy, pd_)
    ids, stages, acts = [], [], []
    for i in range(pd_.n):
        for k in range(pd_.max_stages):
            if pd_.present[i, k]:
                ids.append(pd_.ids[i])
                stages.append(k + 1)
                acts.append(mat[i, k])
    return pd.DataFrame({"id": ids, "stage": stages, "d": acts})


# ---------------------------------------------------------------------------
# Realistic actions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RealisticActionSet:
    """Per (subject, stage) subset of actions with propensity above ``alpha``."""

    alpha: float
    allowed: np.ndarray  # (n, K, |A|) bool
    action_set: tuple[str, ...]
    ids: tuple[str, ...] = field(default=())

    def allowed_labels(self, i: int, stage: int) -> tuple[str, ...]:
        mask = self.allowed[i, stage - 1]
        return tuple(a for a, ok in zip(self.action_set, mask) if ok)


def check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 <= alpha < 0.5:
        raise InvalidValueError(f"alpha must lie in [0, 0.5), got {alpha}")
    return alpha


def realistic_set(g_probs: np.ndarray, alpha: float, pd_: PolicyData) -> RealisticActionSet:
    """Threshold action probabilities at ``alpha``; errors on an empty allowed set."""
    alpha = check_alpha(alpha)
    allowed = g_probs > alpha
    for k in range(pd_.max_stages):
        rows = np.where(pd_.present[:, k])[0]
        empty = rows[~allowed[rows, k].any(axis=1)]
        if empty.size:
            raise PositivityError(
                f"no realistic action at alpha={alpha} for id {pd_.ids[empty[0]]!r}, stage {k + 1}"
            )
    return RealisticActionSet(alpha=alpha, allowed=allowed, action_set=pd_.action_set, ids=tuple(pd_.ids))


def overrule_unrealistic(actions: np.ndarray, ras: RealisticActionSet, pd_: PolicyData) -> np.ndarray:
    """Replace recommended actions outside the allowed set by the alternative (binary sets only)."""
    out = actions.copy()
    col_of = {a: j for j, a in enumerate(ras.action_set)}
    for k in range(pd_.max_stages):
        pair = pd_.stage_action_sets[k]
        rows = np.where(pd_.observed[:, k])[0]
        if rows.size == 0:
            continue
        if len(pair) != 2:
            raise ConfigError(
                f"the unrealistic-action overrule is only defined for binary action sets; stage {k + 1} has {len(pair)}"
            )
        rec = out[rows, k]
        rec_cols = np.array([col_of[a] for a in rec])
        ok = ras.allowed[rows, k, rec_cols]
        other = np.where(rec == pair[0], pair[1], pair[0])
        out[rows, k] = np.where(ok, rec, other)
    return out


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def serialize_policy(policy: Policy) -> bytes:
    obj = {
        "format": POLICY_FORMAT,
        "version": POLICY_VERSION,
        "name": policy.name,
        "history": policy.history,
        "rules": [r.to_json() for r in policy.rules],
    }
    return json.dumps(obj, indent=2).encode()


def deserialize_policy(blob: bytes | str | dict) -> Policy:
    if isinstance(blob, (bytes, str)):
        try:
            obj = json.loads(blob)
        except json.JSONDecodeError as e:
            raise FormatError(f"not valid policy JSON: {e}") from e
    else:
        obj = blob
    if obj.get("format") != POLICY_FORMAT:
        raise FormatError(f"unknown policy format {obj.get('format')!r}")
    if obj.get("version") != POLICY_VERSION:
        raise FormatError(f"unsupported policy version {obj.get('version')!r}")
    rules = []
    for r in obj["rules"]:
        cls = RULE_REGISTRY.get(r.get("kind"))
        if cls is None:
            raise FormatError(f"unknown rule kind {r.get('kind')!r}")
        rules.append(cls.from_json(r))
    return Policy(rules=tuple(rules), history=obj.get("history", "state"), name=obj.get("name", "policy"))
