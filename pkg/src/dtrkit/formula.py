"""Minimal model-formula grammar and design-matrix construction.

The grammar is a deliberate subset of the usual statistical-formula notation:

    formula   := "~" expr
    expr      := term (("+" | "-") term)*
    term      := factor (("*" | ":") factor)*
    factor    := NAME | "." | "1" | "0"

``a*b`` expands to main effects plus the interaction, ``a:b`` is the bare
interaction, ``.`` stands for every column of the target schema (``~A*.``
interacts ``A`` with each column), ``-term`` removes a term and ``-1``/``0``
drop the intercept.  There are no nested function calls; engineered features
must be precomputed as columns.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import DomainError, SchemaError, DtrkitError

__all__ = [
    "FormulaSyntaxError",
    "DesignSpec",
    "DesignMatrix",
    "parse_formula",
    "build_design",
]

# A term is a tuple of variable names; () is the intercept.
Term = tuple[str, ...]

_DOT: Term = (".",)

_TOKEN_RE = re.compile(r"\s*(?:(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[~+\-*:.01]))")


class FormulaSyntaxError(DtrkitError):
    """Raised on malformed formula text; carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            stripped = text[pos:].lstrip()
            if not stripped:
                break
            raise FormulaSyntaxError(f"unknown token {stripped[0]!r}", len(text) - len(stripped))
        if m.group("name"):
            tokens.append(("name", m.group("name"), m.start("name")))
        else:
            tokens.append(("op", m.group("op"), m.start("op")))
        pos = m.end()
    return tokens


@dataclass(frozen=True)
class DesignSpec:
    """Parsed formula: an ordered, de-duplicated list of terms.

    ``terms`` may contain the placeholder ``(".",)`` until :meth:`resolve` is
    called with a concrete schema; ``removed`` holds removals that must be
    re-applied after the placeholder expands.
    """

    terms: tuple[Term, ...]
    removed: tuple[Term, ...] = ()
    source_text: str = ""

    @property
    def resolved(self) -> bool:
        return not any("." in t for t in self.terms)

    def resolve(self, schema: list[str] | tuple[str, ...]) -> "DesignSpec":
        """Expand ``.`` against ``schema`` and apply pending removals."""
        if self.resolved and not self.removed:
            return self
        out: list[Term] = []
        seen: set[frozenset] = set()
        for t in self.terms:
            if "." in t:
                expansion = [
                    tuple(name if v == "." else v for v in t) for name in schema if name not in t
                ]
            else:
                expansion = [t]
            for e in expansion:
                key = frozenset(e) if e else frozenset({"(Intercept)"})
                if key not in seen:
                    seen.add(key)
                    out.append(e)
        removed_keys = {frozenset(t) if t else frozenset({"(Intercept)"}) for t in self.removed}
        out = [t for t in out if (frozenset(t) if t else frozenset({"(Intercept)"})) not in removed_keys]
        return DesignSpec(terms=tuple(out), removed=(), source_text=self.source_text)

    def variables(self) -> tuple[str, ...]:
        names: list[str] = []
        for t in self.terms:
            for v in t:
                if v != "." and v not in names:
                    names.append(v)
        return tuple(names)

    def canonical_text(self) -> str:
        parts = [":".join(t) for t in self.terms if t != ()]
        has_intercept = () in self.terms
        if has_intercept:
            text = "~" + (" + ".join(parts) if parts else "1")
        else:
            text = "~" + (" + ".join(parts) + " - 1" if parts else "0")
        for t in self.removed:
            text += " - " + (":".join(t) if t else "1")
        return text

    def __str__(self) -> str:  # pragma: no cover - convenience
        return self.canonical_text()


def _cross(a: list[Term], b: list[Term]) -> list[Term]:
    out = []
    for x in a:
        for y in b:
            merged = list(x)
            for v in y:
                if v not in merged:
                    merged.append(v)
            out.append(tuple(merged))
    return out


def _parse_term(tokens: list[tuple[str, str, int]], i: int) -> tuple[list[Term], bool, int]:
    """Parse one +/- separated term expression.

    Returns (term list, drops_intercept, next index).  A bare ``0`` yields an
    empty term list with drops_intercept set.
    """

    def factor(j: int) -> tuple[list[Term], int]:
        if j >= len(tokens):
            raise FormulaSyntaxError("expected a variable", tokens[-1][2] + 1 if tokens else 0)
        kind, value, off = tokens[j]
        if kind == "name":
            return [(value,)], j + 1
        if value == ".":
            return [_DOT], j + 1
        if value == "1":
            return [()], j + 1
        raise FormulaSyntaxError(f"unexpected {value!r}", off)

    kind, value, off = tokens[i]
    if kind == "op" and value == "0":
        return [], True, i + 1

    terms, i = factor(i)
    while i < len(tokens) and tokens[i][0] == "op" and tokens[i][1] in "*:":
        op = tokens[i][1]
        rhs, i = factor(i + 1)
        terms = terms + rhs + _cross(terms, rhs) if op == "*" else _cross(terms, rhs)
    return terms, False, i


def parse_formula(text: str, schema: list[str] | tuple[str, ...] | None = None) -> DesignSpec:
    """Parse formula ``text`` into a :class:`DesignSpec`.

    When ``schema`` is supplied, ``.`` is expanded immediately and the returned
    spec is fully resolved.
    """
    tokens = _tokenize(text)
    if not tokens or tokens[0] != ("op", "~", tokens[0][2]):
        raise FormulaSyntaxError("formula must start with '~'", 0)
    if len(tokens) == 1:
        raise FormulaSyntaxError("empty formula", len(text))

    # first pass: collect signed term groups
    groups: list[tuple[str, list[Term], bool]] = []
    i, sign = 1, "+"
    while i < len(tokens):
        terms, drops_intercept, i = _parse_term(tokens, i)
        groups.append((sign, terms, drops_intercept))
        if i < len(tokens):
            kind, value, off = tokens[i]
            if kind != "op" or value not in "+-":
                raise FormulaSyntaxError(f"expected '+' or '-', got {value!r}", off)
            sign = value
            i += 1
            if i >= len(tokens):
                raise FormulaSyntaxError("dangling operator", off)

    has_dot = any("." in t for _, terms, _ in groups for t in terms)

    added: list[Term] = [()]  # implicit intercept
    seen: set[frozenset] = {frozenset({"(Intercept)"})}
    removed: list[Term] = []
    intercept = True
    for sign, terms, drops_intercept in groups:
        if drops_intercept:
            intercept = False
            continue
        for t in terms:
            if sign == "+":
                if t == ():
                    intercept = True
                    continue
                key = frozenset(t)
                if key not in seen:
                    seen.add(key)
                    added.append(t)
                if t in removed:
                    removed.remove(t)
            else:
                if t == ():
                    intercept = False
                    continue
                key = frozenset(t)
                if key in seen:
                    seen.discard(key)
                    added = [x for x in added if x == () or frozenset(x) != key]
                if has_dot and "." not in t and t not in removed:
                    removed.append(t)

    if not intercept:
        added = [t for t in added if t != ()]
    spec = DesignSpec(terms=tuple(added), removed=tuple(removed), source_text=text)
    if schema is not None:
        spec = spec.resolve(tuple(schema))
    return spec


# --------------------------------------------------------------------------
# Design matrices
# --------------------------------------------------------------------------

Coding = dict[str, tuple]


@dataclass(frozen=True)
class DesignMatrix:
    """Numeric model matrix with column names and the coding used to build it."""

    matrix: np.ndarray
    names: tuple[str, ...]
    coding: Coding = field(default_factory=dict)


def _is_categorical(col: pd.Series) -> bool:
    return not pd.api.types.is_numeric_dtype(col) or pd.api.types.is_bool_dtype(col)


def _column_coding(name: str, col: pd.Series) -> tuple:
    if _is_categorical(col):
        levels = sorted({str(v) for v in col.dropna()}, key=str)
        return ("categorical", tuple(levels))
    return ("numeric",)


def _expand_variable(
    name: str,
    values: pd.Series | np.ndarray,
    coding: tuple,
) -> tuple[list[np.ndarray], list[str]]:
    if coding[0] == "numeric":
        arr = np.asarray(values, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise SchemaError(f"variable {name!r} has missing/non-finite values in this history")
        return [arr], [name]
    levels = coding[1]
    vals = np.asarray([str(v) for v in np.asarray(values, dtype=object)])
    unseen = set(vals) - set(levels)
    if unseen:
        raise DomainError(f"variable {name!r} has level(s) {sorted(unseen)} not seen at fit time")
    cols = [(vals == lvl).astype(float) for lvl in levels[1:]]
    names = [f"{name}{lvl}" for lvl in levels[1:]]
    return cols, names


def build_design(
    spec: DesignSpec,
    frame: pd.DataFrame,
    action_labels: tuple[str, ...] | None = None,
    action_values: np.ndarray | None = None,
    coding: Coding | None = None,
) -> DesignMatrix:
    """Build the numeric design matrix for ``spec`` over ``frame``.

    When ``action_labels`` is given, a synthetic categorical variable named
    ``A`` (levels = ``action_labels`` in declared order) is available to the
    formula, with per-row values ``action_values``.  Passing the ``coding`` of
    a previously built design reuses its categorical level sets, which keeps
    fit-time and predict-time matrices structurally identical.
    """
    schema = [c for c in frame.columns if c not in ("id", "stage")]
    if action_labels is not None:
        if "A" in schema:
            raise SchemaError("history already has a column named 'A'; cannot add the action variable")
        schema = schema + ["A"]
    spec = spec.resolve(tuple(c for c in schema))

    n = len(frame)
    new_coding: Coding = {}
    for var in spec.variables():
        if var not in schema:
            raise SchemaError(f"variable {var!r} not found in history columns {sorted(schema)}")
        if coding is not None and var in coding:
            new_coding[var] = coding[var]
        elif var == "A" and action_labels is not None:
            new_coding[var] = ("categorical", tuple(str(a) for a in action_labels))
        else:
            new_coding[var] = _column_coding(var, frame[var])

    def var_values(var):
        if var == "A" and action_labels is not None and "A" not in frame.columns:
            if action_values is None:
                raise SchemaError("formula references the action variable but no action values were given")
            vals = np.asarray(action_values, dtype=object)
            if vals.ndim == 0:
                vals = np.repeat(vals, n)
            return vals
        return frame[var]

    columns: list[np.ndarray] = []
    names: list[str] = []
    for term in spec.terms:
        if term == ():
            columns.append(np.ones(n))
            names.append("(Intercept)")
            continue
        groups = [_expand_variable(v, var_values(v), new_coding[v]) for v in term]

        # cartesian product over each variable's expanded columns
        def rec(depth: int, prod: np.ndarray, label: list[str]):
            if depth == len(groups):
                columns.append(prod)
                names.append(":".join(label))
                return
            cols, lbls = groups[depth]
            for c, l in zip(cols, lbls):
                rec(depth + 1, prod * c, label + [l])

        rec(0, np.ones(n), [])

    matrix = np.column_stack(columns) if columns else np.empty((n, 0))
    return DesignMatrix(matrix=matrix, names=tuple(names), coding=new_coding)
