"""Command-line interface: simulate, evaluate, learn, apply.

Runs are driven by a JSON configuration file (validated against the shipped
schema) so that every experiment is a diffable record.  All randomness flows
from the single ``seed`` entry; internal streams are derived by labeled
splitting, so results do not depend on execution order or thread count.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical/fit error.
"""

from __future__ import annotations

import json
import sys
from importlib import resources

import click
import numpy as np
import pandas as pd

from . import learning  # noqa: F401  (registers learned rule kinds for deserialization)
from .data import PolicyData, ingest_long, ingest_wide
from .errors import (
    AlignmentError,
    ConfigError,
    DomainError,
    DtrkitError,
    DuplicateKeyError,
    FitError,
    FormatError,
    InvalidValueError,
    PositivityError,
    SchemaError,
    StageRangeError,
    StructureError,
)
from .evaluation import clustered_variance, conditional_value, policy_eval
from .formula import FormulaSyntaxError
from .learning import LEARNER_TYPES
from .nuisance import ModelSpec
from .policy import Policy, apply_policy, deserialize_policy, serialize_policy
from .rng import derive_seed
from .simulate import params_from_mapping, sim_single_stage, sim_two_stage

_CONFIG_ERRORS = (ConfigError, FormulaSyntaxError, StageRangeError)
_DATA_ERRORS = (
    SchemaError,
    DomainError,
    StructureError,
    DuplicateKeyError,
    InvalidValueError,
    AlignmentError,
    FormatError,
)
_NUMERIC_ERRORS = (FitError, PositivityError, np.linalg.LinAlgError, FloatingPointError)


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _CONFIG_ERRORS as e:
            _fail(2, str(e))
        except _DATA_ERRORS as e:
            _fail(3, str(e))
        except _NUMERIC_ERRORS as e:
            _fail(4, str(e))
        except DtrkitError as e:
            _fail(3, str(e))

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _load_config(path: str) -> dict:
    import jsonschema

    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    schema = json.loads(resources.files("dtrkit.schemas").joinpath("run_config.schema.json").read_text())
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: e.json_path)
    if errors:
        msgs = "; ".join(f"{e.json_path}: {e.message}" for e in errors[:5])
        raise ConfigError(f"config validation failed: {msgs}")
    return cfg


def _load_data(cfg: dict) -> PolicyData:
    d = cfg["data"]
    table = pd.read_csv(d["path"])
    if d["layout"] == "wide":
        for key in ("action_cols", "utility_cols"):
            if key not in d:
                raise ConfigError(f"data.{key} is required for the wide layout")
        covariates = {
            name: [c if c is not None else None for c in cols]
            for name, cols in d.get("covariates", {}).items()
        }
        pdat = ingest_wide(
            table,
            action_cols=d["action_cols"],
            covariate_map=covariates,
            utility_cols=d["utility_cols"],
            baseline_cols=d.get("baseline_cols", ()),
            action_set=tuple(d["action_set"]) if d.get("action_set") else None,
            id_col=d.get("id_col"),
        )
    else:
        baseline = pd.read_csv(d["baseline_path"]) if d.get("baseline_path") else None
        pdat = ingest_long(
            table,
            baseline,
            id_col=d.get("id_col") or "id",
            stage_col=d.get("stage_col", "stage"),
            event_col=d.get("event_col", "event"),
            action_col=d.get("action_col", "A"),
            reward_col=d.get("reward_col", "U"),
            covariate_cols=d.get("covariate_cols"),
            action_set=tuple(d["action_set"]) if d.get("action_set") else None,
        )
    if d.get("partial"):
        pdat = pdat.partial(int(d["partial"]))
    if d.get("augment_default") is not None:
        pdat = pdat.augment(d["augment_default"])
    return pdat


def _model_specs(obj):
    if obj is None:
        return None
    if isinstance(obj, dict):
        return ModelSpec.from_json(obj)
    return [ModelSpec.from_json(o) for o in obj]


def _build_learner(cfg: dict):
    spec = cfg["learner"]
    cls = LEARNER_TYPES[spec["type"]]
    kwargs = {}
    if "alpha" in spec:
        kwargs["alpha"] = spec["alpha"]
    if "history" in spec:
        kwargs["history"] = spec["history"]
    if spec["type"] == "ql":
        if "models" in spec:
            kwargs["q_models"] = spec["models"]
        if "folds" in spec and spec["folds"] != 1:
            raise ConfigError("ql does not cross-fit; use folds = 1")
    else:
        if "folds" in spec:
            kwargs["folds"] = spec["folds"]
        if "cross_fit_g" in spec:
            kwargs["cross_fit_g"] = spec["cross_fit_g"]
        if spec["type"] == "drql":
            kwargs["qv_models"] = spec.get("models")
        elif spec["type"] == "blip":
            kwargs["blip_models"] = spec.get("models")
        else:
            kwargs["policy_vars"] = spec.get("vars")
            if "depth" in spec:
                kwargs["depth"] = spec["depth"]
    kwargs["seed"] = derive_seed(int(cfg.get("seed", 0)), 0x1EA12)
    return cls(**kwargs)


def _load_policy_from_config(cfg: dict) -> Policy:
    if cfg.get("policy_path"):
        with open(cfg["policy_path"]) as fh:
            return deserialize_policy(fh.read())
    if cfg.get("policy"):
        return deserialize_policy(cfg["policy"])
    raise ConfigError("no policy given: set 'policy' (inline JSON) or 'policy_path'")


def _write_result_json(result, path: str | None):
    payload = result.to_json()
    text = json.dumps(payload, indent=2)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    click.echo(result.summary().to_string())


@click.group()
def main():
    """Evaluate and learn sequential decision policies from observational data."""


@main.command()
@click.option("--model", type=click.Choice(["single", "two"]), required=True)
@click.option("--n", type=int, required=True)
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("--par", default="", help="comma-separated key=value structural parameters")
@click.option("--out", type=click.Path(), required=True)
@_guarded
def simulate(model, n, seed, par, out):
    """Simulate a benchmark data set and write it as CSV."""
    mapping = {}
    if par:
        for item in par.split(","):
            if "=" not in item:
                raise ConfigError(f"bad --par entry {item!r}; expected key=value")
            k, v = item.split("=", 1)
            mapping[k.strip()] = v.strip()
    params = params_from_mapping(model, mapping)
    if n < 1:
        raise InvalidValueError("--n must be positive")
    if model == "single":
        _, table = sim_single_stage(n, seed, params)
    else:
        _, table = sim_two_stage(n, seed, params)
    table.to_csv(out, index=False)
    click.echo(f"wrote {len(table)} rows to {out}")


@main.command()
@click.option("--config", "config_path", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), default=None, help="result JSON path (overrides config)")
@click.option("--ic-out", type=click.Path(), default=None, help="influence-curve CSV export")
@click.option("--threads", type=int, default=1, show_default=True, help="accepted for pipeline compatibility; results are independent of thread count")
@_guarded
def evaluate(config_path, out, ic_out, threads):
    """Estimate the value of a policy or policy learner."""
    if threads < 1:
        raise ConfigError("--threads must be >= 1")
    cfg = _load_config(config_path)
    if cfg["task"] != "evaluate":
        raise ConfigError(f"config task is {cfg['task']!r}, expected 'evaluate'")
    has_policy = bool(cfg.get("policy") or cfg.get("policy_path"))
    has_learner = "learner" in cfg
    if has_policy == has_learner:
        raise ConfigError("evaluate needs exactly one of 'policy'/'policy_path' or 'learner'")
    pdat = _load_data(cfg)
    seed = int(cfg.get("seed", 0))
    result = policy_eval(
        pdat,
        policy=_load_policy_from_config(cfg) if has_policy else None,
        learner=_build_learner(cfg) if has_learner else None,
        estimator=cfg.get("estimator", "dr"),
        g_models=_model_specs(cfg.get("g_models")),
        q_models=_model_specs(cfg.get("q_models")),
        m=int(cfg.get("folds", 1)),
        seed=seed,
        name=cfg.get("name"),
    )
    if cfg.get("conditional_by"):
        result = conditional_value(result, pdat, cfg["conditional_by"])
    if cfg.get("cluster_col"):
        col = cfg["cluster_col"]
        if col not in pdat.baseline_names:
            raise ConfigError(f"cluster column {col!r} must be a baseline covariate")
        cluster_of = dict(zip(pdat.ids, pdat.baseline[col]))
        result = clustered_variance(result, cluster_of)
    out = out or cfg.get("output", {}).get("result")
    ic_out = ic_out or cfg.get("output", {}).get("ic")
    _write_result_json(result, out)
    if ic_out:
        result.ic_frame().to_csv(ic_out, index=False)


@main.command()
@click.option("--config", "config_path", type=click.Path(), required=True)
@click.option("--policy-out", type=click.Path(), default=None)
@click.option("--value-out", type=click.Path(), default=None, help="also cross-fit the learner value")
@click.option("--threads", type=int, default=1, show_default=True, help="accepted for pipeline compatibility; results are independent of thread count")
@_guarded
def learn(config_path, policy_out, value_out, threads):
    """Learn a policy and write it as JSON (optionally with its cross-fitted value)."""
    if threads < 1:
        raise ConfigError("--threads must be >= 1")
    cfg = _load_config(config_path)
    if cfg["task"] != "learn":
        raise ConfigError(f"config task is {cfg['task']!r}, expected 'learn'")
    if "learner" not in cfg:
        raise ConfigError("learn requires a 'learner' section")
    pdat = _load_data(cfg)
    learner = _build_learner(cfg)
    g_models = _model_specs(cfg.get("g_models"))
    q_models = _model_specs(cfg.get("q_models"))
    learner.fit(pdat, g_models=g_models, q_models=q_models)
    policy = learner.get_policy(cfg.get("name"))
    blob = serialize_policy(policy)
    policy_out = policy_out or cfg.get("output", {}).get("policy")
    if not policy_out:
        raise ConfigError("no policy output path: pass --policy-out or set output.policy")
    with open(policy_out, "wb") as fh:
        fh.write(blob)
    click.echo(f"wrote policy ({learner.learner_kind}, alpha={learner.alpha}) to {policy_out}")
    if value_out:
        result = policy_eval(
            pdat,
            learner=_build_learner(cfg),
            g_models=g_models,
            q_models=q_models,
            m=int(cfg.get("folds", 1)),
            seed=int(cfg.get("seed", 0)),
            name=cfg.get("name"),
        )
        _write_result_json(result, value_out)


@main.command("apply")
@click.option("--config", "config_path", type=click.Path(), required=True)
@click.option("--policy", "policy_path", type=click.Path(), default=None, help="policy JSON (overrides config)")
@click.option("--out", type=click.Path(), required=True)
@_guarded
def apply_cmd(config_path, policy_path, out):
    """Apply a policy file to a data set; writes (id, stage, d) CSV."""
    cfg = _load_config(config_path)
    if cfg["task"] != "apply":
        raise ConfigError(f"config task is {cfg['task']!r}, expected 'apply'")
    if policy_path:
        with open(policy_path) as fh:
            policy = deserialize_policy(fh.read())
    else:
        policy = _load_policy_from_config(cfg)
    pdat = _load_data(cfg)
    actions = apply_policy(policy, pdat)
    actions.to_csv(out, index=False)
    click.echo(f"wrote {len(actions)} actions to {out}")


if __name__ == "__main__":  # pragma: no cover
    main()
