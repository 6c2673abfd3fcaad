"""YAML run configuration: ``model``, ``design`` and ``experiment`` sections."""

from __future__ import annotations

import math
from fractions import Fraction

import yaml

from .dgp import design_from_dict
from .mc import EstimatorSpec, ExperimentConfig
from .model import ModelError, bus_model

ESTIMATOR_NAMES = {
    "ml": EstimatorSpec("ml"),
    "md-identity": EstimatorSpec("md", "identity"),
    "md-w_av": EstimatorSpec("md", "w_av"),
}


class ConfigError(ValueError):
    """The configuration file is unreadable or invalid."""


def parse_number(value, what):
    """Accept numbers, ``"1/3"``-style fractions and ``"inf"``."""
    if isinstance(value, bool):
        raise ConfigError(f"{what}: expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        text = value.strip()
        if text.lower() in ("inf", "infinity"):
            return math.inf
        try:
            return float(Fraction(text))
        except (ValueError, ZeroDivisionError):
            pass
    raise ConfigError(f"{what}: expected a number, got {value!r}")


def _section(doc, key, required=True):
    value = doc.get(key)
    if value is None:
        if required:
            raise ConfigError(f"missing section {key!r}")
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"section {key!r} must be a mapping")
    return value


def load_document(path):
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: YAML parse error: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


MODEL_KEYS = {"kind", "n_states", "beta", "alpha_bound", "mileage_origin", "alpha", "theta_f"}


def model_settings(doc):
    sec = _section(doc, "model")
    unknown = set(sec) - MODEL_KEYS
    if unknown:
        raise ConfigError(f"model: unknown keys {sorted(unknown)}")
    if sec.get("kind", "bus") != "bus":
        raise ConfigError("model: only kind 'bus' is supported in configuration files")
    try:
        out = {
            "n_states": int(sec.get("n_states", 20)),
            "beta": parse_number(sec.get("beta", 0.9999), "model.beta"),
            "alpha_bound": parse_number(sec.get("alpha_bound", 10.0), "model.alpha_bound"),
            "mileage_origin": parse_number(sec.get("mileage_origin", 1.0), "model.mileage_origin"),
            "alpha": [parse_number(v, "model.alpha") for v in sec.get("alpha", [1.0, 0.05])],
            "theta_f": [parse_number(v, "model.theta_f") for v in sec.get("theta_f", [0.25])],
        }
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from None
    return out


def build_model(settings):
    try:
        return bus_model(
            settings["n_states"], settings["beta"], settings["alpha_bound"],
            settings["mileage_origin"],
        )
    except ModelError as exc:
        raise ConfigError(f"model: {exc}") from None


def load_model(path):
    """``(model, alpha, theta_f)`` from a configuration file."""
    settings = model_settings(load_document(path))
    return build_model(settings), settings["alpha"], settings["theta_f"]


def parse_design(doc):
    sec = dict(_section(doc, "design"))
    for key in ("delta", "scale", "theta_f_true"):
        if key in sec:
            sec[key] = parse_number(sec[key], f"design.{key}")
    try:
        return design_from_dict(sec)
    except ModelError as exc:
        raise ConfigError(f"design: {exc}") from None


EXPERIMENT_KEYS = {
    "deltas", "sample_sizes", "K_values", "estimators", "replications",
    "full_scale_replications", "base_seed", "extra_scalings", "coord_names",
}


def load_experiment(path, full_scale=False, replications=None):
    """Build an :class:`ExperimentConfig` from a configuration file."""
    doc = load_document(path)
    model = model_settings(doc)
    build_model(model)  # validates the model section
    design = parse_design(doc)
    sec = _section(doc, "experiment")
    unknown = set(sec) - EXPERIMENT_KEYS
    if unknown:
        raise ConfigError(f"experiment: unknown keys {sorted(unknown)}")
    try:
        names = sec.get("estimators", list(ESTIMATOR_NAMES))
        estimators = tuple(ESTIMATOR_NAMES[n] for n in names)
    except KeyError as exc:
        raise ConfigError(
            f"experiment.estimators: unknown estimator {exc}; choose from {sorted(ESTIMATOR_NAMES)}"
        ) from None
    try:
        kwargs = _experiment_kwargs(sec, full_scale, replications)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"experiment: {exc}") from None
    kwargs.update(
        design=design,
        estimators=estimators,
        n_states=model["n_states"],
        beta=model["beta"],
        alpha_bound=model["alpha_bound"],
        mileage_origin=model["mileage_origin"],
        name=str(doc.get("name", "experiment")),
    )
    if "deltas" not in sec:
        kwargs["deltas"] = (design.delta,)
    try:
        return ExperimentConfig(**kwargs)
    except (ValueError, RuntimeError) as exc:
        raise ConfigError(f"experiment: {exc}") from None


def _experiment_kwargs(sec, full_scale, replications):
    S = int(sec.get("replications", 2000))
    if full_scale:
        S = int(sec.get("full_scale_replications", 20000))
    if replications is not None:
        S = int(replications)
    kwargs = dict(
        deltas=tuple(parse_number(d, "experiment.deltas") for d in sec.get("deltas", [])),
        sample_sizes=tuple(int(n) for n in sec.get("sample_sizes", [200, 500, 1000])),
        K_values=tuple(int(k) for k in sec.get("K_values", [1, 2, 3, 10])),
        replications=S,
        base_seed=int(sec.get("base_seed", 20240917)),
        extra_scalings=tuple(
            parse_number(r, "experiment.extra_scalings") for r in sec.get("extra_scalings", [])
        ),
    )
    if "coord_names" in sec:
        kwargs["coord_names"] = tuple(str(c) for c in sec["coord_names"])
    return kwargs
