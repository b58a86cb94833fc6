"""Run configuration: JSON schema, preset lookup and conversion into the
library's config objects."""

import json
from importlib import resources
from pathlib import Path

import jsonschema

from .datagen import AmplitudeLaw, InitSpec, tau_over_log_m
from .encoder import EncoderConfig, LambdaSchedule
from .trainer import NORMALIZATIONS, TRAIN_GRAD_KINDS, Optimizer, TrainConfig

PRESETS = ("fig2", "fig3", "fig4a", "fig4b", "fig4c", "fig7")

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_INT1 = {"type": "integer", "minimum": 1}
_INT0 = {"type": "integer", "minimum": 0}


def _obj(props, required=()):
    return {"type": "object", "additionalProperties": False,
            "properties": props, "required": list(required)}


_AMPLITUDE = _obj({"law": {"enum": ["uniform", "gaussian"]}, "low": _NONNEG, "high": _NONNEG})
_PROBLEM = _obj({"m": _INT1, "p": _INT1, "n": _INT1, "s": _INT1, "amplitude": _AMPLITUDE,
                 "snr_db": {"type": ["number", "null"]}}, ["m", "p", "n", "s"])
_INIT = {
    "oneOf": [
        _obj({"tau_b": _NONNEG, "seed": _INT0}, ["tau_b"]),
        _obj({"tau_log_m": _NONNEG, "seed": _INT0}, ["tau_log_m"]),
    ]
}
_SCHEDULE = _obj({"kind": {"enum": ["fixed", "geometric", "oracle"]}, "lam": _NONNEG,
                  "nu": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                  "a_gamma": _NONNEG, "mu": _NONNEG, "lam0": _NONNEG}, ["kind"])
_ENCODER = _obj({"T": _INT0, "alpha": _POS, "prox": {"enum": ["soft", "hard"]},
                 "schedule": _SCHEDULE}, ["T", "alpha"])
_OPTIMIZER = _obj({"kind": {"enum": ["gd", "adam"]}, "beta1": _NONNEG, "beta2": _NONNEG,
                   "eps": _POS}, ["kind"])
_RUN_PROPS = {
    "grad_kind": {"enum": list(TRAIN_GRAD_KINDS)},
    "eta": _POS, "epochs": _INT1, "batch_size": _INT0, "optimizer": _OPTIMIZER,
    "normalization": {"enum": list(NORMALIZATIONS)},
    "decay_nu_step": {"type": "array", "prefixItems": [_POS, _INT1], "minItems": 2, "maxItems": 2},
    "ridge": _NONNEG, "T": _INT0, "lam": _NONNEG, "tol": _POS,
    "b_grid": {"type": "array", "items": _NONNEG, "minItems": 1},
    "schedule": _SCHEDULE,
}
_RUN = _obj(dict(_RUN_PROPS, name={"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"}),
            ["name"])
_TRAIN = _obj({"common": _obj(_RUN_PROPS), "runs": {"type": "array", "items": _RUN, "minItems": 1}},
              ["runs"])

_VALIDATOR = {
    "oneOf": [
        _obj({"kind": {"const": "code_convergence"}, "min_fraction": _NONNEG, "min_r2": _NONNEG,
              "tol": _POS}, ["kind"]),
        _obj({"kind": {"const": "gradient_errors"},
              "kinds": {"type": "array", "items": {"enum": ["dec", "ae-lasso", "ae-ls"]},
                        "minItems": 1},
              "assertions": {"type": "array", "items": {"enum": [
                  "ae_lasso_beats_dec_local", "ae_ls_plateau_local",
                  "ae_ls_beats_ae_lasso_global", "global_errors_positive"]}},
              "plateau_ratio": _POS, "plateau_level": _POS, "tol": _POS}, ["kind"]),
        _obj({"kind": {"const": "support_recovery"},
              "lambda0_factors": {"type": "array", "items": _POS, "minItems": 1},
              "alpha": _POS, "min_rate": _NONNEG}, ["kind"]),
        _obj({"kind": {"const": "support_preservation"}, "min_rate": _NONNEG}, ["kind"]),
        _obj({"kind": {"const": "jacobian"}, "sample": _INT0, "max_error": _POS,
              "by_t": _INT1, "min_r2": _NONNEG}, ["kind"]),
        _obj({"kind": {"const": "amplitude_bias"},
              "lams": {"type": "array", "items": _NONNEG, "minItems": 1},
              "tol": _POS}, ["kind"]),
    ]
}
_THEORY = _obj({"dictionary": {"type": "string"},
                "validators": {"type": "array", "items": _VALIDATOR, "minItems": 1}},
               ["validators"])
_INTERPRET = _obj({"dictionary": {"type": "string"}, "omega": _POS, "n_test": _INT0,
                   "max_train": _INT1, "top_k": _INT1,
                   "atoms": {"type": "array", "items": _INT0},
                   "ridge_fit": {"type": "boolean"},
                   "normalize_beta": {"type": "boolean"},
                   "max_stationarity": _POS})
_ENCODE = _obj({"dictionary": {"type": "string"}, "trajectory_sample": _INT0})
_BUDGET = _obj({"max_mp": _INT1, "max_jacobian": _INT1, "max_representer_n": _INT1})

SCHEMA = _obj({
    "description": {"type": "string"},
    "seed": _INT0,
    "output_dir": {"type": "string"},
    "input_dir": {"type": "string"},
    "budget": _BUDGET,
    "problem": _PROBLEM,
    "init": _INIT,
    "encoder": _ENCODER,
    "encode": _ENCODE,
    "train": _TRAIN,
    "theory": _THEORY,
    "interpret": _INTERPRET,
})

DEFAULT_BUDGET = {"max_mp": 1_000_000, "max_jacobian": 10_000_000, "max_representer_n": 10_000}


_VALIDATOR_CLS = jsonschema.Draft202012Validator
_VALIDATOR_CLS.check_schema(SCHEMA)


class ConfigError(ValueError):
    pass


def validate(cfg):
    try:
        _VALIDATOR_CLS(SCHEMA).validate(cfg)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    return cfg


def preset_names():
    return sorted(p.name[:-5] for p in resources.files("pudle.presets").iterdir()
                  if p.name.endswith(".json"))


def load_config(ref):
    """Load a config from a file path or a bundled preset name, then validate it."""
    path = Path(ref)
    if path.is_file():
        text = path.read_text()
    else:
        res = resources.files("pudle.presets") / f"{ref}.json"
        if not res.is_file():
            raise ConfigError(f"no config file or preset named {ref!r}; presets: {preset_names()}")
        text = res.read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {ref!r} is not valid JSON: {exc}") from None
    return validate(cfg)


# --------------------------------------------------------------------------
# conversion


def amplitude_law(problem_cfg):
    a = problem_cfg.get("amplitude", {})
    return AmplitudeLaw(a.get("law", "uniform"), a.get("low", 1.0), a.get("high", 2.0))


def init_spec(init_cfg, m, seed):
    s = init_cfg.get("seed", seed)
    if "tau_b" in init_cfg:
        return InitSpec(init_cfg["tau_b"], s)
    return InitSpec(tau_over_log_m(init_cfg["tau_log_m"], m), s)


def schedule(cfg):
    return LambdaSchedule(cfg["kind"], lam=cfg.get("lam", 0.0), nu=cfg.get("nu", 1.0),
                          a_gamma=cfg.get("a_gamma", 0.0), mu=cfg.get("mu"),
                          lam0=cfg.get("lam0"))


def encoder_config(cfg):
    sched = schedule(cfg.get("schedule", {"kind": "fixed", "lam": 0.0}))
    return EncoderConfig(cfg["T"], cfg["alpha"], cfg.get("prox", "soft"), sched)


def optimizer(cfg):
    return Optimizer(cfg["kind"], cfg.get("beta1", 0.9), cfg.get("beta2", 0.999),
                     cfg.get("eps", 1e-8))


def train_runs(train_cfg):
    """Merged ``(name, settings)`` pairs, one per configured run."""
    common = train_cfg.get("common", {})
    return [(r["name"], {**common, **{k: v for k, v in r.items() if k != "name"}})
            for r in train_cfg["runs"]]


def train_config(run, seed):
    opt = optimizer(run["optimizer"]) if "optimizer" in run else Optimizer()
    step = tuple(run["decay_nu_step"]) if "decay_nu_step" in run else None
    return TrainConfig(grad_kind=run.get("grad_kind", "ae-ls"), eta=run.get("eta", 1e-3),
                       epochs=run.get("epochs", 1), batch_size=run.get("batch_size", 0),
                       optimizer=opt, normalization=run.get("normalization", "project-unit-ball"),
                       decay_nu_step=step, ridge=run.get("ridge", 0.0), seed=seed)
