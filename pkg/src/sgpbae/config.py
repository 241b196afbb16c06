"""Flat ``key=value`` run configuration with validated, dotted keys."""

import math
from dataclasses import dataclass

from . import autoencoder as ae
from .errors import ConfigError
from .kernels import KernelKind
from .sghmc import SghmcConfig


def _int_list(text):
    text = text.strip()
    if not text:
        return ()
    return tuple(int(t) for t in text.split(","))


def _str_list(text):
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _widths(v):
    return all(w > 0 for w in v)


# key -> (parser, check, default, description of the valid range)
SCHEMA = {
    "model": (str, lambda v: v in ae.MODEL_KINDS, "sgp-bae", "one of " + ", ".join(ae.MODEL_KINDS)),
    "kernel": (str, lambda v: v in ("rbf_ard", "periodic_1d"), "rbf_ard", "rbf_ard or periodic_1d"),
    "kernel.period": (float, _positive, 2.0 * math.pi, "> 0"),
    "latent_dim": (int, _positive, 2, ">= 1"),
    "n_inducing": (int, _positive, 10, ">= 1"),
    "batch_size": (int, _non_negative, 0, ">= 0 (0 = full batch)"),
    "encoder_hidden": (_int_list, _widths, (64,), "comma-separated positive widths"),
    "decoder_hidden": (_int_list, _widths, (64,), "comma-separated positive widths"),
    "deep_hidden": (_int_list, _widths, (2, 2), "comma-separated positive widths"),
    "activation": (str, lambda v: v in ae.ACTIVATIONS, "tanh", "tanh, relu or elu"),
    "beta": (float, _positive, 100.0, "> 0"),
    "noise_var": (float, _positive, 0.01, "> 0"),
    "decoder_prior_var": (float, _positive, 1.0, "> 0"),
    "K": (int, _positive, 50, ">= 1"),
    "J": (int, _non_negative, 30, ">= 0"),
    "sghmc.step_size": (float, _positive, 0.005, "> 0"),
    "sghmc.momentum": (float, lambda v: 0 < v < 1, 0.05, "in (0, 1)"),
    "sghmc.n_burn_in": (int, _non_negative, 1500, ">= 0"),
    "sghmc.n_samples": (int, _non_negative, 100, ">= 0"),
    "sghmc.thinning": (int, _positive, 400, ">= 1"),
    "sghmc.window_offset": (float, _non_negative, 1.0, ">= 0"),
    "sghmc.adapt_steps": (int, _non_negative, 0, ">= 0 (0 = adapt during all of burn-in)"),
    "adam.lr": (float, _positive, 0.001, "> 0"),
    "seed": (int, _non_negative, 0, ">= 0"),
    "chains": (int, _positive, 1, ">= 1"),
    "data.path": (str, lambda v: True, "", "path"),
    "data.aux_columns": (_str_list, lambda v: len(v) > 0, ("x0",), "comma-separated column names"),
    "data.group_column": (str, lambda v: True, "", "column name or empty"),
    "data.missing_token": (str, lambda v: True, "NaN", "token"),
}


def _format(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def to_text(self):
        """Canonical echo: every key, sorted, one per line."""
        return "".join(f"{k}={_format(self.values[k])}\n" for k in sorted(self.values))

    def model_config(self):
        v = self.values
        return ae.ModelConfig(
            kind=v["model"], latent_dim=v["latent_dim"], encoder_hidden=v["encoder_hidden"],
            decoder_hidden=v["decoder_hidden"], activation=v["activation"], beta=v["beta"],
            decoder_prior_var=v["decoder_prior_var"],
            kernel=KernelKind(v["kernel"], v["kernel.period"]), n_inducing=v["n_inducing"],
            noise_var=v["noise_var"], deep_hidden=v["deep_hidden"],
            batch_size=v["batch_size"] or None, K=v["K"], J=v["J"])

    def sghmc_config(self):
        v = self.values
        return SghmcConfig(step_size=v["sghmc.step_size"], momentum_decay=v["sghmc.momentum"],
                           n_burn_in=v["sghmc.n_burn_in"], n_samples=v["sghmc.n_samples"],
                           thinning=v["sghmc.thinning"], window_offset=v["sghmc.window_offset"],
                           adapt_steps=v["sghmc.adapt_steps"] or None)

    def adam_config(self):
        return ae.AdamConfig(lr=self.values["adam.lr"])


def parse_config(text, overrides=None):
    """Parse ``key=value`` lines (``#`` starts a comment) into a :class:`RunConfig`."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key] = value
    raw.update(overrides or {})
    values = {k: spec[2] for k, spec in SCHEMA.items()}
    for key, text_value in raw.items():
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        parse, check, _, expect = SCHEMA[key]
        try:
            value = parse(str(text_value))
        except ValueError:
            raise ConfigError(key, f"cannot parse {text_value!r}; expected {expect}") from None
        if not check(value):
            raise ConfigError(key, f"value {text_value!r} out of range; expected {expect}")
        values[key] = value
    return RunConfig(values)


def load_config(path, overrides=None):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), overrides)


MOVING_BALL_PRESET = """\
# moving-ball settings at full scale
model = sgp-bae
kernel = rbf_ard
latent_dim = 2
n_inducing = 10
batch_size = 0
encoder_hidden = 500
decoder_hidden = 500
activation = tanh
sghmc.step_size = 0.005
sghmc.momentum = 0.05
sghmc.n_burn_in = 1500
sghmc.n_samples = 100
sghmc.thinning = 400
K = 50
J = 30
data.aux_columns = t
data.group_column = video
"""
