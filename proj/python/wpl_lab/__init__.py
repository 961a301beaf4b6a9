"""Python front end for the wpl-lab experiments.

Configs are plain dicts with the same schema as the JSON files accepted by the
``wpl-lab`` command line tool.
"""

import json

from . import _core
from ._core import ConfigError, Error, closed_form_log_a, make_synthetic, median, schur_omega

__all__ = [
    "ConfigError",
    "Error",
    "closed_form_log_a",
    "make_synthetic",
    "median",
    "normalize_config",
    "run",
    "schur_omega",
    "verify_laplace",
]


def normalize_config(config):
    """Returns ``config`` with every default filled in."""
    return json.loads(_core.normalize_config(json.dumps(config)))


def run(config):
    """Runs a configured command. Returns ``(exit_status, log_text)``."""
    return _core.run(json.dumps(config))


def verify_laplace(seed=0, quadratic_models=24, thetas_per_model=5, identity_cases=100):
    """Checks the closed-form marginal against grid integration; returns the report dict."""
    return json.loads(_core.verify_laplace(seed, quadratic_models, thetas_per_model, identity_cases))
