"""Strict singular characteristics, Lax-Oleinik operators and weak KAM tools on flat tori."""

import logging

from .errors import (ConfigError, HorizonExceeded, HypothesisViolated, InsufficientSamples,
                     NoConvergence, NonConvergence, NotCauchy, NotWeakKam, PreconditionFailed,
                     SingCharError, SpeedBoundExceeded)

__version__ = "0.1.0"

logging.getLogger(__name__).addHandler(logging.NullHandler())

__all__ = [
    "ConfigError", "HorizonExceeded", "HypothesisViolated", "InsufficientSamples", "NoConvergence",
    "NonConvergence", "NotCauchy", "NotWeakKam", "PreconditionFailed", "SingCharError",
    "SpeedBoundExceeded", "__version__",
]
