"""Mixture of soft prompts with a hard-template-guided router, on frozen toy encoders."""

__version__ = "0.1.0"

from . import autodiff, dataio, encoders, objective, prompts, reporting, router, trainer  # noqa: F401
from .errors import PromptMixError  # noqa: F401
