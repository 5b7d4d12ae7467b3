"""Staged training, evaluation, profiling, analysis, and reporting."""

from .common import HarnessError, load_checkpoint  # noqa: F401
