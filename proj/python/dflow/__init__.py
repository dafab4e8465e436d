"""Discrete flow policy optimization on toy tasks."""

from ._dflow import *  # noqa: F401,F403
