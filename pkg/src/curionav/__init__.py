"""Curiosity-driven mapless navigation: simulator, autodiff core, A3C + ICM trainer
and evaluation bench."""

__version__ = "0.1.0"
