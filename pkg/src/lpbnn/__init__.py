"""Latent-posterior BatchEnsemble networks and their uncertainty toolkit, on a
small numpy autodiff engine."""

__version__ = "0.1.0"
