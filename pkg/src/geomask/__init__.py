"""Bayesian spatial inference for cluster-survey outcomes when cluster
coordinates are jittered or masked to an administrative area."""

from . import chain, cli, displace, evaluation, field, frame, geo, lgm

__version__ = "0.1.0"

__all__ = ["chain", "cli", "displace", "evaluation", "field", "frame", "geo", "lgm", "__version__"]
