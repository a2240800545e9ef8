"""Neural-Gaussian feature fields with Super-Gaussian clustering and
language-field queries, at desk scale on the CPU."""

__version__ = "0.1.0"
