"""Neural dispatch policies for chance-constrained stochastic AC OPF."""

__version__ = "0.1.0"
