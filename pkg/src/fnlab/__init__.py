"""Function approximation toolkit: data consistency checks, growable
feed-forward networks, piecewise-constant fits and almost-periodic
frequency models, plus the benchmark experiments that compare them."""

__version__ = "0.1.0"
