"""Participatory budgeting toolkit: ``.pb`` files, Equal Shares, Utilitarian Greedy and metrics."""

__version__ = "0.1.0"
