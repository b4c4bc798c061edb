"""Analytic training-memory model for side-tuning and its alternatives."""
from last.memory.footprint import STRATEGIES, FootprintReport, StrategyModel, compare, estimate, estimate_all
