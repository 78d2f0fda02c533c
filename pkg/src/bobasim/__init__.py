"""Desk-scale workbench for Byzantine-robust federated aggregation under
label skew: subspace-based two-stage aggregation, baseline robust rules,
gradient attacks, non-IID partitioners, a deterministic simulator, and
executable structural checks.
"""

__version__ = "0.1.0"
