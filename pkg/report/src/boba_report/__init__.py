"""Post-hoc report rendering over simulator CSV outputs.

A pure view: every number printed exists in an input file or is a mean,
standard deviation, minimum, or ratio of such numbers. Nothing is
re-simulated.
"""

__version__ = "0.1.0"
