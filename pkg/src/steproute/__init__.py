"""steproute: step-level device/cloud routing for long-horizon agent tasks.

A desk-scale simulator, a two-stage router trainer (supervised cold start
followed by cost-aware refinement on grouped rollout states), and an
evaluation harness for the success/cost trade-off.
"""

__version__ = "0.1.0"
