"""Simulated tactile exploration of primitive shapes.

Subpackages cover the pipeline end to end: geometry and metrics, analytic
primitives, a taxel-equipped gripper simulator, the three contact modes,
dataset generation with augmentations, primitive-based shape completion, the
touch-planning episode loop, and a CLI harness.
"""

__version__ = "0.1.0"
