"""Adaptive-computation vision-language-action policy at desk scale.

A small multimodal transformer drives a 2D manipulation agent; a learned
router decides, per control step, how much of that transformer to run:
which vision tokens survive compaction, which layers execute, and whether
the cognition vector can be reused from a keyed cache instead of being
recomputed.
"""

__version__ = "0.1.0"
