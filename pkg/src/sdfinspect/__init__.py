"""Inspection planning with implicit neural truncated signed distance fields.

A hash-grid + one-blob feature extractor with a small MLP head models the
environment; each simulated observation is stored as a tiny head over the
same frozen features, and a coverage-biased tree planner runs directly on
those implicit models.
"""

__version__ = "0.1.0"
