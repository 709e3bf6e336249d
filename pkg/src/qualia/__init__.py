"""No-reference video quality assessment toolkit.

Fuses prompt-driven semantic features (how a clip feels to a viewer)
with fragment-sampled low-level spatial features, trains a small
regressor against mean opinion scores, and reports rank correlation
metrics. Served over HTTP (FastAPI) with a thin CLI client.
"""

__version__ = "0.1.0"
