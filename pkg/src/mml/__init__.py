"""Mutual modality learning on synthetic video, in numpy.

Submodules: ``synthvid`` (clip generator), ``modality`` (Diff / TV-L1 Flow
inputs), ``sampling``, ``net`` (temporal-shift micro-net), ``losses``,
``train`` / ``pipeline`` (training loops and multi-stage presets),
``evaluate``, ``config`` and ``cli``.
"""

__version__ = "0.1.0"
