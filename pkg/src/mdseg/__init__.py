"""Multi-dataset volumetric segmentation with per-class sigmoid heads.

Modules: ``collection`` (data model and volume I/O), ``phantomgen`` (synthetic
collections), ``ndnet`` (tensor primitives and U-Net), ``losses``, ``sampling``,
``trainer``, ``evalreport`` and ``cli``.
"""

__version__ = "0.1.0"
