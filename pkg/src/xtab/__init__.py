"""Cross-table pretraining of tabular transformers with federated delta-sum aggregation.

Submodules: ``tensor`` (numpy autodiff), ``data``, ``model``, ``objectives``,
``fedpretrain``, ``finetune``, ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
