"""Robust semi-supervised learning with learned per-cluster weights on unlabeled data.

Modules: ``autodiff`` (reverse-mode engine), ``nn`` (MLPs with plain,
frozen and weighted batch normalization), ``losses`` (SSL objectives),
``reweight`` (k-means cluster weights), ``bilevel`` (meta and implicit
hypergradients, the training loop), ``data`` (synthetic datasets),
``oracles`` (correctness checks) and ``harness`` (experiment CLI).
"""
__version__ = "0.1.0"
