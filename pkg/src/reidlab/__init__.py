"""Desk-scale person re-identification laboratory on procedural data.

Pieces: a reverse-mode autodiff core (:mod:`reidlab.autodiff`), a truncatable
residual backbone (:mod:`reidlab.backbone`), a spatial-gate LSTM feature
extractor with four masking strategies (:mod:`reidlab.gates`), task heads and
losses (:mod:`reidlab.losses`), a binary weight store with prefix loading
(:mod:`reidlab.weightstore`), a procedural dataset generator
(:mod:`reidlab.synthetic`), staged training (:mod:`reidlab.training`),
CMC evaluation (:mod:`reidlab.evaluation`) and a CLI (:mod:`reidlab.cli`).
"""

from .autodiff import Tensor, no_grad, check_gradients, ShapeError

__all__ = ["Tensor", "no_grad", "check_gradients", "ShapeError"]
__version__ = "0.1.0"
