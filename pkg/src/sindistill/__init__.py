"""Weakly annotated ground truth and selective distillation for serial-number recognition.

Modules
-------
scenegen    synthetic slab scenes and a noisy point annotator
gtd         circular label regions from annotated character centres
net         small fully convolutional network with hand-written backprop
postproc    band partitioning, k-means and transcription of prediction maps
distill     selective distillation sweep and drift metrics
evaluation  SIN-level sensitivity, precision and F1
cli         the ``sindistill`` command
"""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
