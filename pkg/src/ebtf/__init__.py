"""Sequence-model estimators for empirical-Bayes denoising.

Subpackage map:

- :mod:`ebtf.autodiff` -- minimal reverse-mode engine over float64 arrays
- :mod:`ebtf.model` -- the attention-based estimator, adapters, divergences
- :mod:`ebtf.checkpoint` -- binary container for weights and adapters
- :mod:`ebtf.datagen` -- prior distributions and synthetic corpora
- :mod:`ebtf.oracle` -- posterior-mean references, marginals, distances
- :mod:`ebtf.decisions` -- newsvendor / pricing layers and excess risk
- :mod:`ebtf.training` -- supervised pretraining and label-free finetuning
- :mod:`ebtf.experiments` -- sweep harness producing the records CSV
- :mod:`ebtf.report` -- figures and summary tables from the records CSV
- :mod:`ebtf.cli` -- command-line entry point
"""

__version__ = "0.1.0"
