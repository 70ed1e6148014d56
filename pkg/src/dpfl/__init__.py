"""Differentially private federated learning with pre-trained initialisation.

Modules: ``data`` (datasets, partitions, attack splits), ``models`` (small
classifiers with per-sample gradients), ``privacy`` (clipping and Gaussian
noise), ``federation`` (the ST/FT/HT training loop), ``attacks`` (MIA/SIA
audits), ``analysis`` (diagnostics) and ``cli``.
"""

__version__ = "0.1.0"
