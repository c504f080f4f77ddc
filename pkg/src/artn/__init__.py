"""Adversarial residual transform networks for unsupervised domain adaptation.

A numpy reverse-mode autodiff core, fully connected networks, the adversarial
residual transform model, synthetic domain-shift data, a training harness and
the ``artn`` command line.
"""

__version__ = "0.1.0"
