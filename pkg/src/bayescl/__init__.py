"""Desk-scale Bayesian continual-learning lab.

Mean-field Gaussian networks trained sequentially with KL anchoring to the
previous task's posterior, optional Gaussian natural-gradient scaling of the
variational updates, and coreset support (random, k-center, Stein points)
with either a fine-tuned prediction model or a regret term in the live loss.
"""

__version__ = "0.1.0"
