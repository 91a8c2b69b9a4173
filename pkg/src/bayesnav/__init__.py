"""
Uncertainty-aware gate navigation in numpy.

A stochastic encoder turns a 16-d gate sensor vector into latent samples
(MC dropout or encoder noise), an ensemble of heteroscedastic policies maps
each sample to Gaussian velocity commands, and a decision rule collapses the
resulting member x latent grid into one command: the uniform-mixture mean
(``de_mean``) or the member with the smallest sampled MI lower bound followed
by conservative mode extraction (``mi_mode``). A kinematic gate-track
simulator closes the loop.
"""

__version__ = "0.1.0"
