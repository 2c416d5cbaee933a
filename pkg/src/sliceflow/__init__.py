"""Gradient-free conditional sampling under flow-based priors.

Samples target distributions of the form potential(x) * prior(x), where the
prior is a flow-based generative model, by running elliptical slice sampling
in the model's Gaussian source space. No gradients of the model or the
potential are ever required outside of prior training itself.
"""

__version__ = "0.1.0"
