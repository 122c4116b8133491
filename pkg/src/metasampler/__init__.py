"""Stochastic-gradient MCMC samplers for small Bayesian networks, with a meta-learned sampler."""

__version__ = "0.1.0"
