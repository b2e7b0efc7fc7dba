"""Regime-switching stochastic model of rooftop PV power: clear-sky fitting,
cloud deconvolution, a constrained partly-cloudy HMM, regime detection,
rolling probabilistic forecasts, baselines, scores and a synthetic generator."""

__version__ = "0.1.0"
