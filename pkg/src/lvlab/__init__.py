"""Physics-informed modelling of Lotka-Volterra predator-prey dynamics."""

__version__ = "0.1.0"
