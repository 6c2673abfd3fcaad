"""K-stage policy-iteration estimation of dynamic discrete choice models
under local misspecification."""

__version__ = "0.1.0"
