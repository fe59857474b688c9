"""oprlab: a desk-scale continual-learning laboratory for on-policy replay."""

__version__ = "0.1.0"
