"""Dynamic link prediction models and backdoor poisoning attacks against them."""

__version__ = "0.1.0"
