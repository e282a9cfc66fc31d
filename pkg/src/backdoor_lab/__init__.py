"""Backdoor attack laboratory: train a poisoned CNN, inspect its final conv
layer, reverse-engineer the trigger and prune it out by Linf thresholding."""

__version__ = "0.1.0"
