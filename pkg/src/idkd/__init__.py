"""Decentralized training simulator with in-distribution knowledge distillation."""

__version__ = "0.1.0"
