"""Desk-scale conditional GAN lab for selective focusing learning."""

__version__ = "0.1.0"
