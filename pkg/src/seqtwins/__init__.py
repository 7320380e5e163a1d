"""Barlow Twins self-supervised pretraining for user action sequences."""

__version__ = "0.1.0"
