"""Desk-scale numerics for twisted complex Monge-Ampère families on flat tori."""

__version__ = "0.1.0"
