"""Desk-scale mesh network measurement and analytics platform."""

__version__ = "0.1.0"
