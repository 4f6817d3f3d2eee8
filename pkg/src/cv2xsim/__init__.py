"""Discrete-event simulator of the C-V2X Mode 4 sidelink with MCS adaptation."""

__version__ = "0.1.0"
