"""Return-state classification of stocks and state-driven portfolio evaluation."""

__version__ = "0.1.0"
