"""Planning, simulation and side-network fine-tuning for transformer models on edge device clusters."""

__version__ = "0.1.0"
