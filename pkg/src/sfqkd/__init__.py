"""Key-rate model, calibration, optimization and time-tag tools for a
free-space entanglement QKD link with a spatial filter at the receiver."""

__version__ = "0.1.0"
