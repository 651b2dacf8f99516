"""Channel-of-Mobile-Experts: output-oriented expert routing for staged GUI reasoning."""

__version__ = "0.1.0"
