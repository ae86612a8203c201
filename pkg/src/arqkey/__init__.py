"""Key agreement from first-attempt packet deliveries."""

__version__ = "0.1.0"
