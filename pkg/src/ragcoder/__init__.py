"""ragcoder - ICD-10-CM coding grounded in the tabular list and the official coding guidelines."""

__version__ = "0.1.0"
