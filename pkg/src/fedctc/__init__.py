"""Personalized federated adaptation of small CTC recognizers.

The numeric core (layers, CTC, optimizers) is plain numpy; the federated
protocols run in one process and account every transferred byte.
"""
__version__ = "0.1.0"
