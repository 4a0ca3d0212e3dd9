"""Small area estimation for panel forest inventories.

Post-stratified direct estimation, a spatial Fay-Herriot area-level model and
a Bayesian unit-level trend model, plus synthetic-data validation studies.
"""
__version__ = "0.1.0"
