"""Non-stationary spatial temperature extremes.

Marginal body/tail models for daily maxima with covariates borrowed from a
gridded climate-model run, Brown-Resnick r-Pareto dependence that tolerates
missing stations, and Monte Carlo risk metrics for spatial heat events.
"""

__version__ = "0.1.0"
