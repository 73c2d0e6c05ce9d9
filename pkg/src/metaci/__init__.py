"""Meta-learned initialisations for counterfactual-regression networks
across heterogeneous sub-populations."""

__version__ = "0.1.0"
