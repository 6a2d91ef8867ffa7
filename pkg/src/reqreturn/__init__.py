"""Required rates of return on equity and liabilities under the stochastic
dividend discount model.

Subpackages and modules
-----------------------
market_data
    Return panels, lagged designs and liability schedules.
ms_var
    Markov-switching VAR: Hamilton filter, Kim smoother, EM, diagnostics.
bayes_var
    Conjugate normal-inverse-Wishart VAR with Minnesota-style shrinkage.
private_valuation
    Price-to-book models for private companies (regime and state-space).
portfolio
    Lognormal predictive moments and closed-form mean-variance weights.
"""

__version__ = "0.1.0"

from .bayes_var import BayesianVAR, NiwPosterior, NiwPrior, gibbs_sample, niw_posterior
from .exceptions import DataError, NumericalError, ReqReturnError
from .market_data import LiabilitySchedule, ReturnPanel
from .ms_var import MarkovSwitchingVAR, MsVarModel, em_fit, hamilton_filter, infer, regime_diagnostics
from .portfolio import bayes_moments, rs_moments, solve_mean_variance
from .private_valuation import PrivatePanel, PrivateRegimeSwitching, PrivateStateSpace

__all__ = [
    "BayesianVAR",
    "DataError",
    "LiabilitySchedule",
    "MarkovSwitchingVAR",
    "MsVarModel",
    "NiwPosterior",
    "NiwPrior",
    "NumericalError",
    "PrivatePanel",
    "PrivateRegimeSwitching",
    "PrivateStateSpace",
    "ReqReturnError",
    "ReturnPanel",
    "__version__",
    "bayes_moments",
    "em_fit",
    "gibbs_sample",
    "hamilton_filter",
    "infer",
    "niw_posterior",
    "regime_diagnostics",
    "rs_moments",
    "solve_mean_variance",
]
