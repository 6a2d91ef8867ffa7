"""Private-company valuation: constant price-to-book regime model and the
time-varying price-to-book state-space model."""

from .em import PrivateEmResult, em_private, em_step, expected_complete_loglik, initial_state_space
from .estimators import PrivateRegimeSwitching, PrivateStateSpace
from .kalman import (
    MODES,
    KalmanTrajectory,
    StateSpaceModel,
    implied_required_return,
    kalman_filter,
    kalman_forecast,
    kalman_smoother,
    smoothed_market_value,
    smoothed_price_to_book,
)
from .panel import PrivateDesign, PrivatePanel
from .regime import (
    PrivateRsModel,
    PrivateRsResult,
    bayes_private_posterior,
    build_private_prior,
    private_inference,
    rs_private_em,
    rs_private_ml,
)

__all__ = [
    "MODES",
    "KalmanTrajectory",
    "PrivateDesign",
    "PrivateEmResult",
    "PrivatePanel",
    "PrivateRsModel",
    "PrivateRegimeSwitching",
    "PrivateRsResult",
    "PrivateStateSpace",
    "StateSpaceModel",
    "bayes_private_posterior",
    "build_private_prior",
    "em_private",
    "em_step",
    "expected_complete_loglik",
    "implied_required_return",
    "initial_state_space",
    "kalman_filter",
    "kalman_forecast",
    "kalman_smoother",
    "private_inference",
    "rs_private_em",
    "rs_private_ml",
    "smoothed_market_value",
    "smoothed_price_to_book",
]
