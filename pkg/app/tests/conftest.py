import logging

import pytest

from app.core.fixtures import ONE_DAY_PARAMS
from app.core.models import MarketContext, SmileParams


@pytest.fixture
def one_day_params() -> SmileParams:
    return ONE_DAY_PARAMS


@pytest.fixture
def flat_params() -> SmileParams:
    return SmileParams.from_rho(g=0.2, chi=1.0, rho=4.0, T=1.0)


@pytest.fixture
def one_day_ctx() -> MarketContext:
    return MarketContext(S0=1.0, r=0.0, T=ONE_DAY_PARAMS.T)


@pytest.fixture(autouse=True)
def reset_logging():
    yield
    root = logging.getLogger()
    for handler in list(root.handlers):
        if handler.get_name() == "smile-calibration":
            root.removeHandler(handler)
