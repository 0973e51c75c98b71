import pytest

from app import create_app
from app.models.database import db
from app.services.risk import NestedConfig, gaussian_problem
from app.services.sde import MlmcConfig, european_call, gbm
from config import TestingConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="运行标记为 slow 的验证")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture()
def app():
    app = create_app(TestingConfig)
    with app.app_context():
        db.create_all()
        yield app
        db.session.remove()
        db.drop_all()


@pytest.fixture()
def client(app):
    return app.test_client()


@pytest.fixture()
def gbm_model():
    return gbm(x0=1.0, mu=0.05, sigma=0.2, horizon=1.0)


@pytest.fixture()
def atm_call():
    return european_call(strike=1.0)


@pytest.fixture()
def small_cfg():
    return MlmcConfig(max_level=8, pilot_samples=1000, initial_levels=3, seed=7)


@pytest.fixture()
def gaussian():
    return gaussian_problem(threshold=1.0)


@pytest.fixture()
def nested_cfg():
    return NestedConfig(n0_inner=16, pilot_outer=500, initial_levels=3, max_level=8, seed=3)
