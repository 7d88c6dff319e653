import pytest

from ensemble import DerClass, SyntheticSpec, TimeGrid, generate_synthetic
from envelope import Scenario
from tests.helpers import make_pair


@pytest.fixture
def grid():
    return TimeGrid(steps_per_period=24, step_hours=1.0, reset_hour=0.0)


@pytest.fixture
def small_grid():
    return TimeGrid(steps_per_period=4, step_hours=6.0, reset_hour=0.0)


@pytest.fixture
def triangle_class():
    """Three vertices and one interior point in two steps."""
    return DerClass(
        name="triangle",
        n_total=10,
        unit_dispatch_cost=0.2,
        rho=0.1,
        pairs=(
            make_pair("origin", [0.0, 0.0]),
            make_pair("right", [1.0, 0.0]),
            make_pair("up", [0.0, 1.0]),
            make_pair("inner", [0.25, 0.25]),
        ),
    )


@pytest.fixture
def synthetic_fleet(grid):
    """Small two-type fleet with costs that make a 50 USD budget bind."""
    specs = [
        ("thermostat", "thermostat", 400, 0.20, 11),
        ("battery", "battery", 60, 0.45, 12),
    ]
    return [
        generate_synthetic(
            SyntheticSpec(archetype=arch, n_sequences=5, seed=seed),
            grid,
            name=name,
            n_total=n_total,
            unit_dispatch_cost=cost,
            rho=0.1,
        )
        for name, arch, n_total, cost, seed in specs
    ]


@pytest.fixture
def fleet_scenario(synthetic_fleet, grid):
    def _scenario(**kwargs):
        base = dict(
            classes=tuple(synthetic_fleet),
            grid=grid,
            lam=0.1,
            rho=0.1,
            budget=50.0,
            confidence_z=1.645,
        )
        base.update(kwargs)
        return Scenario(**base)

    return _scenario


