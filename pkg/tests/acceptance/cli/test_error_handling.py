"""
BDD tests for error-handling.feature - exit codes of failing runs.
"""

import pytest
from pytest_bdd import scenario

from tests.config import get_feature_path

FEATURE = str(get_feature_path("cli/error-handling.feature"))

pytestmark = pytest.mark.acceptance


@scenario(FEATURE, "Scenario file does not exist")
def test_missing_scenario_file():
    pass


@scenario(FEATURE, "Setting outside its range")
def test_setting_out_of_range():
    pass


@scenario(FEATURE, "Malformed ensemble file")
def test_malformed_ensemble():
    pass


@scenario(FEATURE, "Disturbance outside the tracking horizon")
def test_disturbance_outside_horizon():
    pass
