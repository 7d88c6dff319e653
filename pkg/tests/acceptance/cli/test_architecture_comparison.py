"""
BDD tests for architecture-comparison.feature.
"""

import pytest
from pytest_bdd import scenario

from tests.config import get_feature_path

FEATURE = str(get_feature_path("cli/architecture-comparison.feature"))

pytestmark = pytest.mark.acceptance


@scenario(FEATURE, "Centralized aggregation dominates under a binding budget")
def test_centralized_dominates():
    pass


@scenario(FEATURE, "Architectures coincide without a budget")
def test_architectures_coincide_without_budget():
    pass


@scenario(FEATURE, "Envelope of one architecture")
def test_layered_envelope():
    pass


@scenario(FEATURE, "Re-running from the resolved configuration")
def test_rerun_from_resolved_configuration():
    """The echoed configuration is a complete scenario file."""
    pass
