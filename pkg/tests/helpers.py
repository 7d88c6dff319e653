"""Small builders shared by unit tests."""

import numpy as np

from ensemble import ConditionKey, LoadShapePair


def make_pair(control, mean, variance=None, condition=None):
    """Pair with a variance proportional to the squared mean unless one is given."""
    mean = np.asarray(mean, dtype=float)
    if variance is None:
        variance = np.where(mean != 0, 0.25 * mean**2 + 0.01, 0.0)
    return LoadShapePair(
        control=control,
        condition=condition or ConditionKey(),
        mean=mean,
        variance=variance,
    )
