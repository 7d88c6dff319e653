"""
Synthetic per-device load-shape archetypes.

Every builder returns the mean deviation from baseline in kW per device for one
daily control sequence. Negative values are load reduction or export.
Event timing is drawn in clock hours and mapped onto the period's steps,
counting from the reset hour.
"""

import logging
from enum import StrEnum
from typing import Callable, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)


class Archetype(StrEnum):
    THERMOSTAT = "thermostat"
    WATER_HEATER = "water_heater"
    EV_CHARGING = "ev_charging"
    BATTERY = "battery"


# Device-level relative standard deviation of the response around its mean
DEVICE_REL_SD = {
    Archetype.THERMOSTAT: 0.35,
    Archetype.WATER_HEATER: 0.40,
    Archetype.EV_CHARGING: 0.25,
    Archetype.BATTERY: 0.15,
}

# Clock hours (start, end) in which the dispatchable interval starts
DEFAULT_WINDOWS = {
    Archetype.THERMOSTAT: (12.0, 19.0),
    Archetype.WATER_HEATER: (6.0, 20.0),
    Archetype.EV_CHARGING: (17.0, 21.0),
    Archetype.BATTERY: (15.0, 20.0),
}

# Variance floor in kW^2 wherever the mean is nonzero
VARIANCE_FLOOR = 1e-6


def _steps(hours: float, step_hours: float) -> int:
    return max(1, int(round(hours / step_hours)))


def _start_step(
    rng: np.random.Generator,
    window: Tuple[float, float],
    reset_hour: float,
    step_hours: float,
    steps: int,
) -> int:
    clock = rng.uniform(window[0], window[1])
    offset = (clock - reset_hour) % 24.0
    return int(offset // step_hours) % steps


def _place(shape: np.ndarray, start: int, length: int, value: float) -> None:
    idx = (start + np.arange(length)) % shape.size
    shape[idx] += value


def thermostat_shape(rng, steps, step_hours, start):
    """Pre-set temperature shed followed by a rebound of opposite sign."""
    shape = np.zeros(steps)
    depth = rng.uniform(0.6, 1.6)
    shed = _steps(rng.uniform(1.0, 4.0), step_hours)
    rebound = _steps(rng.uniform(1.0, 3.0), step_hours)
    payback = rng.uniform(0.5, 0.9)
    _place(shape, start, shed, -depth)
    _place(shape, start + shed, rebound, payback * depth * shed / rebound)
    return shape


def water_heater_shape(rng, steps, step_hours, start):
    """Element shed with partial energy payback afterwards."""
    shape = np.zeros(steps)
    depth = rng.uniform(0.3, 0.8)
    shed = _steps(rng.uniform(2.0, 4.0), step_hours)
    recovery = _steps(rng.uniform(2.0, 5.0), step_hours)
    payback = rng.uniform(0.3, 0.7)
    _place(shape, start, shed, -depth)
    _place(shape, start + shed, recovery, payback * depth * shed / recovery)
    return shape


def ev_charging_shape(rng, steps, step_hours, start):
    """Charging block moved later in the period; daily energy is unchanged."""
    shape = np.zeros(steps)
    power = rng.uniform(3.3, 7.2)
    block = _steps(rng.uniform(2.0, 4.0), step_hours)
    delay = _steps(rng.uniform(3.0, 8.0), step_hours)
    _place(shape, start, block, -power)
    _place(shape, start + delay, block, power)
    return shape


def battery_shape(rng, steps, step_hours, start):
    """Export at rated power, then recharge the same energy at a lower rate."""
    shape = np.zeros(steps)
    power = rng.uniform(2.0, 5.0)
    discharge = _steps(rng.uniform(1.0, 3.0), step_hours)
    recharge = discharge * int(rng.integers(2, 4))
    _place(shape, start, discharge, -power)
    _place(shape, start + discharge, recharge, power * discharge / recharge)
    return shape


_BUILDERS: dict[Archetype, Callable[..., np.ndarray]] = {
    Archetype.THERMOSTAT: thermostat_shape,
    Archetype.WATER_HEATER: water_heater_shape,
    Archetype.EV_CHARGING: ev_charging_shape,
    Archetype.BATTERY: battery_shape,
}


def build_sequence(
    archetype: Archetype,
    rng: np.random.Generator,
    steps: int,
    step_hours: float,
    reset_hour: float,
    noise_scale: float,
    window: Optional[Tuple[float, float]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draw one control sequence and return its (mean, variance) per-device shapes.

    Variance is strictly positive exactly where the mean is nonzero.
    """
    window = window or DEFAULT_WINDOWS[archetype]
    start = _start_step(rng, window, reset_hour, step_hours, steps)
    mean = _BUILDERS[archetype](rng, steps, step_hours, start)
    mean[np.abs(mean) < 1e-12] = 0.0

    jitter = np.abs(rng.standard_normal(steps))
    sd = np.abs(mean) * (DEVICE_REL_SD[archetype] + noise_scale * jitter)
    variance = np.where(mean != 0.0, sd**2 + VARIANCE_FLOOR, 0.0)
    return mean, variance
