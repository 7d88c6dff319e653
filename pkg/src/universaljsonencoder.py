import datetime
import math
from enum import Enum
from json import JSONEncoder
from pathlib import PurePath

import numpy as np
from pydantic import BaseModel as PydanticBaseModel


def _plain(o):
    """Convert one value to a JSON-native Python value, or return it unchanged."""
    if isinstance(o, PydanticBaseModel):
        return o.model_dump(mode="python")
    elif isinstance(o, np.ndarray):
        return o.tolist()
    elif isinstance(o, np.bool_):
        return bool(o)
    elif isinstance(o, np.integer):
        return int(o)
    elif isinstance(o, np.floating):
        return float(o)
    elif isinstance(o, Enum):
        return o.value
    elif isinstance(o, PurePath):
        return o.as_posix()
    elif isinstance(o, (datetime.datetime, datetime.date)):
        return o.isoformat()
    elif isinstance(o, (set, frozenset)):
        return sorted(o, key=str)
    return o


def to_jsonable(o):
    """
    Recursively convert `o` into plain JSON types.

    Non-finite floats become the strings "inf", "-inf" and "nan" so that files
    stay strict JSON; scenario loading parses them back.
    """
    o = _plain(o)
    if isinstance(o, dict):
        return {str(k): to_jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [to_jsonable(v) for v in o]
    if isinstance(o, float) and not math.isfinite(o):
        if math.isnan(o):
            return "nan"
        return "inf" if o > 0 else "-inf"
    return o


class UniversalJSONEncoder(JSONEncoder):
    """
    JSONEncoder that handles the types found in run artifacts.

    Handles:
    - numpy arrays and scalars
    - non-finite floats (as strings)
    - enum.Enum
    - pathlib paths
    - datetime.datetime / datetime.date
    - sets (sorted)
    - Pydantic V2 BaseModels
    """

    def encode(self, o):
        return super().encode(to_jsonable(o))

    def iterencode(self, o, _one_shot=False):
        return super().iterencode(to_jsonable(o), _one_shot)

    def default(self, o):
        converted = _plain(o)
        if converted is not o:
            return to_jsonable(converted)
        # Let the base class default method raise
        return super().default(o)
