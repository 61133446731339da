"""Small helpers shared by the experiment scripts."""
import copy
import json
from pathlib import Path

import numpy as np

from distest.scenario import parse_scenario


def build(base: dict, **changes):
    d = copy.deepcopy(base)
    for key, value in changes.items():
        if isinstance(value, dict) and isinstance(d.get(key), dict):
            d[key].update(value)
        else:
            d[key] = value
    return parse_scenario(d)


def write_json(path: str | None, payload: dict) -> None:
    text = json.dumps(payload, indent=2, default=lambda o: o.tolist() if isinstance(o, np.ndarray) else str(o))
    print(text)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n")
