"""Python bindings for the siftmasks C++ core."""

import json

from ._core import (
    ConfigError,
    ExactnessError,
    SiftMasksError,
    dequantize,
    emr_build,
    project_total_cost,
    quantize,
    storage_words,
    tall_mask,
    ties_merge,
)
from ._core import System as _System

__all__ = [
    "ConfigError",
    "ExactnessError",
    "SiftMasksError",
    "System",
    "dequantize",
    "emr_build",
    "project_total_cost",
    "quantize",
    "storage_words",
    "tall_mask",
    "ties_merge",
]


class System:
    """A built merged system. `config` uses the same nested layout as config.json."""

    def __init__(self, config=None):
        self._core = _System(json.dumps(config or {}))

    def unlearn(self, task_id):
        return json.loads(self._core.unlearn(task_id))

    def verify(self):
        return json.loads(self._core.verify())

    def summary(self, with_accuracy=True):
        return json.loads(self._core.summary(with_accuracy))

    def held_in(self):
        return self._core.held_in()

    def held_out(self):
        return self._core.held_out()

    def zeroshot(self):
        return self._core.zeroshot()

    @property
    def retained(self):
        return self._core.retained()

    @property
    def unlearned(self):
        return self._core.unlearned()

    def checkpoint(self):
        return self._core.checkpoint()

    def accumulator(self, group=0):
        return self._core.accumulator(group)
