"""Bundled example models with their expected classifications."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping

import numpy as np

from ..linear import LinearDae, mask_from_spec
from ..model import AugmentedModel, DaeModel, ModelError, augment, model_from_dict

__all__ = ["Scenario", "load", "NAMES", "raw"]

NAMES = ("reactor", "pendulum", "linear4", "linear4-sparse", "linear4-ode")


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    model: DaeModel
    theta_sets: Mapping[str, list]
    sensor_options: Mapping[str, object]
    expected: list
    initial_condition: tuple
    t_span: tuple[float, float]
    dt: float
    data: Mapping = field(repr=False, default_factory=dict)
    linear: LinearDae | None = None

    def model_for(self, sensor: str | None = None) -> DaeModel:
        """The model with outputs replaced by the named sensor option."""
        if sensor is None:
            return self.model
        cache = self.__dict__.setdefault("_sensor_models", {})
        if sensor not in cache:
            if sensor not in self.sensor_options:
                raise ModelError(f"unknown sensor {sensor!r}; choose from {sorted(self.sensor_options)}")
            opt = self.sensor_options[sensor]
            if self.linear is not None:
                cache[sensor] = self.model if opt == "I" else self.model.with_outputs(opt)
            else:
                cache[sensor] = self.model.with_outputs(opt)
        return cache[sensor]

    def theta(self, theta_set: str) -> list[str]:
        """Parameter names of a theta set (linear block specs are expanded)."""
        if theta_set not in self.theta_sets:
            raise ModelError(f"unknown theta set {theta_set!r}; choose from {sorted(self.theta_sets)}")
        spec = self.theta_sets[theta_set]
        if self.linear is not None:
            return self.linear_system(theta_set).param_names()
        return list(spec)

    def augmented(self, theta_set: str, sensor: str | None = None) -> AugmentedModel:
        return augment(self.model_for(sensor), self.theta(theta_set))

    def linear_system(self, theta_set: str | None = None) -> LinearDae:
        if self.linear is None:
            raise ModelError(f"scenario {self.name!r} is not linear")
        if theta_set is None:
            return self.linear
        return self.linear.with_mask(mask_from_spec(self.linear, self.theta_sets[theta_set]))

    def expected_label(self, theta_set: str, sensor: str | None = None) -> str | None:
        for e in self.expected:
            if e["theta_set"] == theta_set and (sensor is None or e["sensor"] == sensor):
                return e["label"]
        return None


def raw(name: str) -> dict:
    """Decoded fixture JSON."""
    if name not in NAMES:
        raise KeyError(f"unknown scenario {name!r}; choose from {', '.join(NAMES)}")
    text = resources.files(__name__).joinpath(f"{name}.json").read_text()
    return json.loads(text)


_LOADED: dict = {}


def load(name: str) -> Scenario:
    """Load a bundled scenario by name (results are cached)."""
    if name in _LOADED:
        return _LOADED[name]
    data = raw(name)
    model = model_from_dict(data)
    lin = LinearDae.from_dict(data) if data.get("kind") == "linear" else None
    sc = Scenario(
        name=name,
        model=model,
        theta_sets=data.get("theta_sets", {}),
        sensor_options=data.get("sensor_options", {}),
        expected=list(data.get("expected", [])),
        initial_condition=tuple(data.get("initial_condition", ())),
        t_span=tuple(data.get("t_span", (0.0, 10.0))),
        dt=float(data.get("dt", 1e-3)),
        data=data,
        linear=lin,
    )
    _LOADED[name] = sc
    return sc
