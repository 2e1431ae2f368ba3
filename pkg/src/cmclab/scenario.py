"""Scenario documents: JSON in, validated objects out.

Continuous scenarios::

    {
      "kind": "continuous",                 # optional, the default
      "name": "three_state",
      "states": 3,
      "grid": {"T": 1.0, "K": 10},
      "factor": {"driver": "brownian", "x0": 0.0, "x0_sd": 1.0, "sigma": 1.0},
      "intensity": {"model": "mixture", "low": [[...]], "high": [[...]],
                    "link": "logistic", "slope": 2.0, "threshold": 0.0,
                    "feature": "value"},
      "reference_rates": [[...]],
      "initial_law": {"law": "factor_sign", "positive": [...], "negative": [...]},
      "lambda_max": 2.0
    }

Factor drivers: ``constant`` (value), ``brownian`` (x0, x0_sd, sigma),
``factor_chain`` (levels, rate).  Intensity models: ``constant``
(matrix), ``mixture`` (low, high, link, slope, threshold, feature),
``time_changed`` (jump_matrix, base, amplitude, feature).  Initial laws:
``constant`` (probs), ``factor_sign`` (positive, negative).

Discrete scenarios for the exact oracle use ``"kind": "discrete"``; see
:mod:`cmclab.oracle`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .core import IntensityModel, TimeGrid, model_from_spec
from .simulate import _check_reference, driver_from_spec, law_from_spec


class ScenarioError(ValueError):
    """The scenario document does not match the schema."""


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def scenario_hash(doc) -> str:
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()


@dataclass
class Scenario:
    name: str
    d: int
    grid: TimeGrid
    driver: object
    model: IntensityModel
    reference_rates: np.ndarray
    initial_law: object
    lambda_max: float
    doc: dict = field(repr=False, default_factory=dict)

    @property
    def hash(self) -> str:
        return scenario_hash(self.doc)

    def with_model(self, model: IntensityModel) -> "Scenario":
        return Scenario(self.name, self.d, self.grid, self.driver, model,
                        self.reference_rates, self.initial_law, self.lambda_max, self.doc)


def _require(doc, key):
    if key not in doc:
        raise ScenarioError(f"scenario is missing {key!r}")
    return doc[key]


def scenario_from_dict(doc: dict) -> Scenario:
    if doc.get("kind", "continuous") != "continuous":
        raise ScenarioError(f"expected a continuous scenario, got kind {doc.get('kind')!r}")
    try:
        d = int(_require(doc, "states"))
        g = _require(doc, "grid")
        grid = TimeGrid(float(g["T"]), int(g["K"]))
        driver = driver_from_spec(_require(doc, "factor"))
        model = model_from_spec(_require(doc, "intensity"), d)
        A = _check_reference(_require(doc, "reference_rates"))
        law = law_from_spec(_require(doc, "initial_law"))
        lam_max = float(_require(doc, "lambda_max"))
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(str(exc)) from exc
    if A.shape != (d, d) or law.d != d:
        raise ScenarioError("reference rates or initial law do not match the state count")
    if not np.isfinite(lam_max):
        raise ScenarioError("lambda_max must be finite; unbounded intensities are refused")
    if model.bound() > lam_max * (1 + 1e-12):
        raise ScenarioError(f"model bound {model.bound()} exceeds declared lambda_max {lam_max}")
    return Scenario(doc.get("name", "unnamed"), d, grid, driver, model, A, law, lam_max, doc)


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def load_scenario(path) -> Scenario:
    return scenario_from_dict(read_json(path))


def shipped_names(kind: str | None = None) -> list[str]:
    names = []
    for entry in resources.files("cmclab.scenarios").iterdir():
        if entry.name.endswith(".json"):
            doc = json.loads(entry.read_text())
            if kind is None or doc.get("kind", "continuous") == kind:
                names.append(entry.name[:-5])
    return sorted(names)


def shipped_doc(name: str) -> dict:
    return json.loads(resources.files("cmclab.scenarios").joinpath(f"{name}.json").read_text())


def shipped_scenario(name: str) -> Scenario:
    return scenario_from_dict(shipped_doc(name))


def shipped_path(name: str) -> Path:
    return Path(str(resources.files("cmclab.scenarios").joinpath(f"{name}.json")))
