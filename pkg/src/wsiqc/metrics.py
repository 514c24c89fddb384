"""The eight slide quality metrics and their container."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

METRIC_NAMES = ("q1", "q2", "q3", "q4", "q5", "q6", "q7", "q8")
DESCRIPTIONS = {
    "q1": "grid-like imaging",
    "q2": "out of focus",
    "q3": "marker",
    "q4": "air/gel bubble",
    "q5": "staining standard",
    "q6": "squamous cell count",
    "q7": "cell mass",
    "q8": "neutrophil obscuration",
}
IMPUTED = 1.0


@dataclass
class MetricValue:
    """One metric in [0, 1]; lower means a more severe quality problem.

    A not-evaluable metric carries ``value`` == 1.0 (imputed) so the score
    model always sees eight features, and a warning saying why.
    """

    value: float = IMPUTED
    evaluable: bool = False
    raw: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @classmethod
    def of(cls, value: float, **raw) -> "MetricValue":
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"metric value {value} outside [0, 1]")
        return cls(float(value), True, dict(raw), [])

    @classmethod
    def missing(cls, reason: str, **raw) -> "MetricValue":
        return cls(IMPUTED, False, dict(raw), [reason])

    def to_dict(self) -> dict:
        return {"value": self.value, "evaluable": self.evaluable, "raw": self.raw, "warnings": list(self.warnings)}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricValue":
        return cls(float(d["value"]), bool(d["evaluable"]), dict(d.get("raw", {})), list(d.get("warnings", [])))


@dataclass
class MetricVector:
    values: dict = field(default_factory=lambda: {n: MetricValue.missing("not computed") for n in METRIC_NAMES})

    def __post_init__(self):
        if set(self.values) != set(METRIC_NAMES):
            raise ValueError("a metric vector holds exactly q1..q8")

    def __getitem__(self, name: str) -> MetricValue:
        return self.values[name]

    def __setitem__(self, name: str, v: MetricValue) -> None:
        if name not in METRIC_NAMES:
            raise KeyError(name)
        self.values[name] = v

    @classmethod
    def from_values(cls, **vals) -> "MetricVector":
        """Shorthand for tests: ``MetricVector.from_values(q2=0.3)``; others 1.0."""
        mv = cls({n: MetricValue.of(1.0) for n in METRIC_NAMES})
        for k, v in vals.items():
            mv[k] = MetricValue.of(v)
        return mv

    def features(self) -> np.ndarray:
        return np.array([self.values[n].value for n in METRIC_NAMES], dtype=np.float64)

    @property
    def any_evaluable(self) -> bool:
        return any(v.evaluable for v in self.values.values())

    def to_dict(self) -> dict:
        return {n: self.values[n].to_dict() for n in METRIC_NAMES}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricVector":
        return cls({n: MetricValue.from_dict(d[n]) for n in METRIC_NAMES})
