"""Per-volume metric collections and their JSON/CSV forms."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

_UNIT_RANGE = {"ssim": (-1.0, 1.0), "fsim": (0.0, 1.0), "epr": (0.0, 1.0), "dice": (0.0, 1.0),
               "ncc": (-1.0, 1.0), "histcc": (-1.0, 1.0)}


@dataclass
class MetricReport:
    """Metric values for one volume, keyed by lower-case metric name."""

    volume: str
    values: dict = field(default_factory=dict)

    def __setitem__(self, name: str, value: float):
        value = float(value)
        if not math.isfinite(value):
            raise ValueError(f"{name} is not finite")
        lo, hi = _UNIT_RANGE.get(name, (-math.inf, math.inf))
        if not lo - 1e-9 <= value <= hi + 1e-9:
            raise ValueError(f"{name}={value} outside [{lo}, {hi}]")
        self.values[name] = value

    def __getitem__(self, name: str) -> float:
        return self.values[name]

    def to_json(self) -> str:
        return json.dumps({"volume": self.volume, "metrics": self.values}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        doc = json.loads(text)
        rep = cls(doc["volume"])
        for k, v in doc["metrics"].items():
            rep[k] = v
        return rep

    def rows(self) -> list[tuple[str, str, float]]:
        return [(self.volume, k, self.values[k]) for k in sorted(self.values)]


def write_reports_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["volume", "metric", "value"])
        for rep in reports:
            for vol, name, value in rep.rows():
                w.writerow([vol, name, f"{value:.10g}"])
