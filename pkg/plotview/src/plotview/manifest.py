"""Run-manifest loading and the documented point/log file formats.

The experiment pipeline records a manifest.json naming the point-cloud
CSVs, per-mode train logs, and summaries. These readers validate the files
exist and parse the documented schemas (point CSV: x0,...,x{d-1},weight
header; train log CSV: loop,iteration,fitting_loss,gm_gap,total_loss).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np


class ManifestError(ValueError):
    """Missing or malformed manifest entries."""


@dataclass
class RunManifest:
    source: str
    reference: str
    target: str
    panels: dict[str, str]
    train_logs: dict[str, str] = field(default_factory=dict)
    summaries: dict[str, str] = field(default_factory=dict)
    run_dir: str = ""

    @classmethod
    def load(cls, path) -> "RunManifest":
        if not os.path.exists(path):
            raise ManifestError(f"manifest not found: {path}")
        with open(path) as fh:
            raw = json.load(fh)
        missing = [k for k in ("source", "reference", "target", "panels")
                   if k not in raw]
        if missing:
            raise ManifestError(f"manifest {path} lacks entries: {', '.join(missing)}")
        m = cls(source=raw["source"], reference=raw["reference"],
                target=raw["target"], panels=dict(raw["panels"]),
                train_logs=dict(raw.get("train_logs", {})),
                summaries=dict(raw.get("summaries", {})),
                run_dir=raw.get("run_dir", os.path.dirname(os.path.abspath(path))))
        m.check_files()
        return m

    def referenced_files(self) -> list[str]:
        return ([self.source, self.reference, self.target]
                + list(self.panels.values())
                + list(self.train_logs.values())
                + list(self.summaries.values()))

    def check_files(self) -> None:
        gone = [p for p in self.referenced_files() if not os.path.exists(p)]
        if gone:
            raise ManifestError("manifest references missing files: "
                                + ", ".join(gone))


def read_points_csv(path) -> np.ndarray:
    """Points from the documented CSV schema (weight column dropped)."""
    if not os.path.exists(path):
        raise ManifestError(f"point file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "weight" or \
                any(h != f"x{k}" for k, h in enumerate(header[:-1])):
            raise ManifestError(f"{path}: unexpected header {header}; expected "
                                f"x0,...,x{{d-1}},weight")
        rows = [[float(v) for v in row[:-1]] for row in reader]
    return np.asarray(rows)


def read_train_log(path) -> dict[str, dict[str, np.ndarray]]:
    """Train-log rows grouped by loop tag."""
    if not os.path.exists(path):
        raise ManifestError(f"train log not found: {path}")
    groups: dict[str, dict[str, list]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            g = groups.setdefault(row["loop"], {"iteration": [], "fitting_loss": [],
                                                "gm_gap": [], "total_loss": []})
            g["iteration"].append(int(row["iteration"]))
            g["fitting_loss"].append(float(row["fitting_loss"]))
            g["gm_gap"].append(float(row["gm_gap"]))
            g["total_loss"].append(float(row["total_loss"]))
    return {loop: {k: np.asarray(v) for k, v in g.items()}
            for loop, g in groups.items()}


def read_summary(path) -> dict:
    if not os.path.exists(path):
        raise ManifestError(f"summary not found: {path}")
    with open(path) as fh:
        return json.load(fh)
