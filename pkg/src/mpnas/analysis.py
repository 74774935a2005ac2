"""Path similarity, sharing statistics, cost reduction and plot-ready exports."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import cost
from .space import SearchSpaceSpec
from .supernet import JointModel, PathSelection, node_ids


class AnalysisError(ValueError):
    pass


def node_set(spec: SearchSpaceSpec, path: PathSelection) -> frozenset[str]:
    """Candidate-node ids on a path; heads are never part of it."""
    return frozenset(node_ids(spec, path))


def jaccard_sets(a: set | frozenset, b: set | frozenset) -> float:
    union = len(a | b)
    return 1.0 if union == 0 else len(a & b) / union


def jaccard(spec: SearchSpaceSpec, a: PathSelection, b: PathSelection, spec_b: SearchSpaceSpec | None = None) -> float:
    if spec_b is not None and spec_b.digest() != spec.digest():
        raise AnalysisError("paths come from different search spaces")
    return jaccard_sets(node_set(spec, a), node_set(spec, b))


@dataclass
class SimilarityMatrix:
    labels: list[str]
    values: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.labels)
        for row in self.values:
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SimilarityMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise AnalysisError("empty similarity matrix file")
        labels = rows[0]
        values = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
        if values.shape != (len(labels), len(labels)):
            raise AnalysisError(f"matrix shape {values.shape} does not match {len(labels)} labels")
        return cls(labels, values)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path: str | Path) -> "SimilarityMatrix":
        return cls.from_csv(Path(path).read_text())


def similarity_matrix(spec: SearchSpaceSpec, paths: Sequence[PathSelection],
                      labels: Sequence[str] | None = None) -> SimilarityMatrix:
    sets = [node_set(spec, p) for p in paths]
    n = len(sets)
    m = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            m[i, j] = m[j, i] = jaccard_sets(sets[i], sets[j])
    names = list(labels) if labels is not None else [f"d{i}" for i in range(n)]
    return SimilarityMatrix(names, m)


def sharing_stats(joint: JointModel) -> dict:
    nodes = joint.node_domains
    names = [d.name for d in joint.domains]
    shared = {k: v for k, v in nodes.items() if len(v) >= 2}
    return {
        "domains": names,
        "nodes": len(nodes),
        "shared_nodes": len(shared),
        "exclusive_nodes": len(nodes) - len(shared),
        "node_domains": {k: [names[i] for i in v] for k, v in nodes.items()},
        "backbone_params": joint.param_count(heads=False),
        "total_params": joint.param_count(),
    }


def cost_reduction_report(spec: SearchSpaceSpec, paths: Sequence[PathSelection],
                          bundle_paths: Sequence[PathSelection], resolution: int = 16,
                          labels: Sequence[str] | None = None) -> dict:
    """Joint (shared) cost against a bundle of independent single-domain models.

    Heads are excluded on both sides, so identical paths across N domains give
    a parameter reduction of exactly 1 - 1/N.
    """
    if len(paths) != len(bundle_paths):
        raise AnalysisError("joint and bundle need one path per domain each")
    joint_p = cost.joint_params(spec, paths)
    joint_f = cost.joint_flops(spec, paths, resolution)
    per = [{"params": cost.params(spec, p), "flops": cost.flops(spec, p, resolution)} for p in bundle_paths]
    bundle_p = sum(d["params"] for d in per)
    bundle_f = sum(d["flops"] for d in per)
    if bundle_p == 0 or bundle_f == 0:
        raise AnalysisError("bundle has zero cost; reduction is undefined")
    names = list(labels) if labels is not None else [f"d{i}" for i in range(len(paths))]
    return {
        "joint_params": joint_p,
        "joint_flops": joint_f,
        "bundle_params": bundle_p,
        "bundle_flops": bundle_f,
        "param_reduction": cost.reduction(joint_p, bundle_p),
        "flops_reduction": cost.reduction(joint_f, bundle_f),
        "per_domain": dict(zip(names, per)),
    }


COST_COLUMNS = ("path_id", "params", "flops", "latency", "reward")


def cost_rows(spec: SearchSpaceSpec, paths: Sequence[PathSelection], qualities: Sequence[float],
              calibration: cost.LatencyCalibration, reward_cfg: cost.RewardConfig,
              resolution: int = 16) -> list[dict]:
    rows = []
    for p, q in zip(paths, qualities):
        rep = cost.cost_report(spec, p, calibration, resolution)
        rows.append({"path_id": p.digest(), "params": rep.params, "flops": rep.flops,
                     "latency": rep.latency, "reward": cost.reward(q, rep.latency, reward_cfg)})
    return rows


def write_csv(rows: Sequence[dict], path: str | Path, columns: Sequence[str] | None = None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def plot_series(metrics: Sequence[dict], y: str, phase: str | None = None) -> list[dict]:
    """Long-format (series, x, y) rows of one metric per domain, for external plotting."""
    rows = []
    for m in metrics:
        if phase is not None and m.get("phase") != phase:
            continue
        if m.get(y) is None:
            continue
        rows.append({"series": m["domain"], "x": m["step"], "y": float(m[y])})
    return rows
