"""Pluggable process classifiers.

Model files are JSON documents of one of two shapes::

    {"type": "heuristic", "R": 20, "K": 5}

    {"type": "forest", "threshold": 0.5,
     "features": ["opens_per_sec", ...],          # optional, defaults to all
     "trees": [{"nodes": [
         {"feature": 0, "threshold": 19.5, "left": 1, "right": 2},
         {"value": 0.0},
         {"value": 1.0}]}]}

Forest nodes are either splits (``feature`` index into ``features``,
``threshold``, ``left``/``right`` child indices; go left when
``x[feature] <= threshold``) or leaves (``value``, the malicious
probability). Node 0 is the root. The forest score is the mean leaf value.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

from ..errors import FeatureDimensionMismatch, ModelLoadFailed
from .features import FEATURE_NAMES, FeatureVector

DEFAULT_R = 20.0
DEFAULT_K = 5
DEFAULT_THRESHOLD = 0.5


class Classifier:
    name = "classifier"
    threshold = DEFAULT_THRESHOLD

    def score(self, fv: FeatureVector) -> float:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass
class HeuristicClassifier(Classifier):
    """Malicious iff opens_per_sec >= R and distinct_extensions >= K.

    The score is ``min(1, min(rate/R, ext/K) / 2)`` so that it reaches the 0.5
    threshold exactly when both conditions hold and is monotone in both
    features.
    """

    R: float = DEFAULT_R
    K: int = DEFAULT_K
    name = "heuristic"

    def score(self, fv: FeatureVector) -> float:
        ratio = min(fv.opens_per_sec / self.R, fv.distinct_extensions / self.K)
        return min(1.0, ratio / 2.0)

    def to_dict(self):
        return {"type": "heuristic", "R": self.R, "K": self.K}


class ForestClassifier(Classifier):
    name = "forest"

    def __init__(self, trees: list[dict], features: list[str] | None = None,
                 threshold: float = DEFAULT_THRESHOLD, name: str = "forest"):
        self.features = list(features) if features is not None else list(FEATURE_NAMES)
        unknown = [f for f in self.features if f not in FEATURE_NAMES]
        if unknown:
            raise FeatureDimensionMismatch(f"unknown features {unknown}")
        self._idx = [FEATURE_NAMES.index(f) for f in self.features]
        self.trees = trees
        self.threshold = threshold
        self.name = name
        if not trees:
            raise ModelLoadFailed("forest has no trees")
        for t, tree in enumerate(trees):
            nodes = tree.get("nodes")
            if not nodes:
                raise ModelLoadFailed(f"tree {t} has no nodes")
            for node in nodes:
                if "value" in node:
                    continue
                if node["feature"] >= len(self.features) or node["feature"] < 0:
                    raise FeatureDimensionMismatch(
                        f"tree {t} splits on feature {node['feature']}, model has "
                        f"{len(self.features)}")
                if not (0 <= node["left"] < len(nodes) and 0 <= node["right"] < len(nodes)):
                    raise ModelLoadFailed(f"tree {t} has a dangling child index")

    def _tree_value(self, nodes: list[dict], x: list[float]) -> float:
        i = 0
        for _ in range(len(nodes)):
            node = nodes[i]
            if "value" in node:
                return float(node["value"])
            i = node["left"] if x[node["feature"]] <= node["threshold"] else node["right"]
        raise ModelLoadFailed("cycle in tree")

    def score(self, fv: FeatureVector) -> float:
        allv = fv.values()
        x = [allv[i] for i in self._idx]
        return sum(self._tree_value(t["nodes"], x) for t in self.trees) / len(self.trees)

    def to_dict(self):
        return {"type": "forest", "threshold": self.threshold, "features": self.features,
                "trees": self.trees}


def model_from_dict(doc: dict) -> Classifier:
    try:
        kind = doc["type"]
        if kind == "heuristic":
            return HeuristicClassifier(R=float(doc.get("R", DEFAULT_R)), K=int(doc.get("K", DEFAULT_K)))
        if kind == "forest":
            return ForestClassifier(doc["trees"], doc.get("features"),
                                    float(doc.get("threshold", DEFAULT_THRESHOLD)),
                                    doc.get("name", "forest"))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FeatureDimensionMismatch):
            raise
        raise ModelLoadFailed(f"malformed model: {exc}") from None
    raise ModelLoadFailed(f"unknown model type {doc.get('type')!r}")


def load_model(path: str | os.PathLike) -> Classifier:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelLoadFailed(f"{path}: {exc}") from None
    return model_from_dict(doc)
