"""Slide score fusion with gradient-boosted regression trees, and the
archive / re-prepare / re-scan decision."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConstantFeatureWarning, EmptyDataset, InputError
from .metrics import METRIC_NAMES, MetricVector

SCORE_MIN, SCORE_MAX = 0.0, 10.0
ARCHIVE_ABOVE = 6.0
ALERT_THRESHOLD = 0.6
SCANNING = ("q1", "q2")
PREPARATION = ("q3", "q4", "q5", "q6", "q7", "q8")
ACTIONS = ("archive", "re_prepare", "re_scan", "re_prepare_and_scan")
MIN_TRAINING_ROWS = 10


@dataclass
class GbdtConfig:
    rounds: int = 100
    max_depth: int = 3
    eta: float = 0.1
    lam: float = 1.0
    gamma: float = 0.0


@dataclass
class GbdtModel:
    """Trees are flat node lists; node 0 is the root.

    Split nodes are ``{"feat", "thr", "left", "right"}`` (``x[feat] < thr``
    goes left), leaves are ``{"leaf": w}``.
    """

    trees: list = field(default_factory=list)
    base_score: float = 0.0
    eta: float = 0.1
    lam: float = 1.0
    gamma: float = 0.0
    max_depth: int = 3
    feature_names: tuple = METRIC_NAMES
    meta: dict = field(default_factory=dict)

    def raw_predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.full(x.shape[0], self.base_score)
        for tree in self.trees:
            out += self.eta * _tree_predict(tree, x)
        return out

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.clip(self.raw_predict(x), SCORE_MIN, SCORE_MAX)

    def to_dict(self) -> dict:
        return {
            "base_score": self.base_score,
            "eta": self.eta,
            "lambda": self.lam,
            "gamma": self.gamma,
            "max_depth": self.max_depth,
            "trees": [{"nodes": t} for t in self.trees],
            "feature_names": list(self.feature_names),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GbdtModel":
        names = tuple(d.get("feature_names", METRIC_NAMES))
        if names != METRIC_NAMES:
            raise InputError(f"model features {names} do not match {METRIC_NAMES}")
        trees = [t["nodes"] for t in d["trees"]]
        for t in trees:
            _check_tree(t)
        return cls(trees, float(d["base_score"]), float(d["eta"]), float(d["lambda"]), float(d["gamma"]),
                   int(d.get("max_depth", 3)), names, dict(d.get("meta", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "GbdtModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_tree(nodes: list) -> None:
    for k, n in enumerate(nodes):
        if "leaf" in n:
            continue
        if not 0 <= int(n["feat"]) < len(METRIC_NAMES):
            raise InputError(f"feature index {n['feat']} out of range")
        if not (k < n["left"] < len(nodes) and k < n["right"] < len(nodes)):
            raise InputError("tree children must follow their parent")


def _tree_predict(nodes: list, x: np.ndarray) -> np.ndarray:
    out = np.empty(x.shape[0])
    for r in range(x.shape[0]):
        k = 0
        while "leaf" not in nodes[k]:
            n = nodes[k]
            k = n["left"] if x[r, n["feat"]] < n["thr"] else n["right"]
        out[r] = nodes[k]["leaf"]
    return out


def _best_split(x, g, h, idx, lam, gamma):
    """Exact greedy split; ties keep the lowest feature, then lowest threshold."""
    G, H = g[idx].sum(), h[idx].sum()
    parent = G * G / (H + lam) if H + lam > 0 else 0.0
    best = (0.0, None, None)
    for f in range(x.shape[1]):
        xs = x[idx, f]
        order = np.argsort(xs, kind="stable")
        xs = xs[order]
        gl = np.cumsum(g[idx][order])[:-1]
        hl = np.cumsum(h[idx][order])[:-1]
        distinct = xs[1:] != xs[:-1]
        if not distinct.any():
            continue
        gr, hr = G - gl, H - hl
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent) - gamma
        gain = np.where(distinct, gain, -np.inf)
        k = int(np.argmax(gain))
        if gain[k] > best[0]:
            best = (float(gain[k]), f, 0.5 * (xs[k] + xs[k + 1]))
    return best


def _grow(x, g, h, idx, depth, cfg: GbdtConfig, nodes: list) -> int:
    k = len(nodes)
    nodes.append(None)
    gain, f, thr = (0.0, None, None) if depth >= cfg.max_depth else _best_split(x, g, h, idx, cfg.lam, cfg.gamma)
    if f is None:
        G, H = g[idx].sum(), h[idx].sum()
        nodes[k] = {"leaf": float(-G / (H + cfg.lam)) if H + cfg.lam > 0 else 0.0}
        return k
    go_left = x[idx, f] < thr
    node = {"feat": int(f), "thr": float(thr), "left": 0, "right": 0}
    nodes[k] = node
    node["left"] = _grow(x, g, h, idx[go_left], depth + 1, cfg, nodes)
    node["right"] = _grow(x, g, h, idx[~go_left], depth + 1, cfg, nodes)
    return k


def train_gbdt(dataset: Sequence, config: GbdtConfig = GbdtConfig(), log=None) -> GbdtModel:
    """Fit on ``[(MetricVector or array of 8, label), ...]`` with squared error.

    ``base_score`` starts at the label mean; every round adds one tree of
    Newton leaf weights (g = prediction - label, h = 1).
    """
    if len(dataset) == 0:
        raise EmptyDataset("no training rows")
    if len(dataset) < MIN_TRAINING_ROWS:
        raise EmptyDataset(f"need at least {MIN_TRAINING_ROWS} rows, got {len(dataset)}")
    x = np.array([q.features() if isinstance(q, MetricVector) else np.asarray(q, dtype=np.float64) for q, _ in dataset])
    y = np.array([float(t) for _, t in dataset])
    if x.shape[1] != len(METRIC_NAMES):
        raise InputError(f"expected {len(METRIC_NAMES)} features, got {x.shape[1]}")
    for f in range(x.shape[1]):
        if np.all(x[:, f] == x[0, f]):
            warnings.warn(f"feature {METRIC_NAMES[f]} is constant in the training set", ConstantFeatureWarning)
    model = GbdtModel([], float(y.mean()), config.eta, config.lam, config.gamma, config.max_depth)
    pred = np.full(len(y), model.base_score)
    idx = np.arange(len(y))
    h = np.ones(len(y))
    for r in range(config.rounds):
        g = pred - y
        nodes: list = []
        _grow(x, g, h, idx, 0, config, nodes)
        model.trees.append(nodes)
        pred = pred + config.eta * _tree_predict(nodes, x)
        if log is not None:
            log(r, float(np.sqrt(np.mean((pred - y) ** 2))))
    return model


def predict_score(model: GbdtModel, q: MetricVector) -> float:
    """Fused 0-10 score. Not-evaluable metrics enter as their imputed 1.0."""
    return float(model.predict(q.features()[None, :])[0])


def rmse(model: GbdtModel, dataset: Sequence) -> float:
    x = np.array([q.features() if isinstance(q, MetricVector) else np.asarray(q, dtype=np.float64) for q, _ in dataset])
    y = np.array([float(t) for _, t in dataset])
    return float(np.sqrt(np.mean((model.predict(x) - y) ** 2)))


# ------------------------------------------------------------------ decision

@dataclass
class SlideDecision:
    score: float
    action: str
    reasons: list

    def to_dict(self) -> dict:
        return {"score": self.score, "action": self.action, "reasons": list(self.reasons)}

    @classmethod
    def from_dict(cls, d: dict) -> "SlideDecision":
        return cls(float(d["score"]), d["action"], list(d["reasons"]))


def decide(score: float, q: MetricVector, threshold: float = ALERT_THRESHOLD) -> SlideDecision:
    """Archive above 6; otherwise attribute the fault to scanning and/or preparation.

    ======================  ==================
    metrics below 0.6       action
    ======================  ==================
    none                    re_prepare
    q1/q2 only              re_scan
    q3..q8 only             re_prepare
    both groups             re_prepare_and_scan
    ======================  ==================
    """
    reasons = [n for n in METRIC_NAMES if q[n].value < threshold]
    if score > ARCHIVE_ABOVE:
        return SlideDecision(score, "archive", reasons)
    scan = any(n in SCANNING for n in reasons)
    prep = any(n in PREPARATION for n in reasons)
    if scan and prep:
        action = "re_prepare_and_scan"
    elif scan:
        action = "re_scan"
    else:
        action = "re_prepare"
    return SlideDecision(score, action, reasons)


# ---------------------------------------------------------- synthetic labels

RUBRIC_WEIGHTS = {"q1": 0.10, "q2": 0.20, "q3": 0.10, "q4": 0.10, "q5": 0.10, "q6": 0.20, "q7": 0.05, "q8": 0.15}


def rubric_label(features) -> float:
    """Non-clinical stand-in for a pathologist rating on a 0-10 scale.

    10 x the weighted mean of the squared metrics. Squaring makes a large
    drop in one metric cost more than the same total spread over several.
    """
    f = np.asarray(features, dtype=np.float64)
    w = np.array([RUBRIC_WEIGHTS[n] for n in METRIC_NAMES])
    return float(10.0 * (w @ (f * f)))


def random_metric_vectors(n: int, seed: int = 0) -> np.ndarray:
    """Metric vectors that are mostly good with occasional faults of any size."""
    rng = np.random.default_rng(seed)
    good = rng.uniform(0.85, 1.0, (n, len(METRIC_NAMES)))
    bad = rng.uniform(0.0, 1.0, (n, len(METRIC_NAMES)))
    return np.where(rng.uniform(size=(n, len(METRIC_NAMES))) < 0.7, good, bad)


def rubric_dataset(n: int, seed: int = 0) -> list:
    x = random_metric_vectors(n, seed)
    return [(row, rubric_label(row)) for row in x]


def default_model() -> GbdtModel:
    text = resources.files("wsiqc.data").joinpath("score_default.json").read_text()
    return GbdtModel.from_dict(json.loads(text))


def load_labels_csv(path) -> list:
    """Rows with columns q1..q8 and ``label`` (extra columns are ignored)."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in (*METRIC_NAMES, "label") if c not in (reader.fieldnames or [])]
        if missing:
            raise InputError(f"{path}: missing columns {missing}")
        for k, r in enumerate(reader, start=2):
            try:
                feats = np.array([float(r[n]) for n in METRIC_NAMES])
                label = float(r["label"])
            except ValueError as exc:
                raise InputError(f"{path}:{k}: {exc}") from None
            if not (np.all((feats >= 0) & (feats <= 1)) and SCORE_MIN <= label <= SCORE_MAX and math.isfinite(label)):
                raise InputError(f"{path}:{k}: metrics must lie in [0,1] and labels in [0,10]")
            rows.append((feats, label))
    return rows
