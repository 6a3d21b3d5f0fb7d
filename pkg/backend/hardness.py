# ======================================================
# backend/hardness.py
# Soft / hard contact classification
#
# Features per selected frame (10 frames, evenly spaced):
#   |force| N, mean black-marker displacement px, contact area px²
# Pooled over the sequence (mean, or mean of the last 5 frames),
# standardized, then a logistic model trained by per-sample SGD
# on binary cross-entropy. Label 0 = soft, 1 = hard.
#
# Dataset manifest (JSON):
# {
#   "schema_version": 1,
#   "source": "truth" | "render",
#   "frames": 60,
#   "sequences": [{"name": "seq_0000", "path": "seq_0000.json", "label": "soft"}, ...]
# }
# Each sequence file holds {"records": [{"index": k, "features": {...}}, ...]},
# the same shape as the "records" of a processed summary.json.
# ======================================================

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from backend.errors import DataError, FeatureError, TrainingError
from backend.results_dao import read_json, write_json
from backend.scenario import HARD, HARDNESS_CLASSES, SOFT, random_scenario

log = logging.getLogger(__name__)

FEATURE_KEYS = ("force_n", "displacement_px", "contact_area_px2")
SELECTED_FRAMES = 10
POOLINGS = ("mean", "last5")
MANIFEST_VERSION = 1
SOURCES = ("truth", "render")


# ======================================================
# FEATURES
# ======================================================

def select_indices(n_frames: int, count: int = SELECTED_FRAMES) -> List[int]:
    """round(i·(N−1)/(count−1)) for i = 0..count−1, halves rounded up."""
    if n_frames < count:
        raise FeatureError(f"sequence has {n_frames} frames, need at least {count}")
    return [int(np.floor(i * (n_frames - 1) / (count - 1) + 0.5)) for i in range(count)]


@dataclass(frozen=True)
class SequenceFeatures:
    rows: np.ndarray          # (10, 3) in FEATURE_KEYS order
    indices: Tuple[int, ...]

    def __post_init__(self):
        if self.rows.shape != (SELECTED_FRAMES, len(FEATURE_KEYS)):
            raise FeatureError(f"feature rows must be {SELECTED_FRAMES}x{len(FEATURE_KEYS)}, got {self.rows.shape}")
        if not np.all(np.isfinite(self.rows)):
            raise FeatureError("feature rows contain non-finite values")

    def pool(self, pooling: str = "mean") -> np.ndarray:
        if pooling == "mean":
            return self.rows.mean(axis=0)
        if pooling == "last5":
            return self.rows[-5:].mean(axis=0)
        raise ValueError(f"unknown pooling '{pooling}'")


def extract_features(records: Sequence[dict], n_frames: Optional[int] = None) -> SequenceFeatures:
    """
    Build the 10×3 feature rows from per-frame records
    ({"index": k, "features": {...}}). Records may cover only the
    selected frames.
    """
    by_index = {int(r["index"]): r for r in records}
    if n_frames is None:
        n_frames = max(by_index) + 1 if by_index else 0
    idx = select_indices(n_frames)

    rows = np.zeros((len(idx), len(FEATURE_KEYS)))
    for row, k in enumerate(idx):
        rec = by_index.get(k)
        if rec is None:
            raise FeatureError("no record for selected frame", frame=k)
        feats = rec.get("features") or {}
        for col, key in enumerate(FEATURE_KEYS):
            v = feats.get(key)
            if v is None:
                raise FeatureError(f"missing '{key}'", frame=k)
            rows[row, col] = float(v)
    return SequenceFeatures(rows, tuple(idx))


def features_from_truth(gt, threshold_mm: float) -> SequenceFeatures:
    """Features computed directly from simulator ground truth."""
    records = [{"index": ft.index, "features": ft.features(threshold_mm)} for ft in gt.frames]
    return extract_features(records, gt.scenario.frames)


# ======================================================
# MODEL
# ======================================================

@dataclass
class HardnessModel:
    weights: np.ndarray
    bias: float
    mean: np.ndarray
    std: np.ndarray
    pooling: str = "mean"
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.asarray(self.std, dtype=float)
        if not (np.all(np.isfinite(self.weights)) and np.isfinite(self.bias)):
            raise TrainingError("model weights are not finite")

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def score(self, x: np.ndarray) -> np.ndarray:
        """Linear score on pooled (unstandardized) features."""
        return self.standardize(x) @ self.weights + self.bias

    def to_json(self) -> dict:
        return {
            "features": list(FEATURE_KEYS),
            "pooling": self.pooling,
            "weights": self.weights.tolist(),
            "bias": float(self.bias),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_json(cls, data: dict) -> "HardnessModel":
        try:
            return cls(
                weights=np.asarray(data["weights"], dtype=float),
                bias=float(data["bias"]),
                mean=np.asarray(data["mean"], dtype=float),
                std=np.asarray(data["std"], dtype=float),
                pooling=data.get("pooling", "mean"),
                metadata=dict(data.get("metadata", {})),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"invalid hardness model: {e}") from e


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def loss_and_gradient(w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray):
    """
    Mean binary cross-entropy and its gradient.
    x: (n, d) standardized, y: (n,) in {0, 1}.
    """
    z = x @ w + b
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    err = sigmoid(z) - y
    return loss, x.T @ err / len(y), float(err.mean())


def init_weights(seed: int, dim: int) -> Tuple[np.ndarray, float]:
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 0.01, size=dim), 0.0


# ======================================================
# TRAINING
# ======================================================

@dataclass
class LabeledSet:
    x: np.ndarray   # (n, d) pooled, unstandardized
    y: np.ndarray   # (n,) 0/1

    def __len__(self):
        return len(self.y)

    @classmethod
    def from_features(cls, feats: Sequence[SequenceFeatures], labels: Sequence[int],
                      pooling: str = "mean") -> "LabeledSet":
        if len(feats) != len(labels):
            raise DataError("features and labels differ in length")
        x = np.array([f.pool(pooling) for f in feats]).reshape(len(feats), len(FEATURE_KEYS))
        return cls(x, np.asarray(labels, dtype=float))


def train(data: LabeledSet, lr: float, epochs: int, seed: int = 0, pooling: str = "mean",
          validation: Optional[LabeledSet] = None) -> HardnessModel:
    """
    Per-sample SGD over a seeded shuffle. Keeps the epoch with the
    lowest validation loss when ``validation`` is given, otherwise the
    last epoch.
    """
    if pooling not in POOLINGS:
        raise TrainingError(f"unknown pooling '{pooling}'")
    if len(data) == 0 or len(np.unique(data.y)) < 2:
        raise TrainingError("training set must contain both soft and hard sequences")
    if lr < 0 or epochs < 0:
        raise TrainingError("learning rate and epochs must be non-negative")

    mean = data.x.mean(axis=0)
    std = data.x.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    xs = (data.x - mean) / std
    xv = (validation.x - mean) / std if validation is not None and len(validation) else None

    w, b = init_weights(seed, xs.shape[1])
    rng = np.random.default_rng(seed + 1)

    history: List[float] = []
    best = (np.inf, w.copy(), b, 0)
    for epoch in range(1, epochs + 1):
        for i in rng.permutation(len(xs)):
            err = sigmoid(xs[i] @ w + b) - data.y[i]
            w = w - lr * err * xs[i]
            b = b - lr * err
        train_loss, _, _ = loss_and_gradient(w, b, xs, data.y)
        history.append(train_loss)
        if xv is not None:
            val_loss, _, _ = loss_and_gradient(w, b, xv, validation.y)
            if val_loss < best[0]:
                best = (val_loss, w.copy(), b, epoch)

    best_epoch = epochs
    if xv is not None and epochs > 0:
        _, w, b, best_epoch = best

    final_loss, _, _ = loss_and_gradient(w, b, xs, data.y)
    log.info("Trained hardness model | epochs=%d | best=%d | loss=%.5f", epochs, best_epoch, final_loss)
    return HardnessModel(
        weights=w, bias=float(b), mean=mean, std=std, pooling=pooling,
        metadata={
            "epochs": epochs,
            "best_epoch": best_epoch,
            "learning_rate": lr,
            "seed": seed,
            "final_loss": final_loss,
            "loss_history": history,
            "train_size": len(data),
        },
    )


def classify(model: HardnessModel, feats: SequenceFeatures) -> Tuple[str, float]:
    """(class name, probability of hard); hard when p ≥ 0.5."""
    p = float(sigmoid(model.score(feats.pool(model.pooling))))
    return (HARD if p >= 0.5 else SOFT), p


def evaluate(model: HardnessModel, data: LabeledSet) -> dict:
    z = model.score(data.x)
    pred = (sigmoid(z) >= 0.5).astype(float)
    y = data.y
    tp = int(np.sum((pred == 1) & (y == 1)))
    tn = int(np.sum((pred == 0) & (y == 0)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    n = len(y)
    return {
        "count": n,
        "accuracy": (tp + tn) / n if n else 0.0,
        "precision": tp / (tp + fp) if tp + fp else 0.0,
        "recall": tp / (tp + fn) if tp + fn else 0.0,
        "confusion": {"tp": tp, "tn": tn, "fp": fp, "fn": fn},
        "loss": float(np.mean(np.logaddexp(0.0, z) - y * z)) if n else 0.0,
    }


# ======================================================
# MANIFEST / SPLIT
# ======================================================

def load_manifest(path: str) -> Tuple[List[SequenceFeatures], List[int], List[str]]:
    """Read a manifest and every sequence file it names."""
    try:
        data = read_json(path)
    except FileNotFoundError as e:
        raise DataError(f"manifest not found: {path}") from e
    except ValueError as e:
        raise DataError(f"manifest is not valid JSON: {e}") from e

    entries = data.get("sequences") if isinstance(data, dict) else None
    if not isinstance(entries, list) or not entries:
        raise DataError("manifest has no sequences")

    base = os.path.dirname(os.path.abspath(path))
    n_frames = data.get("frames")
    feats, labels, names = [], [], []
    for i, entry in enumerate(entries):
        label = entry.get("label")
        if label not in HARDNESS_CLASSES:
            raise DataError(f"sequences[{i}]: label must be 'soft' or 'hard', got {label!r}")
        seq_path = os.path.join(base, entry["path"])
        try:
            doc = read_json(seq_path)
        except (OSError, ValueError) as e:
            raise DataError(f"sequences[{i}]: cannot read {seq_path}: {e}") from e
        n = doc.get("frames", n_frames)
        feats.append(extract_features(doc.get("records", []), n))
        labels.append(HARDNESS_CLASSES.index(label))
        names.append(entry.get("name", entry["path"]))
    return feats, labels, names


def split_indices(n: int, train_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    cut = int(round(train_fraction * n))
    return np.sort(order[:cut]), np.sort(order[cut:])


def run_experiment(manifest_path: str, hcfg, seed: Optional[int] = None) -> Tuple[HardnessModel, dict]:
    """
    train/test split (train_fraction), validation carved from the training
    part (same fraction again), train, then report metrics on every split.
    """
    seed = hcfg.seed if seed is None else seed
    feats, labels, _ = load_manifest(manifest_path)
    labels = np.asarray(labels)

    train_idx, test_idx = split_indices(len(feats), hcfg.train_fraction, seed)
    fit_rel, val_rel = split_indices(len(train_idx), hcfg.train_fraction, seed + 1)
    fit_idx, val_idx = train_idx[fit_rel], train_idx[val_rel]

    def subset(idx):
        return LabeledSet.from_features([feats[i] for i in idx], labels[idx], hcfg.pooling)

    fit, val, test = subset(fit_idx), subset(val_idx), subset(test_idx)
    model = train(fit, hcfg.learning_rate, hcfg.epochs, seed, hcfg.pooling,
                  validation=val if len(val) else None)

    metrics = {
        "train": evaluate(model, fit),
        "validation": evaluate(model, val) if len(val) else None,
        "test": evaluate(model, test) if len(test) else None,
        "final_loss": model.metadata["final_loss"],
        "best_epoch": model.metadata["best_epoch"],
    }
    if metrics["test"] is not None:
        log.info(
            "Hardness test split | n=%d | accuracy=%.4f | precision=%.4f | recall=%.4f",
            metrics["test"]["count"], metrics["test"]["accuracy"],
            metrics["test"]["precision"], metrics["test"]["recall"],
        )
    return model, metrics


# ======================================================
# DATASET
# ======================================================

def _truth_records(model, sc, threshold_mm: float) -> List[dict]:
    from backend.simulator import frame_truth

    return [
        {"index": k, "features": frame_truth(model, sc, k).features(threshold_mm)}
        for k in select_indices(sc.frames)
    ]


def _render_records(cfg, model, sc) -> List[dict]:
    from backend.pipeline import process_sequence
    from backend.simulator import render_sequence

    frames, _ = render_sequence(model, sc)
    summary = process_sequence(frames, cfg, stiffness=model.stiffness, shape_indices=select_indices(sc.frames))
    return summary.to_json()["records"]


def build_dataset(cfg, out_dir: str, sequences: Optional[int] = None, source: str = "render",
                  threads: int = 1, seed: Optional[int] = None) -> str:
    """
    Simulate a balanced soft/hard dataset and write its manifest.

    source "render": render every frame and run the full processing pipeline
    (shape recovery only on the selected frames).
    source "truth": features straight from ground truth at the selected frames.
    Returns the manifest path.
    """
    from backend.simulator import SensorModel

    if source not in SOURCES:
        raise DataError(f"unknown dataset source '{source}'")
    hcfg = cfg.hardness
    count = hcfg.sequences if sequences is None else sequences
    seed = hcfg.seed if seed is None else seed
    if count < 2:
        raise DataError("a dataset needs at least one soft and one hard sequence")

    model = SensorModel.from_config(cfg, seed=seed)
    _ = model.surface, model.distortion_grid, model.reference_dots

    rng = np.random.default_rng(seed)
    scenarios = [
        random_scenario(rng, HARDNESS_CLASSES[i % 2], hcfg.frames_per_sequence, cfg.sim, name=f"seq_{i:04d}")
        for i in range(count)
    ]
    threshold = cfg.shape.contact_threshold_mm

    def one(sc):
        if source == "truth":
            return _truth_records(model, sc, threshold)
        return _render_records(cfg, model, sc)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            all_records = list(pool.map(one, scenarios))
    else:
        all_records = [one(sc) for sc in scenarios]

    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for sc, records in zip(scenarios, all_records):
        rel = f"{sc.name}.json"
        write_json(os.path.join(out_dir, rel), {
            "name": sc.name,
            "hardness": sc.hardness,
            "frames": sc.frames,
            "records": records,
        })
        entries.append({"name": sc.name, "path": rel, "label": sc.hardness})

    manifest = os.path.join(out_dir, "manifest.json")
    write_json(manifest, {
        "schema_version": MANIFEST_VERSION,
        "source": source,
        "frames": hcfg.frames_per_sequence,
        "seed": seed,
        "sequences": entries,
    })
    log.info("Wrote %d-sequence %s dataset to %s", count, source, out_dir)
    return manifest
