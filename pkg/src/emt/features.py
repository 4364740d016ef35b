"""Feature extraction over a manifest and assembly of training samples.

Classification samples are one temporal graph per segment.  Regression
samples are fixed-length token windows cut from the sub-segment sequence
of a whole trial.
"""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .signalio import DatasetManifest, RawTrial
from .tgc import (BandSet, WelchConfig, WindowConfig, ZeroPowerWarning, config_dict,
                  load_features, n_windows, save_features, trial_graphs, trial_sequence)

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class FeatureData:
    """In-memory samples per split: ``X`` is (N, seq, c, f); ``y`` is (N,) or (N, seq)."""

    task: str
    splits: dict[str, tuple[np.ndarray, np.ndarray]]
    meta: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return next(x.shape[2] for x, _ in self.splits.values() if len(x))

    @property
    def n_feat(self) -> int:
        return next(x.shape[3] for x, _ in self.splits.values() if len(x))

    def get(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        if split not in self.splits or len(self.splits[split][0]) == 0:
            raise ValueError(f"split {split!r} is empty")
        return self.splits[split]


def sequence_windows(feats: np.ndarray, labels: np.ndarray, window: int = 96,
                     hop: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Cut a ``(n_sub, c, f)`` sequence into ``(n_win, window, c, f)``; tails are dropped."""
    count = n_windows(feats.shape[0], window, hop)
    if count == 0:
        return (np.zeros((0, window) + feats.shape[1:], feats.dtype),
                np.zeros((0, window), labels.dtype))
    idx = np.arange(count)[:, None] * hop + np.arange(window)[None, :]
    return feats[idx], labels[idx]


def _trial_features(trial: RawTrial, task: str, cfg: WindowConfig, bands: BandSet,
                    welch_cfg: WelchConfig, kind: str):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZeroPowerWarning)
        if task == "classification":
            return trial_graphs(trial, cfg, bands, welch_cfg, kind)
        return [trial_sequence(trial, cfg, bands, welch_cfg, kind)]


def _extract_one(args):
    manifest, entry, cfg, bands, welch_cfg, kind = args
    return _trial_features(manifest.load(entry), manifest.task, cfg, bands, welch_cfg, kind)


def extract_manifest(manifest: DatasetManifest, cfg: WindowConfig, out_dir: str | Path,
                     bands: BandSet = BandSet(), welch_cfg: WelchConfig = WelchConfig(),
                     kind: str = "rpsd", workers: int = 1) -> Path:
    """Write one feature file per trial plus a ``features.jsonl`` index."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(manifest, e, cfg, bands, welch_cfg, kind) for e in manifest.entries]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_extract_one, jobs))
    else:
        results = [_extract_one(j) for j in jobs]
    meta = config_dict(cfg, bands, welch_cfg, kind)
    index = out_dir / "features.jsonl"
    with open(index, "w", encoding="utf-8") as fh:
        for entry, graphs in zip(manifest.entries, results):
            name = f"{entry['trial_id']}.emtf"
            save_features(graphs, out_dir / name, {**meta, "split": entry["split"]})
            n_zero = sum(len(g.zero_power) for g in graphs)
            if n_zero:
                log.warning("%s: %d zero-power node(s) set to 0", entry["trial_id"], n_zero)
            fh.write(json.dumps({
                "file": name, "trial_id": entry["trial_id"], "split": entry["split"],
                "task": manifest.task, "n": len(graphs), "seq": int(graphs[0].seq),
                "c": int(graphs[0].features.shape[1]), "f": int(graphs[0].features.shape[2]),
            }, sort_keys=True) + "\n")
    (out_dir / "features.config.json").write_text(
        json.dumps({**meta, "task": manifest.task}, indent=1, sort_keys=True), encoding="utf-8")
    return index


def _assemble(task: str, per_trial: list[tuple[str, np.ndarray, np.ndarray]],
              window: int, hop: int) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    buckets: dict[str, list] = {s: [] for s in SPLITS}
    for split, feats, labels in per_trial:
        if task == "classification":
            buckets[split].append((feats, labels.reshape(-1).astype(np.int64)))
        else:
            buckets[split].append(sequence_windows(feats[0], labels[0], window, hop))
    out = {}
    for split, parts in buckets.items():
        if parts:
            out[split] = (np.concatenate([p[0] for p in parts]).astype(np.float32),
                          np.concatenate([p[1] for p in parts]))
    return out


def load_feature_data(features_dir: str | Path, window: int = 96, hop: int = 32) -> FeatureData:
    features_dir = Path(features_dir)
    rows = [json.loads(line) for line in
            (features_dir / "features.jsonl").read_text(encoding="utf-8").splitlines() if line]
    if not rows:
        raise ValueError(f"{features_dir}: no feature files listed")
    task = rows[0]["task"]
    per_trial = []
    for row in rows:
        feats, labels, _ = load_features(features_dir / row["file"])
        per_trial.append((row["split"], feats, labels))
    meta = {"features_dir": str(features_dir.resolve()), "window": window, "hop": hop}
    return FeatureData(task=task, splits=_assemble(task, per_trial, window, hop), meta=meta)


def features_from_trials(trials: list[RawTrial], splits: list[str], task: str,
                         cfg: WindowConfig, bands: BandSet = BandSet(),
                         welch_cfg: WelchConfig = WelchConfig(), kind: str = "rpsd",
                         window: int = 96, hop: int = 32) -> FeatureData:
    """The in-memory equivalent of extract + load, used by tests and experiments."""
    per_trial = []
    for trial, split in zip(trials, splits):
        graphs = _trial_features(trial, task, cfg, bands, welch_cfg, kind)
        feats = np.stack([g.features for g in graphs]).astype(np.float32)
        if task == "classification":
            labels = np.array([g.label for g in graphs], dtype=np.float32)
        else:
            labels = np.stack([np.asarray(g.label) for g in graphs]).astype(np.float32)
        per_trial.append((split, feats, labels))
    return FeatureData(task=task, splits=_assemble(task, per_trial, window, hop),
                       meta={"window": window, "hop": hop})
