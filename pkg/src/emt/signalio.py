"""Trial ingestion, on-disk formats, and synthetic EEG generation.

A trial file is a fixed 64-byte little-endian header followed by the
channel-major float32 payload and, for regression trials, a float32
annotation block.  Trial metadata that does not fit the header
(channel names, trial id, split) lives in a JSON-lines manifest.
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"EMTR"
VERSION = 1
HEADER = struct.Struct("<4sHHIQIidQ20x")
assert HEADER.size == 64

LABEL_CLASS = 0
LABEL_TRACK = 1

# Kept local so signalio has no dependency on the feature module.
BAND_EDGES = {
    "delta": (1.0, 4.0),
    "theta": (4.0, 8.0),
    "alpha": (8.0, 12.0),
    "low_beta": (12.0, 16.0),
    "beta": (16.0, 20.0),
    "high_beta": (20.0, 28.0),
    "gamma": (30.0, 45.0),
}


class SignalIOError(Exception):
    """Base class for trial I/O failures; ``code`` identifies the failure kind."""

    code = "signalio_error"


class TrialFormatError(SignalIOError):
    code = "malformed_header"


class ChannelMismatchError(SignalIOError):
    code = "channel_mismatch"


class NaNPayloadError(SignalIOError):
    code = "nan_payload"


class ManifestError(SignalIOError):
    code = "bad_manifest"


def annotation_length(n_samples: int, fs: int, a_fs: float) -> int:
    return int(math.ceil(n_samples / fs * a_fs - 1e-9))


@dataclass
class RawTrial:
    """One multichannel recording with its label payload.

    ``label`` is an ``int`` class id for classification trials or a 1-D
    float array sampled at ``a_fs`` Hz for regression trials.
    """

    data: np.ndarray
    fs: int
    label: int | np.ndarray
    channel_names: list[str]
    trial_id: str
    a_fs: float | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or self.data.shape[0] < 2:
            raise ValueError(f"trial data must be (c >= 2, L), got {self.data.shape}")
        if int(self.fs) != self.fs or self.fs <= 0:
            raise ValueError(f"fs must be a positive integer, got {self.fs}")
        self.fs = int(self.fs)
        if len(self.channel_names) != self.data.shape[0]:
            raise ChannelMismatchError(
                f"{len(self.channel_names)} channel names for {self.data.shape[0]} channels"
            )
        if not np.all(np.isfinite(self.data)):
            raise NaNPayloadError(f"trial {self.trial_id}: non-finite samples in data")
        if self.is_track:
            if self.a_fs is None or self.a_fs <= 0:
                raise ValueError("annotation track requires a positive a_fs")
            self.label = np.asarray(self.label)
            expected = annotation_length(self.n_samples, self.fs, self.a_fs)
            if self.label.shape != (expected,):
                raise ValueError(
                    f"annotation length {self.label.shape} != expected ({expected},)"
                )
        else:
            if int(self.label) != self.label or self.label < 0:
                raise ValueError(f"class label must be a non-negative int, got {self.label}")
            self.label = int(self.label)

    @property
    def is_track(self) -> bool:
        return isinstance(self.label, np.ndarray) or (
            not isinstance(self.label, (int, np.integer))
        )

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]


def save_trial(trial: RawTrial, path: str | Path) -> None:
    data = np.ascontiguousarray(trial.data, dtype="<f4")
    c, n = data.shape
    if trial.is_track:
        ann = np.ascontiguousarray(trial.label, dtype="<f4")
        header = HEADER.pack(MAGIC, VERSION, LABEL_TRACK, c, n, trial.fs, -1,
                             float(trial.a_fs), ann.size)
    else:
        ann = np.zeros(0, dtype="<f4")
        header = HEADER.pack(MAGIC, VERSION, LABEL_CLASS, c, n, trial.fs,
                             int(trial.label), 0.0, 0)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())
        fh.write(ann.tobytes())


def load_trial(path: str | Path, manifest_entry: dict) -> RawTrial:
    """Read a trial file and attach manifest metadata.

    Raises
    ------
    TrialFormatError
        Bad magic/version, truncated file, or a header inconsistent with
        the manifest label kind.
    ChannelMismatchError
        Channel count in the file disagrees with the manifest.
    NaNPayloadError
        The payload holds NaN or Inf samples.
    """
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise TrialFormatError(f"{path}: file shorter than header")
    magic, version, kind, c, n, fs, class_id, a_fs, n_ann = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise TrialFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise TrialFormatError(f"{path}: unsupported version {version}")
    if kind not in (LABEL_CLASS, LABEL_TRACK):
        raise TrialFormatError(f"{path}: unknown label kind {kind}")
    expected_c = manifest_entry.get("c")
    if expected_c is not None and int(expected_c) != c:
        raise ChannelMismatchError(f"{path}: file has c={c}, manifest says c={expected_c}")
    names = manifest_entry.get("channel_names") or default_channel_names(c)
    if len(names) != c:
        raise ChannelMismatchError(f"{path}: {len(names)} channel names for c={c}")
    want = HEADER.size + 4 * (c * n + n_ann)
    if len(raw) != want:
        raise TrialFormatError(f"{path}: size {len(raw)} bytes, header implies {want}")
    data = np.frombuffer(raw, dtype="<f4", count=c * n, offset=HEADER.size).reshape(c, n)
    ann = np.frombuffer(raw, dtype="<f4", count=n_ann, offset=HEADER.size + 4 * c * n)
    if not np.all(np.isfinite(data)) or not np.all(np.isfinite(ann)):
        raise NaNPayloadError(f"{path}: non-finite samples in payload")
    label_desc = manifest_entry.get("label", {})
    if label_desc.get("kind", "class" if kind == LABEL_CLASS else "track") != (
        "class" if kind == LABEL_CLASS else "track"
    ):
        raise TrialFormatError(f"{path}: label kind disagrees with manifest")
    if kind == LABEL_CLASS:
        label, track_fs = int(class_id), None
    else:
        label, track_fs = ann.copy(), a_fs
    return RawTrial(
        data=data.copy(),
        fs=fs,
        label=label,
        channel_names=list(names),
        trial_id=manifest_entry.get("trial_id", Path(path).stem),
        a_fs=track_fs,
    )


def default_channel_names(c: int) -> list[str]:
    return [f"ch{i:02d}" for i in range(c)]


# --------------------------------------------------------------------------
# manifest


@dataclass
class DatasetManifest:
    """Trials of one dataset; serialized as JSON lines, one trial per line."""

    entries: list[dict]
    fs: int
    c: int
    task: str
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        if self.task not in ("classification", "regression"):
            raise ManifestError(f"unknown task {self.task!r}")
        ids = [e["trial_id"] for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate trial_id in manifest")
        for e in self.entries:
            if e.get("split", "train") not in ("train", "val", "test"):
                raise ManifestError(f"bad split {e.get('split')!r} for {e['trial_id']}")

    def split(self, name: str) -> list[dict]:
        return [e for e in self.entries if e.get("split") == name]

    def trial_path(self, entry: dict) -> Path:
        return self.root / entry["path"]

    def load(self, entry: dict) -> RawTrial:
        return load_trial(self.trial_path(entry), entry)

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps(e, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        entries = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    entries.append(json.loads(line))
        if not entries:
            raise ManifestError(f"{path}: empty manifest")
        for key in ("fs", "c", "task"):
            vals = {e[key] for e in entries}
            if len(vals) != 1:
                raise ManifestError(f"{path}: trials disagree on {key}: {sorted(vals)}")
        return cls(entries=entries, fs=entries[0]["fs"], c=entries[0]["c"],
                   task=entries[0]["task"], root=path.parent)


# --------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    """Parameters for a synthetic dataset with planted, learnable structure.

    For classification ``n_trials`` is per class; class ``k`` carries a tone
    in ``planted_bands[k]``.  For regression a smooth latent trajectory
    amplitude-modulates a ``tone_hz`` component.  ``snr`` is the RMS ratio of
    the planted tone to the unit-RMS background; ``math.inf`` removes the
    background entirely.
    """

    task: str = "classification"
    n_trials: int = 40
    n_classes: int = 2
    c: int = 32
    fs: int = 128
    duration: float = 60.0
    planted_bands: tuple[str, ...] = ("alpha", "gamma")
    planted_channels: tuple[int, ...] | None = None
    snr: float = 2.0
    seed: int = 0
    cutoff_hz: float = 0.05
    a_fs: float = 4.0
    tone_hz: float = 10.0
    n_sines: int = 40
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def __post_init__(self):
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.planted_channels is None:
            self.planted_channels = tuple(range(max(1, self.c // 4)))
        self.planted_channels = tuple(int(ch) for ch in self.planted_channels)
        self.planted_bands = tuple(self.planted_bands)
        self.split_fractions = tuple(self.split_fractions)
        if not self.planted_channels or any(not 0 <= ch < self.c for ch in self.planted_channels):
            raise ValueError(f"planted channels {self.planted_channels} outside [0, {self.c})")
        if not self.snr > 0:
            raise ValueError("snr must be > 0")
        if self.c < 2 or self.fs <= 0 or self.n_trials < 1:
            raise ValueError("need c >= 2, fs > 0, n_trials >= 1")
        if self.task == "classification":
            if self.n_classes < 2:
                raise ValueError("need at least 2 classes")
            if len(self.planted_bands) < self.n_classes:
                raise ValueError("one planted band per class required")
            for b in self.planted_bands[: self.n_classes]:
                if b not in BAND_EDGES:
                    raise ValueError(f"unknown band {b!r}")
                if BAND_EDGES[b][1] >= self.fs / 2:
                    raise ValueError(f"band {b} above Nyquist for fs={self.fs}")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.fs))


def pink_background(rng: np.random.Generator, c: int, n: int, fs: int,
                    n_sines: int = 40) -> np.ndarray:
    """Sum of random-phase sinusoids with 1/f amplitude, unit RMS per channel.

    Frequencies are drawn without replacement from the trial's own Fourier
    grid (multiples of fs/n between 0.5 Hz and 48 Hz), so the sum is
    synthesized exactly with one inverse FFT per channel.
    """
    lo = int(np.ceil(0.5 * n / fs))
    hi = int(np.floor(min(48.0, 0.45 * fs) * n / fs))
    if hi - lo + 1 < n_sines:
        raise ValueError("trial too short to place the background sinusoids")
    bins = np.stack([rng.choice(np.arange(lo, hi + 1), size=n_sines, replace=False)
                     for _ in range(c)])
    phases = rng.uniform(0, 2 * np.pi, size=(c, n_sines))
    amps = 1.0 / (bins * fs / n)
    spec = np.zeros((c, n // 2 + 1), dtype=complex)
    # sin(x) = Re(exp(i (x - pi/2))); irfft scales a bin by 2/n
    np.put_along_axis(spec, bins, 0.5 * n * amps * np.exp(1j * (phases - np.pi / 2)), axis=1)
    out = np.fft.irfft(spec, n=n, axis=1)
    return out / np.sqrt(np.mean(out**2, axis=1, keepdims=True))


def _weights(snr: float) -> tuple[float, float]:
    """(background weight, tone RMS)."""
    if math.isinf(snr):
        return 0.0, 1.0
    return 1.0, float(snr)


def smooth_trajectory(rng: np.random.Generator, n: int, fs: int, cutoff_hz: float) -> np.ndarray:
    """Brick-wall low-passed standard noise, min-max rescaled to [0, 1]."""
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    spec[freqs > cutoff_hz] = 0.0
    y = np.fft.irfft(spec, n=n)
    lo, hi = y.min(), y.max()
    if hi - lo < 1e-12:
        return np.full(n, 0.5)
    return (y - lo) / (hi - lo)


def _trial_rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def synth_classification_trial(spec: SyntheticSpec, k: int, rng: np.random.Generator,
                               trial_id: str) -> RawTrial:
    n = spec.n_samples
    bg_w, tone_rms = _weights(spec.snr)
    data = bg_w * pink_background(rng, spec.c, n, spec.fs, spec.n_sines)
    f_lo, f_hi = BAND_EDGES[spec.planted_bands[k]]
    t = np.arange(n) / spec.fs
    freq = rng.uniform(f_lo + 0.5, f_hi - 0.5)
    for ch in spec.planted_channels:
        data[ch] += tone_rms * np.sqrt(2) * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    return RawTrial(data=data.astype(np.float32), fs=spec.fs, label=k,
                    channel_names=default_channel_names(spec.c), trial_id=trial_id)


def synth_regression_trial(spec: SyntheticSpec, rng: np.random.Generator,
                           trial_id: str) -> RawTrial:
    n = spec.n_samples
    bg_w, tone_rms = _weights(spec.snr)
    data = bg_w * pink_background(rng, spec.c, n, spec.fs, spec.n_sines)
    y = smooth_trajectory(rng, n, spec.fs, spec.cutoff_hz)
    t = np.arange(n) / spec.fs
    for ch in spec.planted_channels:
        tone = np.sin(2 * np.pi * spec.tone_hz * t + rng.uniform(0, 2 * np.pi))
        data[ch] += tone_rms * np.sqrt(2) * y * tone
    n_ann = annotation_length(n, spec.fs, spec.a_fs)
    idx = np.floor(np.arange(n_ann) * spec.fs / spec.a_fs).astype(int)
    return RawTrial(data=data.astype(np.float32), fs=spec.fs, label=y[idx].astype(np.float32),
                    channel_names=default_channel_names(spec.c), trial_id=trial_id,
                    a_fs=spec.a_fs)


def _assign_splits(rng: np.random.Generator, n: int,
                   fractions: Sequence[float]) -> list[str]:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    names = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)
    order = rng.permutation(n)
    out = [""] * n
    for pos, i in enumerate(order):
        out[i] = names[pos]
    return out


def synth_trials(spec: SyntheticSpec) -> tuple[list[RawTrial], list[str]]:
    """Generate all trials in memory, with a split name per trial.

    Classification splits are stratified per class.
    """
    split_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    if spec.task == "classification":
        total = spec.n_trials * spec.n_classes
        rngs = _trial_rngs(spec.seed, total)
        trials, splits = [], []
        for k in range(spec.n_classes):
            class_splits = _assign_splits(split_rng, spec.n_trials, spec.split_fractions)
            for j in range(spec.n_trials):
                i = k * spec.n_trials + j
                trials.append(synth_classification_trial(spec, k, rngs[i], f"clas-{i:04d}"))
                splits.append(class_splits[j])
        return trials, splits
    rngs = _trial_rngs(spec.seed, spec.n_trials)
    trials = [synth_regression_trial(spec, rngs[i], f"regr-{i:04d}") for i in range(spec.n_trials)]
    return trials, _assign_splits(split_rng, spec.n_trials, spec.split_fractions)


def _make_one(args):
    spec, i, k = args
    rng = _trial_rngs(spec.seed, spec.n_trials * (spec.n_classes if spec.task == "classification" else 1))[i]
    if spec.task == "classification":
        return synth_classification_trial(spec, k, rng, f"clas-{i:04d}")
    return synth_regression_trial(spec, rng, f"regr-{i:04d}")


def manifest_entry(trial: RawTrial, path: str, split: str, task: str) -> dict:
    if trial.is_track:
        label = {"kind": "track", "a_fs": float(trial.a_fs), "length": int(trial.label.size)}
    else:
        label = {"kind": "class", "value": int(trial.label)}
    return {
        "path": path,
        "trial_id": trial.trial_id,
        "label": label,
        "split": split,
        "fs": trial.fs,
        "c": trial.n_channels,
        "task": task,
        "channel_names": list(trial.channel_names),
    }


def _write_dataset(spec: SyntheticSpec, out_dir: str | Path, workers: int) -> DatasetManifest:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if workers > 1:
        split_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
        if spec.task == "classification":
            jobs = [(spec, k * spec.n_trials + j, k)
                    for k in range(spec.n_classes) for j in range(spec.n_trials)]
            splits = [s for _ in range(spec.n_classes)
                      for s in _assign_splits(split_rng, spec.n_trials, spec.split_fractions)]
        else:
            jobs = [(spec, i, None) for i in range(spec.n_trials)]
            splits = _assign_splits(split_rng, spec.n_trials, spec.split_fractions)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            trials = list(pool.map(_make_one, jobs))
    else:
        trials, splits = synth_trials(spec)
    entries = []
    for trial, split in zip(trials, splits):
        name = f"{trial.trial_id}.emtr"
        save_trial(trial, out_dir / name)
        entries.append(manifest_entry(trial, name, split, spec.task))
    manifest = DatasetManifest(entries=entries, fs=spec.fs, c=spec.c, task=spec.task, root=out_dir)
    manifest.write(out_dir / "manifest.jsonl")
    return manifest


def gen_synthetic_classification(spec: SyntheticSpec, out_dir: str | Path,
                                 workers: int = 1) -> DatasetManifest:
    if spec.task != "classification":
        raise ValueError("spec.task must be 'classification'")
    return _write_dataset(spec, out_dir, workers)


def gen_synthetic_regression(spec: SyntheticSpec, out_dir: str | Path,
                             workers: int = 1) -> DatasetManifest:
    if spec.task != "regression":
        raise ValueError("spec.task must be 'regression'")
    return _write_dataset(spec, out_dir, workers)
