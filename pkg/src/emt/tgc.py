"""Temporal graph construction.

Trials are cut into segments, segments into sub-segments, and every
sub-segment becomes one graph whose node attributes are per-channel
relative band powers.  Stacking the graphs of one segment in time order
gives a ``(seq, c, f)`` tensor.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal as sp_signal

from .signalio import RawTrial

DEFAULT_BANDS: tuple[tuple[str, float, float], ...] = (
    ("delta", 1.0, 4.0),
    ("theta", 4.0, 8.0),
    ("alpha", 8.0, 12.0),
    ("low_beta", 12.0, 16.0),
    ("beta", 16.0, 20.0),
    ("high_beta", 20.0, 28.0),
    ("gamma", 30.0, 45.0),
)
TOTAL_POWER_RANGE = (1.0, 45.0)
FEATURE_KINDS = ("rpsd", "psd", "de")


class SegmentationError(ValueError):
    """Signal too short to yield a single window."""


class ZeroPowerWarning(UserWarning):
    """A channel had no power in the analysis range; its feature row is zero."""


def _to_samples(seconds: float, fs: int, what: str) -> int:
    n = seconds * fs
    if abs(n - round(n)) > 1e-9:
        raise ValueError(f"{what}={seconds}s is not a whole number of samples at fs={fs}")
    return int(round(n))


@dataclass(frozen=True)
class WindowConfig:
    """Two-level sliding-window constants, in seconds."""

    fs: int
    l: float = 20.0
    s: float = 4.0
    l_sub: float = 2.0
    s_sub: float = 0.5

    def __post_init__(self):
        if not self.l >= self.l_sub > 0:
            raise ValueError(f"need l >= l_sub > 0, got l={self.l}, l_sub={self.l_sub}")
        if self.s <= 0 or self.s_sub <= 0:
            raise ValueError("hops must be positive")
        for name in ("l", "s", "l_sub", "s_sub"):
            _to_samples(getattr(self, name), self.fs, name)

    @property
    def seg_len(self) -> int:
        return _to_samples(self.l, self.fs, "l")

    @property
    def seg_hop(self) -> int:
        return _to_samples(self.s, self.fs, "s")

    @property
    def sub_len(self) -> int:
        return _to_samples(self.l_sub, self.fs, "l_sub")

    @property
    def sub_hop(self) -> int:
        return _to_samples(self.s_sub, self.fs, "s_sub")

    @property
    def seq(self) -> int:
        return n_windows(self.seg_len, self.sub_len, self.sub_hop)


@dataclass(frozen=True)
class BandSet:
    bands: tuple[tuple[str, float, float], ...] = DEFAULT_BANDS

    def __post_init__(self):
        for name, lo, hi in self.bands:
            if not lo < hi:
                raise ValueError(f"band {name}: f_lo must be < f_hi")
        spans = sorted((lo, hi) for _, lo, hi in self.bands)
        for (_, hi0), (lo1, _) in zip(spans, spans[1:]):
            if lo1 < hi0:
                raise ValueError("bands overlap")

    @property
    def names(self) -> list[str]:
        return [b[0] for b in self.bands]

    def __len__(self) -> int:
        return len(self.bands)

    def check_nyquist(self, fs: int) -> None:
        top = max(hi for _, _, hi in self.bands)
        if top > fs / 2:
            raise ValueError(f"band edge {top} Hz above Nyquist for fs={fs}")


@dataclass(frozen=True)
class WelchConfig:
    window_sec: float = 1.0
    overlap: float = 0.5
    window: str = "hann"
    detrend: str = "constant"


@dataclass
class TemporalGraph:
    """Node features of one segment: ``features`` is ``(seq, c, f)``.

    ``label`` is a class id, or a length-``seq`` float vector for regression.
    """

    features: np.ndarray
    trial_id: str
    start: int
    label: int | np.ndarray
    zero_power: list[tuple[int, int]] = field(default_factory=list)

    @property
    def seq(self) -> int:
        return self.features.shape[0]


def n_windows(n: int, win: int, hop: int) -> int:
    if n < win:
        return 0
    return (n - win) // hop + 1


def window_starts(n: int, win: int, hop: int) -> np.ndarray:
    count = n_windows(n, win, hop)
    if count == 0:
        raise SegmentationError(f"signal of {n} samples shorter than window of {win}")
    return np.arange(count) * hop


def _windows(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    starts = window_starts(x.shape[-1], win, hop)
    view = np.lib.stride_tricks.sliding_window_view(x, win, axis=-1)[..., ::hop, :]
    view = view[..., : len(starts), :]
    # (c, n_win, win) -> (n_win, c, win)
    return np.moveaxis(view, -2, 0)


def segment(trial: RawTrial, cfg: WindowConfig) -> np.ndarray:
    """Segments of a trial in time order, shape ``(n_seg, c, l*fs)``.

    The trailing remainder that does not fill a window is dropped.
    """
    if trial.fs != cfg.fs:
        raise ValueError(f"trial fs={trial.fs} but window config fs={cfg.fs}")
    return _windows(trial.data, cfg.seg_len, cfg.seg_hop)


def subsegment(seg: np.ndarray, cfg: WindowConfig) -> np.ndarray:
    """Sub-segments of one segment, shape ``(seq, c, l_sub*fs)``."""
    return _windows(seg, cfg.sub_len, cfg.sub_hop)


def welch_psd(x: np.ndarray, fs: int, cfg: WelchConfig = WelchConfig()):
    """One-sided Welch PSD (density scaling) along the last axis.

    Returns ``(freqs, psd)``.  An all-zero input yields an all-zero PSD.
    """
    x = np.asarray(x, dtype=np.float64)
    nperseg = int(round(cfg.window_sec * fs))
    if x.shape[-1] < nperseg:
        raise ValueError(f"signal length {x.shape[-1]} shorter than Welch window {nperseg}")
    return sp_signal.welch(
        x, fs=fs, window=cfg.window, nperseg=nperseg,
        noverlap=int(round(cfg.overlap * nperseg)), detrend=cfg.detrend,
        scaling="density", axis=-1,
    )


def band_masks(freqs: np.ndarray, bands: BandSet) -> np.ndarray:
    """Boolean ``(f, n_freq)`` masks; a bin on a shared edge goes to the upper band."""
    return np.stack([(freqs >= lo) & (freqs < hi) for _, lo, hi in bands.bands])


def rpsd_features(sub: np.ndarray, fs: int, bands: BandSet = BandSet(),
                  welch_cfg: WelchConfig = WelchConfig(), kind: str = "rpsd") -> np.ndarray:
    """Per-channel band features of ``sub`` (``(..., n_samples)``) -> ``(..., f)``.

    ``rpsd`` divides each band's power by the total 1-45 Hz power.  Rows
    with no power in that range are zero and raise a ``ZeroPowerWarning``.
    ``psd`` and ``de`` give absolute band power and differential entropy.
    """
    if kind not in FEATURE_KINDS:
        raise ValueError(f"unknown feature kind {kind!r}")
    bands.check_nyquist(fs)
    freqs, psd = welch_psd(sub, fs, welch_cfg)
    df = freqs[1] - freqs[0]
    masks = band_masks(freqs, bands).astype(np.float64)
    band_power = psd @ masks.T * df
    if kind == "psd":
        return band_power
    if kind == "de":
        return 0.5 * np.log(2 * np.pi * np.e * np.maximum(band_power, 1e-30))
    lo, hi = TOTAL_POWER_RANGE
    total = psd[..., (freqs >= lo) & (freqs < hi)].sum(axis=-1) * df
    dead = total <= np.finfo(np.float64).tiny
    if np.any(dead):
        warnings.warn(f"{int(dead.sum())} zero-power channel(s); feature rows set to 0",
                      ZeroPowerWarning, stacklevel=2)
    safe = np.where(dead, 1.0, total)
    return np.where(dead[..., None], 0.0, band_power / safe[..., None])


def subsegment_labels(track: np.ndarray, a_fs: float, starts: np.ndarray,
                      sub_len: int, fs: int) -> np.ndarray:
    """Mean annotation value inside each sub-segment window.

    Windows that contain no annotation sample take the nearest sample.
    """
    track = np.asarray(track, dtype=np.float64)
    times = np.arange(track.size) / a_fs
    out = np.empty(len(starts))
    for i, st in enumerate(starts):
        t0, t1 = st / fs, (st + sub_len) / fs
        inside = (times >= t0) & (times < t1)
        if inside.any():
            out[i] = track[inside].mean()
        else:
            mid = 0.5 * (t0 + t1)
            out[i] = track[int(np.argmin(np.abs(times - mid)))]
    return out


def build_temporal_graph(seg: np.ndarray, cfg: WindowConfig, bands: BandSet = BandSet(),
                         label_source=0, start: int = 0, trial_id: str = "",
                         welch_cfg: WelchConfig = WelchConfig(),
                         kind: str = "rpsd") -> TemporalGraph:
    """Stack sub-segment features of one segment in time order.

    ``label_source`` is a class id, or ``(track, a_fs)`` for regression, in
    which case ``start`` (the segment's first sample within the trial)
    aligns the track with the sub-segments.
    """
    subs = subsegment(seg, cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ZeroPowerWarning)
        feats = rpsd_features(subs, cfg.fs, bands, welch_cfg, kind)
    zero = []
    if kind == "rpsd" and caught:
        zero = [tuple(map(int, ix)) for ix in np.argwhere(~feats.any(axis=-1))]
        warnings.warn(f"{trial_id or 'segment'}@{start}: {len(zero)} zero-power node(s)",
                      ZeroPowerWarning, stacklevel=2)
    if isinstance(label_source, tuple):
        track, a_fs = label_source
        sub_starts = start + window_starts(seg.shape[-1], cfg.sub_len, cfg.sub_hop)
        label = subsegment_labels(track, a_fs, sub_starts, cfg.sub_len, cfg.fs)
    else:
        label = int(label_source)
    return TemporalGraph(features=feats, trial_id=trial_id, start=int(start),
                         label=label, zero_power=zero)


def trial_label_source(trial: RawTrial):
    return (trial.label, trial.a_fs) if trial.is_track else trial.label


def trial_graphs(trial: RawTrial, cfg: WindowConfig, bands: BandSet = BandSet(),
                 welch_cfg: WelchConfig = WelchConfig(), kind: str = "rpsd") -> list[TemporalGraph]:
    """One temporal graph per segment of the trial (classification samples).

    When the segment hop is a multiple of the sub-segment hop, overlapping
    segments share sub-segments, so features are computed once on the
    trial-level sub-segment grid and sliced.
    """
    segs = segment(trial, cfg)
    starts = window_starts(trial.n_samples, cfg.seg_len, cfg.seg_hop)
    src = trial_label_source(trial)
    if cfg.seg_hop % cfg.sub_hop or isinstance(src, tuple):
        return [build_temporal_graph(seg, cfg, bands, src, int(st), trial.trial_id, welch_cfg, kind)
                for seg, st in zip(segs, starts)]
    ratio = cfg.seg_hop // cfg.sub_hop
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZeroPowerWarning)
        full = rpsd_features(_windows(trial.data, cfg.sub_len, cfg.sub_hop), cfg.fs, bands,
                             welch_cfg, kind)
    graphs = []
    for j, st in enumerate(starts):
        feats = full[j * ratio: j * ratio + cfg.seq]
        zero = []
        if kind == "rpsd":
            zero = [tuple(map(int, ix)) for ix in np.argwhere(~feats.any(axis=-1))]
        graphs.append(TemporalGraph(features=feats, trial_id=trial.trial_id, start=int(st),
                                    label=int(src), zero_power=zero))
    if any(g.zero_power for g in graphs):
        warnings.warn(f"{trial.trial_id}: zero-power nodes present", ZeroPowerWarning, stacklevel=2)
    return graphs


def trial_sequence(trial: RawTrial, cfg: WindowConfig, bands: BandSet = BandSet(),
                   welch_cfg: WelchConfig = WelchConfig(), kind: str = "rpsd") -> TemporalGraph:
    """The whole trial as one long sub-segment sequence (regression samples)."""
    if trial.fs != cfg.fs:
        raise ValueError(f"trial fs={trial.fs} but window config fs={cfg.fs}")
    return build_temporal_graph(trial.data, cfg, bands, trial_label_source(trial), 0,
                                trial.trial_id, welch_cfg, kind)


# --------------------------------------------------------------------------
# feature files

FEAT_MAGIC = b"EMTF"
FEAT_VERSION = 1
FEAT_HEADER = struct.Struct("<4sHHIIIII8x")
assert FEAT_HEADER.size == 36


class FeatureFormatError(ValueError):
    pass


def save_features(graphs: Sequence[TemporalGraph], path: str | Path, meta: dict | None = None) -> None:
    """Write graphs of one trial; provenance goes to ``<path>.json``."""
    if not graphs:
        raise ValueError("no graphs to write")
    feats = np.stack([g.features for g in graphs]).astype("<f4")
    n, seq, c, f = feats.shape
    regression = not isinstance(graphs[0].label, (int, np.integer))
    if regression:
        labels = np.stack([np.asarray(g.label) for g in graphs]).astype("<f4")
    else:
        labels = np.array([[g.label] for g in graphs], dtype="<f4")
    header = FEAT_HEADER.pack(FEAT_MAGIC, FEAT_VERSION, int(regression), n, seq, c, f,
                              labels.shape[1])
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(feats.tobytes())
        fh.write(labels.tobytes())
    side = {
        "trial_id": graphs[0].trial_id,
        "starts": [g.start for g in graphs],
        "zero_power": [[list(z) for z in g.zero_power] for g in graphs],
        **(meta or {}),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(side, indent=1, sort_keys=True),
                                                       encoding="utf-8")


def load_features(path: str | Path) -> tuple[np.ndarray, np.ndarray, dict]:
    """Returns ``(features (n, seq, c, f), labels (n, w), sidecar)``."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < FEAT_HEADER.size:
        raise FeatureFormatError(f"{path}: truncated header")
    magic, version, kind, n, seq, c, f, w = FEAT_HEADER.unpack_from(raw)
    if magic != FEAT_MAGIC or version != FEAT_VERSION:
        raise FeatureFormatError(f"{path}: not a feature file")
    count = n * seq * c * f
    if len(raw) != FEAT_HEADER.size + 4 * (count + n * w):
        raise FeatureFormatError(f"{path}: size does not match header")
    feats = np.frombuffer(raw, "<f4", count, FEAT_HEADER.size).reshape(n, seq, c, f)
    labels = np.frombuffer(raw, "<f4", n * w, FEAT_HEADER.size + 4 * count).reshape(n, w)
    side_path = path.with_suffix(path.suffix + ".json")
    side = json.loads(side_path.read_text(encoding="utf-8")) if side_path.exists() else {}
    side["regression"] = bool(kind)
    return feats.copy(), labels.copy(), side


def config_dict(cfg: WindowConfig, bands: BandSet, welch_cfg: WelchConfig, kind: str) -> dict:
    return {"window": asdict(cfg), "bands": [list(b) for b in bands.bands],
            "welch": asdict(welch_cfg), "kind": kind}
