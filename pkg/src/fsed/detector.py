"""Few-shot inference: prototypes, windowed distance sweeps, thresholding.

A k-shot support set is embedded and averaged into a prototype. Query audio
is swept with 100-frame windows at a 20-frame hop; each window's embedding
distance to the prototype is compared against a per-class threshold sigma,
and runs of below-threshold windows become time-stamped detection events.
Sigma is tuned on an annotated dev set by maximizing event-based F1 over a
quantile grid of candidate values.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import FeatureConfig, MelFeatures, extract_features, read_wav
from .embedding import NetworkParams, forward_batch
from .errors import (
    EmptyDevSetError,
    EmptySupportError,
    InvalidConfigError,
    InvalidDistanceError,
    ManifestError,
    ShapeMismatchError,
    TooShortError,
)
from .evaluator import Event, match_events

DEFAULT_WINDOW_FRAMES = 100
DEFAULT_WINDOW_HOP_FRAMES = 20
DEFAULT_MIN_GAP_WINDOWS = 1
DEFAULT_MIN_LEN_WINDOWS = 1
THRESHOLD_GRID_POINTS = 101


@dataclass
class SupportSet:
    """k feature windows, each centered on one onset of the target class."""

    examples: list[MelFeatures]
    class_name: str

    def __post_init__(self):
        if not self.examples:
            raise EmptySupportError("support set needs at least one example")
        t0 = self.examples[0].values.shape
        for ex in self.examples:
            if ex.values.shape != t0:
                raise ShapeMismatchError("support windows must share one shape")

    @property
    def k(self) -> int:
        return len(self.examples)


@dataclass
class Prototype:
    mu: np.ndarray
    k: int
    class_name: str

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        if not np.all(np.isfinite(self.mu)):
            raise InvalidDistanceError("prototype contains non-finite values")


@dataclass
class DistanceSequence:
    """Per-window prototype distances over one query clip.

    Window i covers frames [i*hop, i*hop + window_frames); its timestamp is
    the window center, so time_of(0) = origin_s = window_frames/2 * frame
    hop (0.5 s under defaults).
    """

    values: np.ndarray
    frame_hop_s: float
    window_hop_frames: int = DEFAULT_WINDOW_HOP_FRAMES
    window_frames: int = DEFAULT_WINDOW_FRAMES
    origin_s: float | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ShapeMismatchError("distance sequence must be 1-D")
        if np.any(self.values < 0):
            raise InvalidDistanceError("distances must be non-negative")
        if self.origin_s is None:
            self.origin_s = (self.window_frames / 2) * self.frame_hop_s

    def time_of(self, index: int) -> float:
        return self.origin_s + index * self.window_hop_frames * self.frame_hop_s

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class DetectionEvent:
    onset_s: float
    offset_s: float
    class_name: str
    score: float  # min distance within the run; lower = stronger

    def __post_init__(self):
        if self.onset_s > self.offset_s:
            raise InvalidConfigError("event onset must not exceed offset")
        if self.score < 0:
            raise InvalidDistanceError("score must be non-negative")

    @property
    def confidence(self) -> float:
        """Higher-is-better alias for tools that expect that orientation."""
        return -self.score


def compute_prototype(params: NetworkParams, support: SupportSet) -> Prototype:
    """Mean of the embedded support examples."""
    stacked = np.stack([ex.values for ex in support.examples])
    emb, _ = forward_batch(params, stacked)
    return Prototype(mu=emb.mean(axis=0), k=support.k, class_name=support.class_name)


def prototype_from_embeddings(embeddings: np.ndarray, class_name: str) -> Prototype:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] < 1:
        raise EmptySupportError("need a (k, dim) embedding array with k >= 1")
    return Prototype(mu=embeddings.mean(axis=0), k=embeddings.shape[0],
                     class_name=class_name)


def embed_windows(
    params: NetworkParams,
    query: MelFeatures,
    window_frames: int = DEFAULT_WINDOW_FRAMES,
    window_hop_frames: int = DEFAULT_WINDOW_HOP_FRAMES,
) -> np.ndarray:
    """Embeddings for every window position, shape (n_windows, embed_dim).

    Shared across classes: window embeddings do not depend on the prototype,
    so multi-class sweeps embed once and reuse.
    """
    t = query.n_frames
    if t < window_frames:
        raise TooShortError(f"query has {t} frames, needs >= {window_frames}")
    windows = np.lib.stride_tricks.sliding_window_view(
        query.values, window_frames, axis=1
    )[:, ::window_hop_frames]  # (F, n_windows, window_frames)
    batch = np.ascontiguousarray(windows.transpose(1, 0, 2))
    emb, _ = forward_batch(params, batch)
    return emb.astype(np.float64)


def distance_sequence(
    params: NetworkParams,
    proto: Prototype,
    query: MelFeatures,
    window_frames: int = DEFAULT_WINDOW_FRAMES,
    window_hop_frames: int = DEFAULT_WINDOW_HOP_FRAMES,
) -> DistanceSequence:
    """Distance to the prototype at every window position."""
    emb = embed_windows(params, query, window_frames, window_hop_frames)
    return distances_from_embeddings(emb, proto, query.frame_hop_s,
                                     window_frames, window_hop_frames)


def distances_from_embeddings(
    window_embeddings: np.ndarray,
    proto: Prototype,
    frame_hop_s: float,
    window_frames: int = DEFAULT_WINDOW_FRAMES,
    window_hop_frames: int = DEFAULT_WINDOW_HOP_FRAMES,
) -> DistanceSequence:
    values = np.linalg.norm(window_embeddings - proto.mu[None, :], axis=1)
    return DistanceSequence(
        values=values,
        frame_hop_s=frame_hop_s,
        window_hop_frames=window_hop_frames,
        window_frames=window_frames,
        origin_s=(window_frames / 2) * frame_hop_s,
    )


def detect_events(
    ds: DistanceSequence,
    sigma: float,
    class_name: str,
    min_gap_windows: int = DEFAULT_MIN_GAP_WINDOWS,
    min_len_windows: int = DEFAULT_MIN_LEN_WINDOWS,
) -> list[DetectionEvent]:
    """Threshold the distance curve and merge positive windows into events.

    Windows with D < sigma are positive. A run extends from one positive
    window to the next as long as the gap between them is at most
    min_gap_windows; runs spanning fewer than min_len_windows windows are
    dropped. Onset/offset are the timestamps of the run's first and last
    positive windows; score is the minimum distance inside the run.
    """
    if sigma <= 0:
        raise InvalidConfigError(f"sigma must be positive, got {sigma}")
    if min_gap_windows < 0 or min_len_windows < 1:
        raise InvalidConfigError("min_gap_windows >= 0 and min_len_windows >= 1")
    positives = np.flatnonzero(ds.values < sigma)
    if len(positives) == 0:
        return []
    runs: list[tuple[int, int]] = []
    start = prev = int(positives[0])
    for idx in positives[1:]:
        idx = int(idx)
        if idx - prev - 1 <= min_gap_windows:
            prev = idx
        else:
            runs.append((start, prev))
            start = prev = idx
    runs.append((start, prev))
    events = []
    for lo, hi in runs:
        if hi - lo + 1 < min_len_windows:
            continue
        events.append(
            DetectionEvent(
                onset_s=ds.time_of(lo),
                offset_s=ds.time_of(hi),
                class_name=class_name,
                score=float(ds.values[lo:hi + 1].min()),
            )
        )
    return events


def tune_threshold(
    distance_curves: dict[str, list[tuple[str, DistanceSequence]]],
    truth: list[Event],
    collar_s: float = 0.5,
    n_grid: int = THRESHOLD_GRID_POINTS,
    min_gap_windows: int = DEFAULT_MIN_GAP_WINDOWS,
    min_len_windows: int = DEFAULT_MIN_LEN_WINDOWS,
) -> dict[str, float]:
    """Per-class sigma maximizing event-based F1 on the dev set.

    distance_curves maps class name -> [(clip_id, DistanceSequence), ...].
    Candidates are the n_grid quantiles of that class's pooled dev
    distances; ties are broken toward the smaller sigma (fewer detections).
    """
    sigmas: dict[str, float] = {}
    for class_name, curves in distance_curves.items():
        if not curves:
            raise EmptyDevSetError(f"no dev clips for class {class_name!r}")
        pooled = np.concatenate([ds.values for _, ds in curves])
        grid = np.unique(np.quantile(pooled, np.linspace(0.0, 1.0, n_grid)))
        class_truth = [e for e in truth if e.class_name == class_name]
        best_f1 = -1.0
        best_sigma = float(grid[0])
        for sigma in grid:
            sigma = float(sigma)
            if sigma <= 0:
                continue
            dets = []
            for clip_id, ds in curves:
                for ev in detect_events(ds, sigma, class_name,
                                        min_gap_windows, min_len_windows):
                    dets.append(Event(clip_id=clip_id, onset_s=ev.onset_s,
                                      offset_s=ev.offset_s, class_name=class_name,
                                      score=ev.score))
            tp, fp, fn, _ = match_events(class_truth, dets, collar_s=collar_s)
            denom = 2 * tp + fp + fn
            f1 = (2 * tp / denom) if denom else 0.0
            if f1 > best_f1:  # strict: earlier (smaller) sigma wins ties
                best_f1 = f1
                best_sigma = sigma
        sigmas[class_name] = best_sigma
    return sigmas


# ---------------------------------------------------------------------------
# Support manifests, sigma files, detection TSVs
# ---------------------------------------------------------------------------

def load_support_manifest(
    path: str | Path,
    cfg: FeatureConfig = FeatureConfig(),
    window_frames: int = DEFAULT_WINDOW_FRAMES,
) -> SupportSet:
    """JSON-lines manifest of {path, onset, class} rows -> SupportSet.

    Each row yields one window of window_frames frames centered on the
    event onset (clamped to the clip when the onset sits near an edge).
    """
    path = Path(path)
    examples: list[MelFeatures] = []
    class_name: str | None = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                wav_path, onset_s, cls = row["path"], float(row["onset"]), row["class"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: bad support row: {exc}") from exc
            if class_name is None:
                class_name = cls
            elif cls != class_name:
                raise ManifestError(
                    f"{path}:{lineno}: support set mixes classes "
                    f"{class_name!r} and {cls!r}"
                )
            wav = Path(wav_path)
            if not wav.is_absolute():
                wav = path.parent / wav
            feats = extract_features(read_wav(wav), cfg)
            examples.append(onset_window(feats, onset_s, window_frames))
    if not examples:
        raise EmptySupportError(f"{path}: no support rows")
    return SupportSet(examples=examples, class_name=class_name)


def onset_window(feats: MelFeatures, onset_s: float, window_frames: int = DEFAULT_WINDOW_FRAMES) -> MelFeatures:
    """Cut window_frames frames centered on the onset, clamped to the clip."""
    t = feats.n_frames
    if t < window_frames:
        raise TooShortError(f"clip has {t} frames, needs >= {window_frames}")
    center = int(round(onset_s / feats.frame_hop_s))
    start = min(max(center - window_frames // 2, 0), t - window_frames)
    return MelFeatures(values=feats.values[:, start:start + window_frames],
                       frame_hop_s=feats.frame_hop_s)


def write_detections_tsv(path: str | Path, rows: list[tuple[str, DetectionEvent]]) -> None:
    """Detections TSV: clip_id, onset_s, offset_s, class, score (with header)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["clip_id", "onset_s", "offset_s", "class", "score"])
        for clip_id, ev in rows:
            writer.writerow([clip_id, f"{ev.onset_s:.6f}", f"{ev.offset_s:.6f}",
                             ev.class_name, f"{ev.score:.6f}"])


def save_sigmas(path: str | Path, sigmas: dict[str, float]) -> None:
    with open(path, "w") as fh:
        json.dump(sigmas, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_sigmas(path: str | Path) -> dict[str, float]:
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict) or not all(
        isinstance(v, (int, float)) and v > 0 for v in raw.values()
    ):
        raise ManifestError(f"{path}: sigma file must map class -> positive number")
    return {str(k): float(v) for k, v in raw.items()}
