"""On-the-fly training sample synthesis and balanced pair sampling.

Event-class samples are isolated event recordings mixed into background
noise at a random event-to-background ratio (EBR). The background-noise
class is an explicit extra class (id C_train + 1) drawn directly from the
background set, and occupies half of all pair slots.
"""
from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .dsp import AudioClip, EventAnnotation, FeatureConfig, MelFeatures
from .errors import (
    InsufficientClassesError,
    InvalidConfigError,
    ManifestError,
    SilentSourceError,
    TooShortError,
    UnknownClassError,
)

BACKGROUND_CLASS_NAME = "background"


class PairCategory(enum.Enum):
    BG_BG = "bg-bg"
    EVT_EVT_SAME = "evt-evt-same"
    BG_EVT = "bg-evt"
    EVT_EVT_DIFF = "evt-evt-diff"


@dataclass
class SourceBank:
    """Isolated event sources plus background recordings.

    Event class ids run 1..c_train; id c_train + 1 is the background-noise
    class.
    """

    event_sources: dict[int, list[AudioClip]]
    class_names: dict[int, str]
    background_set: list[AudioClip]

    def __post_init__(self):
        if not self.background_set:
            raise InvalidConfigError("background_set must be non-empty")
        ids = sorted(self.event_sources)
        if ids != list(range(1, len(ids) + 1)):
            raise InvalidConfigError(f"event class ids must be 1..C, got {ids}")
        for cid, clips in self.event_sources.items():
            if not clips:
                raise InvalidConfigError(f"event class {cid} has no clips")
        if sorted(self.class_names) != ids:
            raise InvalidConfigError("class_names keys must match event_sources keys")

    @property
    def c_train(self) -> int:
        return len(self.event_sources)

    @property
    def background_class_id(self) -> int:
        return self.c_train + 1

    def class_id(self, name: str) -> int:
        for cid, cname in self.class_names.items():
            if cname == name:
                return cid
        raise UnknownClassError(f"no event class named {name!r}")

    @classmethod
    def from_named_sources(
        cls,
        events: dict[str, list[AudioClip]],
        backgrounds: list[AudioClip],
    ) -> "SourceBank":
        """Assign ids 1..C to event classes in sorted-name order."""
        names = sorted(events)
        return cls(
            event_sources={i + 1: events[n] for i, n in enumerate(names)},
            class_names={i + 1: n for i, n in enumerate(names)},
            background_set=backgrounds,
        )

    def split_classes(self, holdout_names: list[str]) -> tuple["SourceBank", "SourceBank"]:
        """Split into (train, holdout) banks; the background set is shared."""
        unknown = set(holdout_names) - set(self.class_names.values())
        if unknown:
            raise UnknownClassError(f"holdout classes not in bank: {sorted(unknown)}")
        train = {n: self.event_sources[self.class_id(n)]
                 for n in self.class_names.values() if n not in holdout_names}
        hold = {n: self.event_sources[self.class_id(n)] for n in holdout_names}
        if not train or not hold:
            raise InvalidConfigError("both splits must keep at least one event class")
        return (
            SourceBank.from_named_sources(train, self.background_set),
            SourceBank.from_named_sources(hold, self.background_set),
        )


@dataclass
class LabeledSample:
    """A fixed-size feature window with an integer class label."""

    features: MelFeatures
    label: int


@dataclass
class Pair:
    first: LabeledSample
    second: LabeledSample
    label: int  # 1 = same class, 0 = different
    w: float  # margin weight, w_bg when a member is background, else 1
    category: PairCategory

    def __post_init__(self):
        same = self.first.label == self.second.label
        if self.label != int(same):
            raise InvalidConfigError("pair label inconsistent with member labels")


@dataclass(frozen=True)
class SamplerConfig:
    """Controls training-sample windows, EBR range, and pair weighting."""

    features: FeatureConfig = field(default_factory=FeatureConfig)
    sample_frames: int = 100
    center_frames: int = 20
    ebr_range_db: tuple[float, float] = (0.0, 18.0)
    w_bg: float = 2.0
    background_enabled: bool = True

    def __post_init__(self):
        if self.w_bg < 1.0:
            raise InvalidConfigError(f"w_bg must be >= 1, got {self.w_bg}")
        if not 0 < self.center_frames <= self.sample_frames:
            raise InvalidConfigError("center_frames must be in (0, sample_frames]")


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x)))) if len(x) else 0.0


def ebr_gain(event: AudioClip, background_segment: AudioClip, ebr_db: float) -> float:
    """Gain g such that RMS(g * event) / RMS(background) = 10^(ebr_db/20)."""
    e_rms = rms(event.samples)
    b_rms = rms(background_segment.samples)
    if e_rms == 0.0:
        raise SilentSourceError("event clip is silent")
    if b_rms == 0.0:
        raise SilentSourceError("background segment is silent")
    return 10.0 ** (ebr_db / 20.0) * b_rms / e_rms


def mix_at(background: np.ndarray, event: np.ndarray, gain: float, offset: int) -> np.ndarray:
    """Add gain * event into a copy of background starting at sample offset.

    The event is cropped at both edges of the background; over the retained
    span the mixture is exactly background + gain * event.
    """
    out = background.copy()
    start = max(offset, 0)
    stop = min(offset + len(event), len(background))
    if stop > start:
        out[start:stop] += gain * event[start - offset:stop - offset]
    return out


def _coincident_gain(
    event: np.ndarray,
    background: np.ndarray,
    offset: int,
    ebr_db: float,
    sample_rate: int,
) -> float:
    """EBR gain over the event span actually retained after edge cropping."""
    start = max(offset, 0)
    stop = min(offset + len(event), len(background))
    if stop <= start:
        raise TooShortError("event placement leaves no overlap with the window")
    return ebr_gain(
        AudioClip(event[start - offset:stop - offset], sample_rate),
        AudioClip(background[start:stop], sample_rate),
        ebr_db,
    )


def _random_background_segment(
    rng: np.random.Generator, bank: SourceBank, n_samples: int
) -> np.ndarray:
    eligible = [c for c in bank.background_set if len(c) >= n_samples]
    if not eligible:
        longest = max(len(c) for c in bank.background_set)
        raise TooShortError(
            f"no background clip has the {n_samples} samples needed "
            f"(longest is {longest})"
        )
    clip = eligible[rng.integers(len(eligible))]
    start = int(rng.integers(len(clip) - n_samples + 1))
    return clip.samples[start:start + n_samples]


def _features_of_window(samples: np.ndarray, cfg: SamplerConfig) -> MelFeatures:
    clip = AudioClip(samples, cfg.features.sample_rate)
    feats = dsp.extract_features(clip, cfg.features)
    if feats.n_frames != cfg.sample_frames:
        raise InvalidConfigError(
            f"window produced {feats.n_frames} frames, expected {cfg.sample_frames}"
        )
    return feats


def make_event_sample(
    rng: np.random.Generator,
    bank: SourceBank,
    class_id: int,
    ebr_range_db: tuple[float, float] | None = None,
    cfg: SamplerConfig = SamplerConfig(),
) -> LabeledSample:
    """Mix a random event of the class into background at a random EBR.

    The event is placed so it overlaps the window's central frames: long
    events cover the whole central span (and are cropped at the window
    edges), short events land inside it. The label therefore always derives
    from the central content.
    """
    if class_id not in bank.event_sources:
        raise UnknownClassError(f"unknown event class id {class_id}")
    ebr_lo, ebr_hi = ebr_range_db if ebr_range_db is not None else cfg.ebr_range_db
    fcfg = cfg.features
    window_len = fcfg.window_samples(cfg.sample_frames)
    background = _random_background_segment(rng, bank, window_len)

    clips = bank.event_sources[class_id]
    event = clips[rng.integers(len(clips))]
    ebr_db = float(rng.uniform(ebr_lo, ebr_hi))

    # Central span in samples: frames [c0, c1) of the window.
    c0 = (cfg.sample_frames - cfg.center_frames) // 2
    c1 = c0 + cfg.center_frames
    span_start = c0 * fcfg.frame_hop
    span_stop = (c1 - 1) * fcfg.frame_hop + fcfg.frame_len
    n_event = len(event)
    if n_event >= span_stop - span_start:
        lo, hi = span_stop - n_event, span_start
    else:
        lo, hi = span_start, span_stop - n_event
    offset = int(rng.integers(lo, hi + 1))
    gain = _coincident_gain(event.samples, background, offset, ebr_db, fcfg.sample_rate)
    mixed = mix_at(background, event.samples, gain, offset)
    return LabeledSample(features=_features_of_window(mixed, cfg), label=class_id)


def make_background_sample(
    rng: np.random.Generator,
    bank: SourceBank,
    cfg: SamplerConfig = SamplerConfig(),
) -> LabeledSample:
    """A window of pure background noise, labeled as the background class."""
    window_len = cfg.features.window_samples(cfg.sample_frames)
    segment = _random_background_segment(rng, bank, window_len)
    return LabeledSample(
        features=_features_of_window(segment, cfg),
        label=bank.background_class_id,
    )


def _pair_categories(cfg: SamplerConfig) -> tuple[list[PairCategory], list[float]]:
    if cfg.background_enabled:
        cats = [PairCategory.BG_BG, PairCategory.EVT_EVT_SAME,
                PairCategory.BG_EVT, PairCategory.EVT_EVT_DIFF]
        return cats, [0.25, 0.25, 0.25, 0.25]
    return [PairCategory.EVT_EVT_SAME, PairCategory.EVT_EVT_DIFF], [0.5, 0.5]


def sample_pair(
    rng: np.random.Generator,
    bank: SourceBank,
    cfg: SamplerConfig = SamplerConfig(),
    categories: list[PairCategory] | None = None,
    probabilities: list[float] | None = None,
) -> Pair:
    """Draw one training pair with the balanced category distribution.

    With the background class enabled the four categories are equiprobable
    (0.25 each), so half of all pairs contain the background class. Event
    classes are assigned uniformly within event categories.
    """
    if categories is None or probabilities is None:
        categories, probabilities = _pair_categories(cfg)
    category = categories[rng.choice(len(categories), p=probabilities)]

    if category is PairCategory.BG_BG:
        a = make_background_sample(rng, bank, cfg)
        b = make_background_sample(rng, bank, cfg)
    elif category is PairCategory.EVT_EVT_SAME:
        cid = int(rng.integers(1, bank.c_train + 1))
        a = make_event_sample(rng, bank, cid, cfg=cfg)
        b = make_event_sample(rng, bank, cid, cfg=cfg)
    elif category is PairCategory.BG_EVT:
        cid = int(rng.integers(1, bank.c_train + 1))
        a = make_background_sample(rng, bank, cfg)
        b = make_event_sample(rng, bank, cid, cfg=cfg)
        if rng.random() < 0.5:
            a, b = b, a
    else:  # EVT_EVT_DIFF
        if bank.c_train < 2:
            raise InsufficientClassesError(
                "need at least 2 event classes for a different-class pair"
            )
        c1, c2 = rng.choice(bank.c_train, size=2, replace=False) + 1
        a = make_event_sample(rng, bank, int(c1), cfg=cfg)
        b = make_event_sample(rng, bank, int(c2), cfg=cfg)

    bg_id = bank.background_class_id
    has_bg = a.label == bg_id or b.label == bg_id
    return Pair(
        first=a,
        second=b,
        label=int(a.label == b.label),
        w=cfg.w_bg if has_bg else 1.0,
        category=category,
    )


def feasible_categories(bank: SourceBank, cfg: SamplerConfig) -> tuple[list[PairCategory], list[float]]:
    """Drop categories the bank cannot realize and renormalize.

    Needed for verification banks with a single held-out class, where
    different-class pairs cannot be drawn.
    """
    cats, probs = _pair_categories(cfg)
    keep = [(c, p) for c, p in zip(cats, probs)
            if not (c is PairCategory.EVT_EVT_DIFF and bank.c_train < 2)]
    if not keep:
        raise InsufficientClassesError("no feasible pair category for this bank")
    total = sum(p for _, p in keep)
    return [c for c, _ in keep], [p / total for _, p in keep]


def generate_eval_clip(
    rng: np.random.Generator,
    bank: SourceBank,
    target_class: int,
    duration_s: float = 30.0,
    presence_rate: float = 0.5,
    ebr_set_db: tuple[float, ...] = (-6.0, 0.0, 6.0),
    cfg: SamplerConfig = SamplerConfig(),
) -> AudioClip:
    """One query clip: background, plus (with presence_rate) one target event.

    Positive clips carry a single (onset, offset, class) annotation; the EBR
    is drawn uniformly from ebr_set_db.
    """
    if not ebr_set_db:
        raise InvalidConfigError("ebr_set_db must be non-empty")
    if target_class not in bank.event_sources:
        raise UnknownClassError(f"unknown event class id {target_class}")
    fcfg = cfg.features
    n_samples = int(round(duration_s * fcfg.sample_rate))
    background = _random_background_segment(rng, bank, n_samples)

    if rng.random() >= presence_rate:
        return AudioClip(background, fcfg.sample_rate, annotations=[])

    clips = bank.event_sources[target_class]
    event = clips[rng.integers(len(clips))]
    if len(event) > n_samples:
        raise TooShortError(
            f"event of {len(event)} samples does not fit a {n_samples}-sample clip"
        )
    ebr_db = float(ebr_set_db[rng.integers(len(ebr_set_db))])
    onset = int(rng.integers(0, n_samples - len(event) + 1))
    gain = _coincident_gain(event.samples, background, onset, ebr_db, fcfg.sample_rate)
    mixed = mix_at(background, event.samples, gain, onset)
    annotation = EventAnnotation(
        onset_s=onset / fcfg.sample_rate,
        offset_s=(onset + len(event)) / fcfg.sample_rate,
        class_name=bank.class_names[target_class],
    )
    return AudioClip(mixed, fcfg.sample_rate, annotations=[annotation])


# ---------------------------------------------------------------------------
# Dataset manifest (JSON lines) and ground-truth TSV
# ---------------------------------------------------------------------------

def load_manifest(path: str | Path, features: FeatureConfig = FeatureConfig()) -> SourceBank:
    """Read a JSON-lines manifest into a SourceBank.

    Records: {"path": str, "role": "event"|"background",
              "class": str|null, "onset": float|null, "offset": float|null}.
    Event records with onset/offset keep only that span of the file. All
    audio is resampled to the configured rate.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    events: dict[str, list[AudioClip]] = {}
    backgrounds: list[AudioClip] = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        for key in ("path", "role"):
            if key not in rec:
                raise ManifestError(f"{path}:{lineno}: missing field {key!r}")
        wav_path = Path(rec["path"])
        if not wav_path.is_absolute():
            wav_path = path.parent / wav_path
        if not wav_path.exists():
            raise ManifestError(f"{path}:{lineno}: audio file not found: {wav_path}")
        clip = dsp.resample(dsp.read_wav(wav_path), features.sample_rate)
        role = rec["role"]
        if role == "background":
            backgrounds.append(clip)
        elif role == "event":
            cls = rec.get("class")
            if not cls:
                raise ManifestError(f"{path}:{lineno}: event record needs a class")
            onset, offset = rec.get("onset"), rec.get("offset")
            if onset is not None and offset is not None:
                a = int(round(onset * clip.sample_rate))
                b = int(round(offset * clip.sample_rate))
                if not 0 <= a < b <= len(clip):
                    raise ManifestError(f"{path}:{lineno}: bad onset/offset span")
                clip = AudioClip(clip.samples[a:b], clip.sample_rate)
            events.setdefault(cls, []).append(clip)
        else:
            raise ManifestError(f"{path}:{lineno}: unknown role {role!r}")
    if not events:
        raise ManifestError(f"{path}: no event records")
    if not backgrounds:
        raise ManifestError(f"{path}: no background records")
    return SourceBank.from_named_sources(events, backgrounds)


def write_truth_tsv(path: str | Path, rows: list[tuple[str, float, float, str]]) -> None:
    """Ground truth TSV: clip_id, onset_s, offset_s, class."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["clip_id", "onset_s", "offset_s", "class"])
        for clip_id, onset, offset, cls in rows:
            writer.writerow([clip_id, f"{onset:.6f}", f"{offset:.6f}", cls])
