"""Event-based scoring: onset matching with a collar, per-class P/R/F1.

A detection matches a reference of the same class, in the same clip, when
their onsets differ by at most the collar (0.5 s by default). Matching is
one-to-one. Detections and references are processed in onset order and each
detection claims the earliest still-unmatched in-collar reference; because
every detection's compatible references form an interval of equal width in
the sorted order, this greedy is exchange-argument optimal and returns the
maximum possible TP count.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidCollarError, ManifestError

DEFAULT_COLLAR_S = 0.5


@dataclass(frozen=True)
class Event:
    """One reference or detected event; score is None for references."""

    clip_id: str
    onset_s: float
    offset_s: float
    class_name: str
    score: float | None = None


@dataclass
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


@dataclass
class EvalReport:
    per_class: dict[str, ClassCounts] = field(default_factory=dict)
    collar_s: float = DEFAULT_COLLAR_S

    @property
    def macro_f1(self) -> float:
        """Unweighted mean of per-class F1 (the Avg. convention)."""
        if not self.per_class:
            return 0.0
        return sum(c.f1 for c in self.per_class.values()) / len(self.per_class)

    def to_json(self) -> str:
        body = {
            "collar_s": self.collar_s,
            "classes": {
                name: {
                    "tp": c.tp, "fp": c.fp, "fn": c.fn,
                    "precision": round(c.precision, 6),
                    "recall": round(c.recall, 6),
                    "f1": round(c.f1, 6),
                }
                for name, c in sorted(self.per_class.items())
            },
            "macro_f1": round(self.macro_f1, 6),
        }
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        lines = [f"{'class':<20} {'TP':>5} {'FP':>5} {'FN':>5} "
                 f"{'P':>7} {'R':>7} {'F1':>7}"]
        for name, c in sorted(self.per_class.items()):
            lines.append(f"{name:<20} {c.tp:>5} {c.fp:>5} {c.fn:>5} "
                         f"{c.precision:>7.3f} {c.recall:>7.3f} {c.f1:>7.3f}")
        lines.append(f"{'macro avg':<20} {'':>5} {'':>5} {'':>5} "
                     f"{'':>7} {'':>7} {self.macro_f1:>7.3f}")
        return "\n".join(lines) + "\n"


def match_events(
    refs: list[Event],
    dets: list[Event],
    collar_s: float = DEFAULT_COLLAR_S,
) -> tuple[int, int, int, list[tuple[Event, Event]]]:
    """One-to-one onset matching; returns (TP, FP, FN, matched pairs).

    Events pair only within the same (clip_id, class_name) group. Offsets
    are ignored: the onset-only condition.
    """
    if collar_s < 0:
        raise InvalidCollarError(f"collar must be non-negative, got {collar_s}")
    groups: dict[tuple[str, str], tuple[list[Event], list[Event]]] = {}
    for ev in refs:
        groups.setdefault((ev.clip_id, ev.class_name), ([], []))[0].append(ev)
    for ev in dets:
        groups.setdefault((ev.clip_id, ev.class_name), ([], []))[1].append(ev)

    tp = 0
    matches: list[tuple[Event, Event]] = []
    for g_refs, g_dets in groups.values():
        g_refs.sort(key=lambda e: e.onset_s)
        g_dets.sort(key=lambda e: e.onset_s)
        next_ref = 0
        for det in g_dets:
            # skip references that fell behind every remaining detection
            while next_ref < len(g_refs) and g_refs[next_ref].onset_s < det.onset_s - collar_s:
                next_ref += 1
            if next_ref < len(g_refs) and g_refs[next_ref].onset_s <= det.onset_s + collar_s:
                matches.append((g_refs[next_ref], det))
                tp += 1
                next_ref += 1
    fp = len(dets) - tp
    fn = len(refs) - tp
    return tp, fp, fn, matches


def event_f1(
    refs: list[Event],
    dets: list[Event],
    collar_s: float = DEFAULT_COLLAR_S,
) -> EvalReport:
    """Per-class counts and F1; classes drawn from both event lists."""
    report = EvalReport(collar_s=collar_s)
    classes = sorted({e.class_name for e in refs} | {e.class_name for e in dets})
    for name in classes:
        c_refs = [e for e in refs if e.class_name == name]
        c_dets = [e for e in dets if e.class_name == name]
        tp, fp, fn, _ = match_events(c_refs, c_dets, collar_s=collar_s)
        report.per_class[name] = ClassCounts(tp=tp, fp=fp, fn=fn)
    return report


def brute_force_max_matching(
    refs: list[Event],
    dets: list[Event],
    collar_s: float = DEFAULT_COLLAR_S,
) -> int:
    """Maximum bipartite matching TP count by augmenting paths (oracle)."""
    if collar_s < 0:
        raise InvalidCollarError(f"collar must be non-negative, got {collar_s}")
    compat = [
        [
            r.clip_id == d.clip_id
            and r.class_name == d.class_name
            and abs(r.onset_s - d.onset_s) <= collar_s
            for r in refs
        ]
        for d in dets
    ]
    match_of_ref: list[int | None] = [None] * len(refs)

    def try_assign(d: int, seen: list[bool]) -> bool:
        for r in range(len(refs)):
            if compat[d][r] and not seen[r]:
                seen[r] = True
                if match_of_ref[r] is None or try_assign(match_of_ref[r], seen):
                    match_of_ref[r] = d
                    return True
        return False

    total = 0
    for d in range(len(dets)):
        if try_assign(d, [False] * len(refs)):
            total += 1
    return total


# ---------------------------------------------------------------------------
# TSV loading (formats written by synthesis.write_truth_tsv and
# detector.write_detections_tsv)
# ---------------------------------------------------------------------------

def read_events_tsv(path: str | Path) -> list[Event]:
    """Read a truth or detections TSV; the score column is optional."""
    events: list[Event] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None:
            return events
        expected = ["clip_id", "onset_s", "offset_s", "class"]
        if [h.strip() for h in header[:4]] != expected:
            raise ManifestError(f"{path}: expected columns {expected}, got {header[:4]}")
        has_score = len(header) > 4 and header[4].strip() == "score"
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            try:
                events.append(
                    Event(
                        clip_id=row[0],
                        onset_s=float(row[1]),
                        offset_s=float(row[2]),
                        class_name=row[3],
                        score=float(row[4]) if has_score and len(row) > 4 else None,
                    )
                )
            except (IndexError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: bad event row: {exc}") from exc
    return events
