"""Point-track data model and preprocessing.

Coordinates are normalized to [0, 1]^2 everywhere; pixel thresholds are
converted with ``pixel_scale`` (256, the nominal crop size).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from mprlab.errors import ConfigError, PreprocessingError

OBJECT, BACKGROUND, AGENT = 0, 1, 2
LABEL_NAMES = {OBJECT: "object", BACKGROUND: "background", AGENT: "agent"}
LABEL_CODES = {v: k for k, v in LABEL_NAMES.items()}

SOURCES = ("human_corpus", "robot_rollout")
MIXTURE_WIDTH = 300
RESAMPLE_LOSS_FRACTION = 0.30
MIN_MOTION_PX = 0.5
PIXEL_SCALE = 256


@dataclass
class TrackFrame:
    points: np.ndarray   # (N, 2)
    visible: np.ndarray  # (N,) bool
    labels: np.ndarray   # (N,) int codes
    t: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.visible = np.asarray(self.visible, dtype=bool)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if not (len(self.points) == len(self.visible) == len(self.labels)):
            raise ConfigError("TrackFrame arrays must have one entry per point")

    @property
    def n_points(self) -> int:
        return len(self.points)

    def object_mask(self) -> np.ndarray:
        return self.labels == OBJECT


@dataclass
class TrackSequence:
    frames: list[TrackFrame]
    resample_events: list[int] = field(default_factory=list)
    source: str = "robot_rollout"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ConfigError(f"unknown track source '{self.source}'")
        ts = [f.t for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ConfigError("frame indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def horizon(self) -> int:
        """Number of transitions T (frames = T + 1)."""
        return len(self.frames) - 1

    def spans(self) -> list[tuple[int, int]]:
        """Half-open frame-position ranges between resample events."""
        cuts = sorted({0, *(e for e in self.resample_events if 0 < e < len(self.frames)), len(self.frames)})
        return list(zip(cuts[:-1], cuts[1:]))

    def span_of(self, i: int) -> tuple[int, int]:
        for a, b in self.spans():
            if a <= i < b:
                return a, b
        raise IndexError(i)

    def same_span(self, *positions: int) -> bool:
        a, b = self.span_of(positions[0])
        return all(a <= p < b for p in positions)


@dataclass
class DeltaSet:
    deltas: np.ndarray  # (M, 2)
    labels: np.ndarray  # (M,)
    t: int
    point_ids: np.ndarray | None = None

    def background_mask(self) -> np.ndarray:
        return self.labels != OBJECT


@dataclass
class MixtureBatchItem:
    """Slot-aligned training/inference example of fixed width.

    The raw arrays hold each selected point once; ``slot_index`` maps the 300
    slots onto raw rows, so padding repeats are views rather than copies.
    """

    raw_context: np.ndarray   # (n, 2) P_{t-1}
    raw_current: np.ndarray   # (n, 2) P_t
    raw_target: np.ndarray    # (n, 2) P_{t+1}
    raw_labels: np.ndarray    # (n,)
    raw_point_ids: np.ndarray  # (n,) point identities in the source frame
    slot_index: np.ndarray    # (300,) -> raw row
    tau: float
    episode_id: str = ""
    t: int = 0

    @property
    def n_raw(self) -> int:
        return len(self.raw_current)

    @property
    def width(self) -> int:
        return len(self.slot_index)

    @property
    def context_points(self) -> np.ndarray:
        return self.raw_context[self.slot_index]

    @property
    def current_points(self) -> np.ndarray:
        return self.raw_current[self.slot_index]

    @property
    def target_points(self) -> np.ndarray:
        return self.raw_target[self.slot_index]

    @property
    def labels(self) -> np.ndarray:
        return self.raw_labels[self.slot_index]

    @property
    def pad_mask(self) -> np.ndarray:
        """True on slots that repeat an earlier slot's raw row."""
        seen = np.zeros(self.n_raw, dtype=bool)
        mask = np.zeros(self.width, dtype=bool)
        for i, j in enumerate(self.slot_index):
            mask[i] = seen[j]
            seen[j] = True
        return mask

    def multiplicity(self) -> np.ndarray:
        return np.bincount(self.slot_index, minlength=self.n_raw)

    def permuted(self, perm: np.ndarray) -> "MixtureBatchItem":
        """Same item with slots reordered (slot i <- slot perm[i])."""
        return MixtureBatchItem(self.raw_context, self.raw_current, self.raw_target,
                                self.raw_labels, self.raw_point_ids,
                                self.slot_index[np.asarray(perm)], self.tau,
                                self.episode_id, self.t)

    def expanded(self) -> "MixtureBatchItem":
        """Equivalent item with one raw row per slot (no sharing)."""
        s = self.slot_index
        return MixtureBatchItem(self.raw_context[s], self.raw_current[s], self.raw_target[s],
                                self.raw_labels[s], self.raw_point_ids[s],
                                np.arange(self.width), self.tau, self.episode_id, self.t)


# --- deltas and compensation -------------------------------------------------

def frame_deltas(f0: TrackFrame, f1: TrackFrame) -> DeltaSet:
    """Deltas for points visible in both frames."""
    if f0.n_points != f1.n_points:
        raise PreprocessingError("frames do not share a point identity space")
    both = f0.visible & f1.visible
    ids = np.flatnonzero(both)
    return DeltaSet(f1.points[ids] - f0.points[ids], f0.labels[ids], f0.t, ids)


def compensate_background(ds: DeltaSet) -> DeltaSet:
    """Subtract the mean background delta from every delta.

    Agent points count as background.  Raises when no background point is
    available; the caller chooses the fallback.
    """
    bg = ds.background_mask()
    if not bg.any():
        raise PreprocessingError(f"no background points at frame {ds.t}")
    shift = ds.deltas[bg].mean(axis=0)
    return DeltaSet(ds.deltas - shift, ds.labels.copy(), ds.t,
                    None if ds.point_ids is None else ds.point_ids.copy())


def background_shift(prev: TrackFrame, cur: TrackFrame) -> np.ndarray:
    """Mean background+agent displacement between two frames."""
    ds = frame_deltas(prev, cur)
    bg = ds.background_mask()
    if not bg.any():
        raise PreprocessingError(f"no background points at frame {prev.t}")
    return ds.deltas[bg].mean(axis=0)


# --- resampling, filtering, trimming -------------------------------------------

def check_resample(frame: TrackFrame, baseline_object_count: int) -> bool:
    """True when more than 30% of the baseline object points are lost."""
    if baseline_object_count <= 0:
        raise ConfigError("baseline_object_count must be positive")
    visible_obj = int((frame.visible & frame.object_mask()).sum())
    lost = baseline_object_count - visible_obj
    return lost / baseline_object_count > RESAMPLE_LOSS_FRACTION


def detect_resample_events(frames: list[TrackFrame]) -> list[int]:
    """Frame positions at which the point grid would be re-seeded.

    The baseline is the visible object count at the last seeding.
    """
    events: list[int] = []
    baseline = 0
    for i, f in enumerate(frames):
        count = int((f.visible & f.object_mask()).sum())
        if baseline == 0:
            baseline = count
            continue
        if check_resample(f, baseline):
            events.append(i)
            baseline = count
    return events


def _motion(seq: TrackSequence, i: int, compensate: bool) -> np.ndarray | None:
    f0, f1 = seq.frames[i], seq.frames[i + 1]
    ds = frame_deltas(f0, f1)
    if not len(ds.deltas):
        return None
    if compensate:
        ds = compensate_background(ds)
    return ds.deltas


def filter_static_frames(seq: TrackSequence, pixel_scale: int = PIXEL_SCALE,
                         compensate: bool | None = None) -> list[int]:
    """Frame positions t whose largest point motion to t+1 is >= 0.5 px.

    Human-corpus motion is measured after background compensation so camera
    shake alone does not keep a frozen frame.
    """
    if compensate is None:
        compensate = seq.source == "human_corpus"
    keep = []
    for i in range(len(seq.frames) - 1):
        if not seq.same_span(i, i + 1):
            continue
        d = _motion(seq, i, compensate)
        if d is None:
            continue
        if np.sqrt((d * d).sum(axis=1)).max() * pixel_scale >= MIN_MOTION_PX:
            keep.append(i)
    return keep


def trim_inactive(seq: TrackSequence) -> TrackSequence:
    """Drop leading/trailing frames with no visible object point."""
    active = [bool((f.visible & f.object_mask()).any()) for f in seq.frames]
    if not any(active):
        raise PreprocessingError("sequence has no frame with a visible object point")
    lo = active.index(True)
    hi = len(active) - active[::-1].index(True)
    events = [e - lo for e in seq.resample_events if lo < e < hi]
    return TrackSequence(seq.frames[lo:hi], events, seq.source)


# --- mixture construction --------------------------------------------------------

def make_item(prev: TrackFrame, cur: TrackFrame, nxt: TrackFrame, tau: float,
              rng: np.random.Generator, compensate: bool = False,
              use_masks: bool = True, width: int = MIXTURE_WIDTH,
              episode_id: str = "", t: int = 0) -> MixtureBatchItem:
    """Assemble one slot-aligned item from three consecutive frames.

    With ``use_masks`` the item holds every usable object point plus
    floor(N_obj / 2) background points sampled without replacement (the whole
    pool when it is smaller).  Without masks every usable point is kept.
    Rows are repeated cyclically up to ``width``.
    """
    usable = prev.visible & cur.visible & nxt.visible
    labels = cur.labels
    if use_masks:
        obj = np.flatnonzero(usable & (labels == OBJECT))
        if not len(obj):
            raise PreprocessingError(f"no usable object points at frame {cur.t}")
        pool = np.flatnonzero(usable & (labels != OBJECT))
        k = min(len(obj) // 2, len(pool))
        bg = np.sort(rng.choice(pool, size=k, replace=False)) if k else np.empty(0, dtype=np.int64)
        ids = np.concatenate([obj, bg])
    else:
        ids = np.flatnonzero(usable)
        if not len(ids):
            raise PreprocessingError(f"no usable points at frame {cur.t}")
    if len(ids) > width:
        raise PreprocessingError(f"{len(ids)} points exceed mixture width {width}")
    p_prev, p_cur, p_next = prev.points[ids], cur.points[ids], nxt.points[ids]
    if compensate:
        # re-express both deltas relative to P_t with camera motion removed
        d_in = p_cur - p_prev - background_shift(prev, cur)
        d_out = p_next - p_cur - background_shift(cur, nxt)
        p_prev, p_next = p_cur - d_in, p_cur + d_out
    slots = np.arange(width) % len(ids)
    return MixtureBatchItem(p_prev, p_cur.copy(), p_next, labels[ids].copy(), ids,
                            slots, float(tau), episode_id, t)


def build_mixture(seq: TrackSequence, t: int, rng: np.random.Generator,
                  use_masks: bool = True, episode_id: str = "") -> MixtureBatchItem:
    """Training item centred on frame position ``t`` (context t-1, target t+1)."""
    if t < 1 or t + 1 >= len(seq.frames):
        raise PreprocessingError(f"t={t} needs frames t-1 and t+1")
    if not seq.same_span(t - 1, t, t + 1):
        raise PreprocessingError(f"frames {t - 1}..{t + 1} straddle a resample event")
    compensate = seq.source == "human_corpus" and use_masks
    return make_item(seq.frames[t - 1], seq.frames[t], seq.frames[t + 1],
                     tau=t / seq.horizon, rng=rng, compensate=compensate,
                     use_masks=use_masks, episode_id=episode_id, t=t)


def prepare_items(episodes: Iterable[tuple[str, TrackSequence]], rng: np.random.Generator,
                  use_masks: bool = True, pixel_scale: int = PIXEL_SCALE,
                  filter_static: bool = True) -> list[MixtureBatchItem]:
    """Trim, filter and mix every usable frame of every episode."""
    items = []
    for episode_id, seq in episodes:
        seq = trim_inactive(seq)
        if filter_static:
            moving = filter_static_frames(seq, pixel_scale,
                                          compensate=seq.source == "human_corpus" and use_masks)
        else:
            moving = list(range(len(seq.frames) - 1))
        for t in moving:
            if t < 1 or not seq.same_span(t - 1, t, t + 1):
                continue
            try:
                items.append(build_mixture(seq, t, rng, use_masks, episode_id))
            except PreprocessingError:
                continue
    return items


# --- corpus I/O --------------------------------------------------------------------

def _fmt(x: float) -> float:
    return float(f"{x:.9g}")


def frame_to_json(f: TrackFrame) -> dict:
    return {
        "t": int(f.t),
        "points": [[_fmt(x), _fmt(y)] for x, y in f.points],
        "visible": [bool(v) for v in f.visible],
        "labels": [LABEL_NAMES[int(c)] for c in f.labels],
    }


def frame_from_json(d: dict) -> TrackFrame:
    labels = [LABEL_CODES[name] for name in d["labels"]]
    return TrackFrame(np.asarray(d["points"], dtype=np.float64).reshape(-1, 2),
                      d["visible"], labels, d["t"])


def sequence_to_record(episode_id: str, seq: TrackSequence, success: bool, **extra) -> dict:
    rec = {
        "episode_id": episode_id,
        "source": seq.source,
        "success": bool(success),
        "frames": [frame_to_json(f) for f in seq.frames],
        "resample_events": [int(e) for e in seq.resample_events],
    }
    rec.update(extra)
    return rec


def record_to_sequence(rec: dict) -> TrackSequence:
    return TrackSequence([frame_from_json(f) for f in rec["frames"]],
                         list(rec.get("resample_events", [])), rec["source"])


def write_jsonl(path, records: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    return path


def read_jsonl(path) -> Iterator[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)
