"""Domain model for emulsion bricks: base-tracks, file I/O, validation, splits.

A base-track is the atomic observable: a position (x, y, z in micrometres)
plus the two projection slopes (tx, ty) that fix its direction.  Tracks live
on discrete emulsion planes z = PITCH_Z * k.  All types are immutable after
construction and safe to share between threads.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

# Brick geometry.  Coordinates are micrometres throughout.
X_HALF_UM = 62500.0
Y_HALF_UM = 49500.0
PITCH_Z_UM = 1293.0
N_LAYERS = 57
MAX_PLANE_INDEX = 57  # admissible planes are k = 0..57
Z_PLANE_TOL_UM = 0.5

TRACK_CSV_HEADER = ["brick_id", "track_id", "x", "y", "z", "tx", "ty", "shower_id"]

UNLABELED = -1


class TrackFormatError(ValueError):
    """Raised when a track file cannot be parsed; carries the line number."""


class InvariantViolation(ValueError):
    """Raised when tracks violate brick geometry constraints.

    ``offending`` lists the track_ids that failed.
    """

    def __init__(self, message: str, offending: list[int]):
        super().__init__(f"{message}: track_ids {offending}")
        self.offending = list(offending)


@dataclass(frozen=True)
class BaseTrack:
    x: float
    y: float
    z: float
    tx: float
    ty: float
    track_id: int
    shower_id: int = UNLABELED


@dataclass(frozen=True)
class Brick:
    """A collection of base-tracks plus the geometry constants they obey."""

    tracks: tuple[BaseTrack, ...]
    brick_id: int = 0
    n_layers: int = N_LAYERS
    pitch_z: float = PITCH_Z_UM

    def __len__(self) -> int:
        return len(self.tracks)


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[Brick, ...]
    test: tuple[Brick, ...]
    val: tuple[Brick, ...]
    seed: int = 0


def layer_index(z: float) -> int:
    """Map a z coordinate to its emulsion plane index k (z = 1293 * k).

    Raises ``InvariantViolation`` if z is more than ``Z_PLANE_TOL_UM`` away
    from the nearest admissible plane or outside k = 0..57.
    """
    k = int(round(z / PITCH_Z_UM))
    if abs(z - PITCH_Z_UM * k) > Z_PLANE_TOL_UM or not 0 <= k <= MAX_PLANE_INDEX:
        raise InvariantViolation(f"z={z} is not on an emulsion plane", [])
    return k


def _check_track(t: BaseTrack) -> str | None:
    if not -X_HALF_UM <= t.x <= X_HALF_UM:
        return f"x={t.x} outside [{-X_HALF_UM}, {X_HALF_UM}]"
    if not -Y_HALF_UM <= t.y <= Y_HALF_UM:
        return f"y={t.y} outside [{-Y_HALF_UM}, {Y_HALF_UM}]"
    k = round(t.z / PITCH_Z_UM)
    if abs(t.z - PITCH_Z_UM * k) > Z_PLANE_TOL_UM or not 0 <= k <= MAX_PLANE_INDEX:
        return f"z={t.z} off-plane"
    return None


def validate_brick(brick: Brick) -> None:
    """Check every track against the coordinate constraints; raise listing offenders."""
    bad: list[int] = []
    reasons: list[str] = []
    for t in brick.tracks:
        reason = _check_track(t)
        if reason is not None:
            bad.append(t.track_id)
            if len(reasons) < 5:
                reasons.append(reason)
    if bad:
        raise InvariantViolation("; ".join(reasons), bad)
    ids = [t.track_id for t in brick.tracks]
    if len(set(ids)) != len(ids):
        seen: set[int] = set()
        dupes = sorted({i for i in ids if i in seen or seen.add(i)})
        raise InvariantViolation("duplicate track_ids", dupes)


def _parse_row(row: dict[str, str], line_no: int, has_shower: bool) -> tuple[int, BaseTrack]:
    try:
        brick_id = int(row["brick_id"])
        shower = int(row["shower_id"]) if has_shower and row.get("shower_id") not in (None, "") else UNLABELED
        track = BaseTrack(
            x=float(row["x"]),
            y=float(row["y"]),
            z=float(row["z"]),
            tx=float(row["tx"]),
            ty=float(row["ty"]),
            track_id=int(row["track_id"]),
            shower_id=shower,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise TrackFormatError(f"line {line_no}: cannot parse track row ({exc})") from exc
    return brick_id, track


def load_tracks(path) -> Brick:
    """Load one brick from a track CSV, validating geometry invariants.

    The ``shower_id`` column is optional; missing values become -1.
    """
    tracks: list[BaseTrack] = []
    brick_id = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise TrackFormatError("line 1: empty file, expected header")
        required = [c for c in TRACK_CSV_HEADER if c != "shower_id"]
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise TrackFormatError(f"line 1: missing columns {missing}")
        has_shower = "shower_id" in reader.fieldnames
        for line_no, row in enumerate(reader, start=2):
            row_brick, track = _parse_row(row, line_no, has_shower)
            if tracks and row_brick != brick_id:
                raise TrackFormatError(
                    f"line {line_no}: brick_id {row_brick} != {brick_id}; one brick per file"
                )
            brick_id = row_brick
            tracks.append(track)
    brick = Brick(tracks=tuple(tracks), brick_id=brick_id)
    validate_brick(brick)
    return brick


def save_tracks(brick: Brick, path) -> None:
    """Write a brick to CSV.  Floats use shortest round-trip formatting."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACK_CSV_HEADER)
        for t in brick.tracks:
            writer.writerow(
                [brick.brick_id, t.track_id]
                + [repr(float(v)) for v in (t.x, t.y, t.z, t.tx, t.ty)]
                + [t.shower_id]
            )


def split_dataset(bricks, seed: int, counts: tuple[int, int, int] | None = None) -> DatasetSplit:
    """Deterministically shuffle and partition bricks into train/test/val.

    Default fractions are 34/33/33 percent (train gets the rounding
    remainder's complement); ``counts`` overrides with explicit
    (n_train, n_test, n_val) sizes that must sum to len(bricks).
    """
    bricks = list(bricks)
    n = len(bricks)
    if n < 3:
        raise ValueError(f"need at least 3 bricks to split, got {n}")
    if counts is None:
        n_train = int(round(0.34 * n))
        n_test = int(round(0.33 * n))
        n_val = n - n_train - n_test
    else:
        n_train, n_test, n_val = counts
        if n_train + n_test + n_val != n:
            raise ValueError(f"counts {counts} do not sum to {n}")
    if min(n_train, n_test, n_val) < 1:
        raise ValueError("each split part must hold at least one brick")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [bricks[i] for i in order]
    return DatasetSplit(
        train=tuple(shuffled[:n_train]),
        test=tuple(shuffled[n_train : n_train + n_test]),
        val=tuple(shuffled[n_train + n_test :]),
        seed=seed,
    )
