"""Visual and inertial feature bundles.

Visual side: per-person part-flow tracks, bounding-box sizes and shoulder
keypoint offsets, gap-filled and zero-padded to a fixed window length.
Inertial side: 6 x 3T windows of gravity-free acceleration and angular
velocity resampled from a ~100 Hz stream onto the video clock.

Also holds the line-delimited track / IMU file readers and writers.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

log = logging.getLogger(__name__)

VIDEO_FPS = 30.0
IMU_PER_FRAME = 3
NS_PER_S = 1_000_000_000

TRACK_COLUMNS = ["frame_index", "person_id", "box_h", "box_w", "box_cx", "box_cy",
                 "ls_x", "ls_y", "rs_x", "rs_y"]
IMU_COLUMNS = ["timestamp_utc_ns", "person_id", "a_x", "a_y", "a_z", "w_x", "w_y", "w_z"]


class IngestionError(ValueError):
    pass


class ParseError(IngestionError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path, self.line = path, line


class ConsistencyError(IngestionError):
    pass


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass
class PartTrack:
    person_id: int
    part_id: int
    flow: np.ndarray          # (T, 2) px/frame


@dataclass
class BoxTrack:
    person_id: int
    sizes: np.ndarray         # (T, 2) h, w in px


@dataclass
class KeypointTrack:
    person_id: int
    points: np.ndarray        # (T, 4) ls_x, ls_y, rs_x, rs_y relative to box center


@dataclass
class PersonWindow:
    person_id: int
    parts: list
    box: BoxTrack
    keypoints: KeypointTrack
    window_start_frame: int
    mask: np.ndarray          # (T,) True where the person was observed or interpolated

    def __post_init__(self):
        T = len(self.mask)
        for tr in [*self.parts, self.box, self.keypoints]:
            if tr.person_id != self.person_id:
                raise ConsistencyError(
                    f"track for person {tr.person_id} bundled under person {self.person_id}")
        lengths = {p.flow.shape[0] for p in self.parts}
        lengths |= {self.box.sizes.shape[0], self.keypoints.points.shape[0]}
        if lengths != {T}:
            raise ConsistencyError(f"person {self.person_id}: track lengths {sorted(lengths)} != {T}")

    @property
    def length(self):
        return len(self.mask)


@dataclass
class ImuWindow:
    person_id: int
    samples: np.ndarray       # (6, 3T): a_x a_y a_z w_x w_y w_z
    timestamps: np.ndarray    # (3T,) int64 ns

    def __post_init__(self):
        if self.samples.ndim != 2 or self.samples.shape[0] != 6:
            raise ValueError(f"IMU window must be 6 x T', got {self.samples.shape}")
        if self.samples.shape[1] != len(self.timestamps):
            raise ValueError("IMU samples and timestamps disagree in length")

    @property
    def accel(self):
        return self.samples[:3]

    @property
    def gyro(self):
        return self.samples[3:]

    @property
    def frames(self):
        return self.samples.shape[1] // IMU_PER_FRAME


@dataclass
class ImuStream:
    """Raw timestamped 6-channel stream for one person."""

    person_id: int
    timestamps: np.ndarray    # (K,) int64 ns, strictly increasing
    values: np.ndarray        # (K, 6)


@dataclass
class PersonTracks:
    """All per-frame observations of one person in a recording.

    Rows exist only for frames where the person was observed.
    """

    person_id: int
    frames: np.ndarray        # (n,) int, increasing
    box: np.ndarray           # (n, 4) h, w, cx, cy
    keypoints: np.ndarray     # (n, 4)
    parts: dict = field(default_factory=dict)   # part_id -> (n, 2) flow


# ---------------------------------------------------------------------------
# Inertial operations
# ---------------------------------------------------------------------------

def window_target_times(start_ns, n_frames, fps=VIDEO_FPS):
    """Uniform sample instants covering ``n_frames`` video frames, 3 per frame."""
    n = IMU_PER_FRAME * n_frames
    offsets = np.arange(n, dtype=np.float64) * (NS_PER_S / (fps * IMU_PER_FRAME))
    return start_ns + np.round(offsets).astype(np.int64)


def resample_imu(stream: ImuStream, start_ns: int, n_frames: int, fps=VIDEO_FPS) -> ImuWindow:
    """Pick the raw sample nearest to each of 3T uniform target instants."""
    ts = np.asarray(stream.timestamps, dtype=np.int64)
    if len(ts) < 2:
        raise IngestionError(f"person {stream.person_id}: IMU stream too short")
    period = float(np.median(np.diff(ts)))
    targets = window_target_times(start_ns, n_frames, fps)
    lo, hi = targets[0], targets[-1]
    reach = int(3 * period)
    sel = ts[(ts >= lo - reach) & (ts <= hi + reach)]
    ext = np.sort(np.concatenate([[lo], sel, [hi]]))
    gaps = np.diff(ext)
    if gaps.size and gaps.max() > 3 * period:
        k = int(np.argmax(gaps))
        raise IngestionError(
            f"person {stream.person_id}: IMU coverage gap of {gaps[k] / 1e6:.1f} ms "
            f"starting at {ext[k]} ns (limit {3 * period / 1e6:.1f} ms)")
    right = np.searchsorted(ts, targets, side="left").clip(1, len(ts) - 1)
    left = right - 1
    take_left = (targets - ts[left]) <= (ts[right] - targets)
    idx = np.where(take_left, left, right)
    return ImuWindow(stream.person_id, np.ascontiguousarray(stream.values[idx].T), ts[idx])


def butter_lowpass(cutoff_hz, fs, order=2):
    nyq = 0.5 * fs
    if not 0 < cutoff_hz < nyq:
        raise ValueError(f"cutoff {cutoff_hz} Hz must lie in (0, {nyq}) Hz")
    return signal.butter(order, cutoff_hz / nyq, btype="low")


def low_pass_filter(window: ImuWindow, cutoff_hz=5.0, fs=VIDEO_FPS * IMU_PER_FRAME,
                    order=2) -> ImuWindow:
    """Zero-phase Butterworth low-pass applied channel by channel."""
    b, a = butter_lowpass(cutoff_hz, fs, order)
    filtered = signal.filtfilt(b, a, window.samples, axis=1)
    return ImuWindow(window.person_id, np.ascontiguousarray(filtered), window.timestamps.copy())


def motion_filter(imu: ImuWindow, threshold=0.02) -> bool:
    """Keep a window only if the acceleration magnitude actually varies."""
    mag = np.linalg.norm(imu.accel, axis=0)
    return bool(np.std(mag) >= threshold)


# ---------------------------------------------------------------------------
# Visual operations
# ---------------------------------------------------------------------------

def interpolate_gaps(values, observed):
    """Linearly fill interior gaps; frames before the first / after the last
    observation become zeros and are flagged invalid in the returned mask.

    ``values`` is (T, D); ``observed`` a boolean (T,) array.
    """
    values = np.asarray(values, dtype=np.float64)
    observed = np.asarray(observed, dtype=bool)
    out = np.zeros_like(values)
    mask = np.zeros(len(observed), dtype=bool)
    idx = np.flatnonzero(observed)
    if idx.size == 0:
        return out, mask
    first, last = idx[0], idx[-1]
    span = np.arange(first, last + 1)
    for d in range(values.shape[1]):
        out[first: last + 1, d] = np.interp(span, idx, values[idx, d])
    out[observed] = values[observed]
    mask[first: last + 1] = True
    return out, mask


def pad_exit(track, length):
    """Append zero rows up to ``length``; returns (padded, mask)."""
    track = np.asarray(track, dtype=np.float64)
    if track.ndim == 1:
        track = track[:, None]
    n = track.shape[0]
    if n > length:
        raise ValueError(f"track of length {n} exceeds window length {length}")
    out = np.zeros((length, track.shape[1]), dtype=np.float64)
    out[:n] = track
    mask = np.zeros(length, dtype=bool)
    mask[:n] = True
    return out, mask


def window_count(n_frames, window, step):
    if n_frames < window:
        return 0
    return (n_frames - window) // step + 1


def window_starts(n_frames, window, step):
    return [step * k for k in range(window_count(n_frames, window, step))]


def person_window(tracks: PersonTracks, start, length):
    """Cut one person's observations to ``[start, start + length)``.

    Returns None if the person is never observed inside the window.
    """
    rel = tracks.frames - start
    inside = (rel >= 0) & (rel < length)
    if not inside.any():
        return None
    observed = np.zeros(length, dtype=bool)
    observed[rel[inside]] = True

    def fill(rows):
        dense = np.zeros((length, rows.shape[1]))
        dense[rel[inside]] = rows[inside]
        return interpolate_gaps(dense, observed)

    box, mask = fill(tracks.box[:, :2])
    kp, _ = fill(tracks.keypoints)
    parts = []
    for part_id in sorted(tracks.parts):
        flow, _ = fill(tracks.parts[part_id])
        parts.append(PartTrack(tracks.person_id, part_id, flow))
    if not parts:
        return None
    return PersonWindow(tracks.person_id, parts, BoxTrack(tracks.person_id, box),
                        KeypointTrack(tracks.person_id, kp), start, mask)


def visual_arrays(pw: PersonWindow, image_height):
    """Network inputs for one person: flows (P, T, 2), keypoints (T, 4), box (T, 2).

    Box sizes and keypoint offsets are divided by the image height.
    """
    flows = np.stack([p.flow for p in pw.parts])
    return flows, pw.keypoints.points / image_height, pw.box.sizes / image_height


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def _fmt(x):
    return repr(float(x))


def write_tracks(path, people):
    """Write PersonTracks as one row per (frame, person)."""
    rows = []
    for pt in people:
        part_ids = sorted(pt.parts)
        for k, frame in enumerate(pt.frames):
            row = [str(int(frame)), str(pt.person_id)]
            row += [_fmt(v) for v in pt.box[k]]
            row += [_fmt(v) for v in pt.keypoints[k]]
            for pid in part_ids:
                dx, dy = pt.parts[pid][k]
                row += [str(pid), _fmt(dx), _fmt(dy)]
            rows.append((int(frame), pt.person_id, row))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACK_COLUMNS + ["part_id", "dx", "dy", "..."])
        for _, _, row in rows:
            w.writerow(row)


def read_tracks(path):
    """Parse a track file into ``{person_id: PersonTracks}``."""
    per_person = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return {}
        if header[: len(TRACK_COLUMNS)] != TRACK_COLUMNS:
            raise ParseError(path, 1, f"bad header {header[:len(TRACK_COLUMNS)]}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            extra = row[len(TRACK_COLUMNS):]
            if len(row) < len(TRACK_COLUMNS) or len(extra) % 3:
                raise ParseError(path, line, f"expected 10 fields plus part triples, got {len(row)}")
            try:
                frame, pid = int(row[0]), int(row[1])
                nums = [float(v) for v in row[2: len(TRACK_COLUMNS)]]
                parts = {int(extra[i]): (float(extra[i + 1]), float(extra[i + 2]))
                         for i in range(0, len(extra), 3)}
            except ValueError as exc:
                raise ParseError(path, line, str(exc)) from None
            if not np.all(np.isfinite(nums)) or not all(np.isfinite(v).all() for v in parts.values()):
                raise ParseError(path, line, "non-finite value")
            per_person.setdefault(pid, []).append((frame, nums, parts, line))
    out = {}
    for pid, recs in per_person.items():
        recs.sort(key=lambda r: r[0])
        frames = np.array([r[0] for r in recs], dtype=np.int64)
        if np.any(np.diff(frames) <= 0):
            dup = recs[int(np.argmin(np.diff(frames))) + 1]
            raise ParseError(path, dup[3], f"duplicate frame {dup[0]} for person {pid}")
        part_ids = sorted(recs[0][2])
        for r in recs:
            if sorted(r[2]) != part_ids:
                raise ParseError(path, r[3], f"person {pid} part set changes to {sorted(r[2])}")
        vals = np.array([r[1] for r in recs])
        parts = {p: np.array([r[2][p] for r in recs]) for p in part_ids}
        out[pid] = PersonTracks(pid, frames, vals[:, :4], vals[:, 4:], parts)
    return out


def write_imu(path, streams):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(IMU_COLUMNS)
        for st in sorted(streams, key=lambda s: s.person_id):
            for ts, vals in zip(st.timestamps, st.values):
                w.writerow([str(int(ts)), str(st.person_id)] + [_fmt(v) for v in vals])


def read_imu(path):
    """Parse an IMU file into ``{person_id: ImuStream}``."""
    per_person = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return {}
        if header != IMU_COLUMNS:
            raise ParseError(path, 1, f"bad header {header}")
        for row in reader:
            if not row:
                continue
            if len(row) != len(IMU_COLUMNS):
                raise ParseError(path, reader.line_num, f"expected 8 fields, got {len(row)}")
            try:
                ts, pid = int(row[0]), int(row[1])
                vals = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise ParseError(path, reader.line_num, str(exc)) from None
            per_person.setdefault(pid, ([], []))
            per_person[pid][0].append(ts)
            per_person[pid][1].append(vals)
    out = {}
    for pid, (ts, vals) in per_person.items():
        ts = np.array(ts, dtype=np.int64)
        order = np.argsort(ts, kind="stable")
        ts, vals = ts[order], np.array(vals)[order]
        if np.any(np.diff(ts) <= 0):
            raise IngestionError(f"{path}: person {pid} has non-increasing IMU timestamps")
        out[pid] = ImuStream(pid, ts, vals)
    return out


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------

@dataclass
class WindowGroup:
    """Everything observed in one sliding window of one recording."""

    recording_id: str
    start_frame: int
    n_people: int
    persons: dict             # person_id -> PersonWindow
    imus: dict                # person_id -> ImuWindow
    keep: dict                # person_id -> passes motion filter

    def targets(self):
        return [pid for pid in sorted(self.imus) if self.keep[pid] and pid in self.persons]


@dataclass
class WindowReport:
    windows: int = 0
    samples: int = 0
    filtered: int = 0
    failures: list = field(default_factory=list)

    @property
    def filtered_fraction(self):
        return self.filtered / self.samples if self.samples else 0.0


def build_windows(recording_id, tracks, streams, video_start_ns, n_frames, window=150,
                  step=20, motion_threshold=0.02, lpf_cutoff_hz=5.0, n_people=None,
                  report=None):
    """Segment one recording into WindowGroups.

    The motion filter is evaluated on low-pass filtered acceleration so the
    sensor-noise floor of a still phone stays under the threshold.
    """
    report = report if report is not None else WindowReport()
    missing = set(tracks) ^ set(streams)
    if missing:
        raise ConsistencyError(
            f"{recording_id}: persons {sorted(missing)} present in only one modality")
    n_people = n_people if n_people is not None else len(tracks)
    groups = []
    for start in window_starts(n_frames, window, step):
        t0 = video_start_ns + int(round(start * NS_PER_S / VIDEO_FPS))
        persons, imus, keep = {}, {}, {}
        for pid in sorted(tracks):
            try:
                imu = resample_imu(streams[pid], t0, window)
            except IngestionError as exc:
                report.failures.append(f"{recording_id}@{start}: {exc}")
                continue
            pw = person_window(tracks[pid], start, window)
            if pw is None:
                report.failures.append(f"{recording_id}@{start}: person {pid} not visible")
                continue
            mean_mag = float(np.linalg.norm(imu.accel, axis=0).mean())
            if mean_mag >= 3.0:
                report.failures.append(
                    f"{recording_id}@{start}: person {pid} mean |a| {mean_mag:.2f} m/s^2, "
                    "gravity not removed?")
                continue
            persons[pid], imus[pid] = pw, imu
            keep[pid] = motion_filter(low_pass_filter(imu, lpf_cutoff_hz), motion_threshold)
            report.samples += 1
            report.filtered += not keep[pid]
        if persons:
            groups.append(WindowGroup(recording_id, start, n_people, persons, imus, keep))
            report.windows += 1
    return groups


def ingest_tracks(path, window=150, step=20):
    """Windowed PersonWindows from a track file (visual side only)."""
    tracks = read_tracks(path)
    if not tracks:
        return []
    n_frames = max(int(t.frames[-1]) for t in tracks.values()) + 1
    out = []
    for start in window_starts(n_frames, window, step):
        for pid in sorted(tracks):
            pw = person_window(tracks[pid], start, window)
            if pw is not None:
                out.append(pw)
    return out


def ingest_imu(path):
    return read_imu(path)
