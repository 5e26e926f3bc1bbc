"""Comparison matchers: hand-crafted magnitude features matched by cosine
distance, and two supervised cross-modal regressors.
"""

from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import features as F
from .embedding import argmin_person, inertial_matrix
from .nn import AdamState, Conv1d, Dense, Lstm, adam_step

log = logging.getLogger(__name__)

N_BINS = 150
IMU_DT = 1.0 / (F.VIDEO_FPS * F.IMU_PER_FRAME)


class BaselineKind(enum.Enum):
    VelMag = "Velocity Magnitude"
    AccelMag = "Acceleration Magnitude"
    VelMagHist = "Velocity Mag. Histogram"
    AccelMagHist = "Accel. Mag. Histogram"
    Orientation3D = "3D Orientation"
    Flow2D = "2D Optical Flow"

    @property
    def label(self):
        return f"{list(BaselineKind).index(self) + 1}) {self.value}"

    @property
    def supervised(self):
        return self in (BaselineKind.Orientation3D, BaselineKind.Flow2D)


# ---------------------------------------------------------------------------
# Hand-crafted features
# ---------------------------------------------------------------------------

def integrate_velocity(imu, dt=IMU_DT):
    """Rectangle-rule velocity from rest: v_t = v_{t-1} + a_t dt, v_{-1} = 0.

    Accepts an ImuWindow or a (3, K) acceleration array; returns (3, K).
    """
    acc = imu.accel if isinstance(imu, F.ImuWindow) else np.asarray(imu, dtype=np.float64)
    return np.cumsum(acc * dt, axis=-1)


def cosine_distance(u, v):
    """1 - cos(u, v); 2 (maximal) when either vector is all zeros."""
    u = np.ravel(u)
    v = np.ravel(v)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 2.0
    return float(1.0 - np.dot(u, v) / (nu * nv))


def histogram(sequence, n_bins=N_BINS, value_range=None):
    """Normalised histogram; values above the range land in the top bin."""
    x = np.asarray(sequence, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("histogram of an empty sequence")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    lo, hi = value_range if value_range is not None else (float(x.min()), float(x.max()))
    if hi <= lo:
        hi = lo + 1.0
    x = np.clip(x, lo, hi)
    counts, _ = np.histogram(x, bins=n_bins, range=(lo, hi))
    return counts / counts.sum()


def _match_length(a, b):
    """Linearly resample the longer 1D sequence onto the shorter one's length."""
    if len(a) == len(b):
        return a, b
    warnings.warn(f"resampling sequences of length {len(a)} and {len(b)} to the shorter",
                  stacklevel=3)
    n = min(len(a), len(b))

    def squeeze(x):
        if len(x) == n:
            return x
        return np.interp(np.linspace(0, len(x) - 1, n), np.arange(len(x)), x)
    return squeeze(a), squeeze(b)


def visual_velocity_magnitude(part: F.PartTrack):
    return np.linalg.norm(part.flow, axis=1)


def visual_accel_magnitude(part: F.PartTrack):
    return np.linalg.norm(np.diff(part.flow, axis=0), axis=1)


def inertial_velocity_magnitude(imu: F.ImuWindow):
    return np.linalg.norm(integrate_velocity(imu), axis=0)


def inertial_accel_magnitude(imu: F.ImuWindow):
    return np.linalg.norm(imu.accel, axis=0)


_FEATURES = {
    BaselineKind.VelMag: (visual_velocity_magnitude, inertial_velocity_magnitude),
    BaselineKind.VelMagHist: (visual_velocity_magnitude, inertial_velocity_magnitude),
    BaselineKind.AccelMag: (visual_accel_magnitude, inertial_accel_magnitude),
    BaselineKind.AccelMagHist: (visual_accel_magnitude, inertial_accel_magnitude),
}


@dataclass
class HistogramRanges:
    """Upper bin edges per (kind, modality), from training-corpus 99th percentiles."""

    visual_velocity: float = 1.0
    inertial_velocity: float = 1.0
    visual_accel: float = 1.0
    inertial_accel: float = 1.0

    def for_kind(self, kind):
        if kind is BaselineKind.VelMagHist:
            return (0.0, self.visual_velocity), (0.0, self.inertial_velocity)
        return (0.0, self.visual_accel), (0.0, self.inertial_accel)


def fit_histogram_ranges(groups, percentile=99.0):
    vv, iv, va, ia = [], [], [], []
    for g in groups:
        for pw in g.persons.values():
            m = pw.mask
            for part in pw.parts:
                vv.append(visual_velocity_magnitude(part)[m])
                va.append(visual_accel_magnitude(part)[m[1:] & m[:-1]])
        for pid in g.targets():
            iv.append(inertial_velocity_magnitude(g.imus[pid]))
            ia.append(inertial_accel_magnitude(g.imus[pid]))

    def p(chunks):
        x = np.concatenate(chunks) if chunks else np.zeros(1)
        v = float(np.percentile(x, percentile)) if x.size else 1.0
        return v if v > 0 else 1.0
    return HistogramRanges(p(vv), p(iv), p(va), p(ia))


def frame_aligned(kind, q, n_visual):
    """Inertial magnitudes averaged to one value per video frame.

    Visual acceleration comes from frame differences, so it starts one frame
    late; the first inertial frame is dropped to match.
    """
    per_frame = block_mean(q)
    if kind in (BaselineKind.AccelMag, BaselineKind.AccelMagHist) and \
            len(per_frame) == n_visual + 1:
        per_frame = per_frame[1:]
    return per_frame


def feature_distance(kind, pw: F.PersonWindow, imu: F.ImuWindow, ranges=None):
    """Mean over the candidate's part tracks of the cosine distance."""
    vis_fn, imu_fn = _FEATURES[kind]
    q = imu_fn(imu)
    dists = []
    for part in pw.parts:
        v = vis_fn(part)
        if kind in (BaselineKind.VelMagHist, BaselineKind.AccelMagHist):
            ranges = ranges or HistogramRanges()
            r_vis, r_imu = ranges.for_kind(kind)
            dists.append(cosine_distance(histogram(v, N_BINS, r_vis), histogram(q, N_BINS, r_imu)))
        else:
            a, b = _match_length(v, frame_aligned(kind, q, len(v)))
            dists.append(cosine_distance(a, b))
    return float(np.mean(dists))


# ---------------------------------------------------------------------------
# Supervised regressors
# ---------------------------------------------------------------------------

class SequenceRegressor:
    """LSTM (optionally behind a width-3 stride-3 conv) followed by a dense head."""

    def __init__(self, in_dim, out_dim, hidden_dim=32, conv_channels=None, seed=0):
        rng = np.random.default_rng(seed)
        self.conv = Conv1d(in_dim, conv_channels, 3, stride=3, rng=rng) if conv_channels else None
        self.lstm = Lstm(conv_channels or in_dim, hidden_dim, rng)
        self.head = Dense(hidden_dim, out_dim, rng)
        self.in_mean = np.zeros(in_dim)
        self.in_std = np.ones(in_dim)
        self.curve = []

    def params(self):
        out = {f"lstm.{k}": v for k, v in self.lstm.params().items()}
        out.update({f"head.{k}": v for k, v in self.head.params().items()})
        if self.conv is not None:
            out.update({f"conv.{k}": v for k, v in self.conv.params().items()})
        return out

    def forward(self, x):
        """x: (B, T, D) without conv, (B, C, 3T) with conv."""
        if self.conv is not None:
            xn = (x - self.in_mean[None, :, None]) / self.in_std[None, :, None]
            y, cc = self.conv.forward(xn)
            seq = y.transpose(0, 2, 1)
        else:
            seq, cc = (x - self.in_mean) / self.in_std, None
        h, lc = self.lstm.forward(seq)
        out, dc = self.head.forward(h)
        return out, (cc, lc, dc)

    def backward(self, cache, dout):
        cc, lc, dc = cache
        g_head, dh = self.head.backward(dc, dout)
        g_lstm, dseq = self.lstm.backward(lc, dh)
        grads = {f"lstm.{k}": v for k, v in g_lstm.items()}
        grads.update({f"head.{k}": v for k, v in g_head.items()})
        if self.conv is not None:
            g_conv, _ = self.conv.backward(cc, dseq.transpose(0, 2, 1))
            grads.update({f"conv.{k}": v for k, v in g_conv.items()})
        return grads

    def fit(self, X, Y, mask, epochs=8, lr=3e-3, batch=64, seed=0):
        """Masked mean-squared-error regression; returns the loss curve."""
        axis = 1 if self.conv is not None else 2
        flat = np.moveaxis(X, axis, -1).reshape(-1, X.shape[axis])
        self.in_mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        self.in_std = np.where(std > 1e-9, std, 1.0)
        state = AdamState(lr=lr)
        params = self.params()
        curve = []
        m = mask[..., None].astype(np.float64)
        for epoch in range(epochs):
            rng = np.random.default_rng([seed, epoch])
            order = rng.permutation(len(X))
            tot = 0.0
            for b in range(0, len(order), batch):
                idx = order[b: b + batch]
                pred, cache = self.forward(X[idx])
                err = (pred - Y[idx]) * m[idx]
                denom = max(m[idx].sum() * Y.shape[-1], 1.0)
                tot += float((err * err).sum())
                grads = self.backward(cache, 2.0 * err / denom)
                adam_step(state, params, grads)
            curve.append(tot / max(m.sum() * Y.shape[-1], 1.0))
        self.curve = curve
        return curve

    def predict(self, X):
        out, _ = self.forward(X)
        return out


def block_mean(x, k=F.IMU_PER_FRAME):
    """Average consecutive groups of ``k`` samples along the last axis."""
    n = x.shape[-1] // k
    return x[..., : n * k].reshape(x.shape[:-1] + (n, k)).mean(axis=-1)


def _pose_inputs(pw, image_height):
    _, kp, box = F.visual_arrays(pw, image_height)
    return np.concatenate([kp, box], axis=1)


def train_orientation_regressor(groups, image_height=389, hidden_dim=32, epochs=8, seed=0):
    """Keypoint + box sequence -> per-frame angular velocity of the target's phone.

    Stand-in for an image-based orientation-change network.
    """
    X, Y, M = [], [], []
    for g in groups:
        for pid in g.targets():
            pw = g.persons.get(pid)
            if pw is None:
                continue
            X.append(_pose_inputs(pw, image_height))
            Y.append(block_mean(g.imus[pid].gyro).T)
            M.append(pw.mask)
    reg = SequenceRegressor(6, 3, hidden_dim, seed=seed)
    if X:
        reg.fit(np.stack(X), np.stack(Y), np.stack(M), epochs=epochs, seed=seed)
    return reg


def train_flow_regressor(groups, representation="lpf", hidden_dim=32, conv_channels=16,
                         epochs=8, seed=0, cutoff_hz=5.0):
    """Inertial window -> the target's part-averaged 2D flow sequence."""
    X, Y, M = [], [], []
    for g in groups:
        for pid in g.targets():
            pw = g.persons.get(pid)
            if pw is None or not pw.parts:
                continue
            X.append(inertial_matrix(g.imus[pid], representation, cutoff_hz))
            Y.append(np.mean([p.flow for p in pw.parts], axis=0))
            M.append(pw.mask)
    C = X[0].shape[0] if X else 6
    reg = SequenceRegressor(C, 2, hidden_dim, conv_channels=conv_channels, seed=seed)
    if X:
        reg.fit(np.stack(X), np.stack(Y), np.stack(M), epochs=epochs, seed=seed)
    return reg


def baseline_distances(kind, candidates, query: F.ImuWindow, regressor=None, ranges=None,
                       representation="lpf", image_height=389, cutoff_hz=5.0):
    """Distance of every candidate (with part tracks) to the query."""
    kind = BaselineKind(kind) if not isinstance(kind, BaselineKind) else kind
    if kind.supervised and regressor is None:
        raise ValueError(f"{kind.name} needs a trained regressor")
    out = {}
    if kind is BaselineKind.Orientation3D:
        target = block_mean(query.gyro).T
        for pw in candidates:
            pred = regressor.predict(_pose_inputs(pw, image_height)[None])[0]
            out[pw.person_id] = cosine_distance(pred[pw.mask], target[pw.mask])
    elif kind is BaselineKind.Flow2D:
        x = inertial_matrix(query, representation, cutoff_hz)[None]
        pred = regressor.predict(x)[0]
        for pw in candidates:
            if pw.parts:
                out[pw.person_id] = float(np.mean(
                    [cosine_distance(pred[pw.mask], p.flow[pw.mask]) for p in pw.parts]))
    else:
        for pw in candidates:
            if pw.parts:
                out[pw.person_id] = feature_distance(kind, pw, query, ranges)
    return out


def baseline_match(kind, candidates, query: F.ImuWindow, regressor=None, ranges=None,
                   representation="lpf", image_height=389, cutoff_hz=5.0):
    """Predicted person id; ties go to the smallest id."""
    d = baseline_distances(kind, candidates, query, regressor, ranges, representation,
                           image_height, cutoff_hz)
    if not d:
        raise ValueError("no candidate has part tracks")
    ids = sorted(d)
    return argmin_person([d[i] for i in ids], ids)
