"""Joint visual-inertial embedding: encoders, losses, training and matching.

Visual embedding of one part track (flow ``v``) of a person with shoulder
keypoints ``k`` and box sizes ``b``::

    H_vis = f_of(v) + alpha * f_pose(k) + beta * f_box(b)

Inertial embedding of a 6 x 3T window ``g``::

    H_imu = f_imu(conv(g))        # conv: width 3, stride 3 -> T steps

Both are T x hidden sequences of LSTM hidden states, compared with an L2
norm over all unmasked timesteps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import features as F
from .nn import (AdamState, Conv1d, DimensionError, Lstm, adam_step, load_arrays,
                 save_arrays)

log = logging.getLogger(__name__)

REPRESENTATIONS = {
    "v_a_w": ("(v, a, w)", 9),
    "a_w": ("(a, w)", 6),
    "v_w": ("(v, w)", 6),
    "lpf": ("(a_LPF, w_LPF)", 6),
}


class DistanceError(ValueError):
    pass


def inertial_matrix(imu: F.ImuWindow, representation="lpf", cutoff_hz=5.0):
    """Inertial network input for one window, (C, 3T)."""
    from .baselines import integrate_velocity

    if representation == "lpf":
        return F.low_pass_filter(imu, cutoff_hz).samples
    if representation == "a_w":
        return imu.samples
    vel = integrate_velocity(imu)
    if representation == "v_a_w":
        return np.concatenate([vel, imu.samples], axis=0)
    if representation == "v_w":
        return np.concatenate([vel, imu.gyro], axis=0)
    raise ValueError(f"unknown inertial representation {representation!r}")


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class EmbeddingModel:
    """Four LSTM encoders plus the inertial conv front end."""

    LAYERS = ("f_of", "f_pose", "f_box", "imu_conv", "f_imu")

    def __init__(self, hidden_dim=32, imu_channels=6, conv_channels=16, alpha=0.5, beta=0.2,
                 kappa=1.0, seed=0):
        rng = np.random.default_rng(seed)
        self.hidden_dim = hidden_dim
        self.f_of = Lstm(2, hidden_dim, rng)
        self.f_pose = Lstm(4, hidden_dim, rng)
        self.f_box = Lstm(2, hidden_dim, rng)
        self.imu_conv = Conv1d(imu_channels, conv_channels, 3, stride=3, rng=rng)
        self.f_imu = Lstm(conv_channels, hidden_dim, rng)
        self.alpha, self.beta, self.kappa = float(alpha), float(beta), float(kappa)
        if min(self.alpha, self.beta) < 0 or self.kappa <= 0:
            raise ValueError("alpha, beta must be >= 0 and kappa > 0")
        self.stats = {
            "of": (np.zeros(2), np.ones(2)),
            "pose": (np.zeros(4), np.ones(4)),
            "box": (np.zeros(2), np.ones(2)),
            "imu": (np.zeros(imu_channels), np.ones(imu_channels)),
        }

    @property
    def imu_channels(self):
        return self.imu_conv.in_channels

    def params(self):
        out = {}
        for name in self.LAYERS:
            for k, v in getattr(self, name).params().items():
                out[f"{name}.{k}"] = v
        return out

    def copy_params(self):
        return {k: v.copy() for k, v in self.params().items()}

    def set_params(self, values):
        for k, v in self.params().items():
            v[...] = values[k]

    # -- input normalisation -------------------------------------------------

    def fit_stats(self, groups, representation="lpf", image_height=389, cutoff_hz=5.0):
        """Per-channel mean/std over observed frames of the given groups."""
        acc = {"of": [], "pose": [], "box": [], "imu": []}
        for g in groups:
            for pw in g.persons.values():
                flows, kp, box = F.visual_arrays(pw, image_height)
                m = pw.mask
                acc["of"].append(flows[:, m].reshape(-1, 2))
                acc["pose"].append(kp[m])
                acc["box"].append(box[m])
            for pid in g.targets():
                acc["imu"].append(inertial_matrix(g.imus[pid], representation, cutoff_hz).T)
        for key, chunks in acc.items():
            if not chunks:
                continue
            x = np.concatenate(chunks)
            std = x.std(axis=0)
            self.stats[key] = (x.mean(axis=0), np.where(std > 1e-9, std, 1.0))

    def _norm(self, key, x, mask=None):
        mean, std = self.stats[key]
        out = (x - mean) / std
        if mask is not None:
            out = out * mask[..., None]
        return out

    # -- encoders ----------------------------------------------------------------

    def visual_forward(self, flows, pose, box, mask, owner=None):
        """Embed P part tracks.

        flows (P, T, 2); pose (M, T, 4); box (M, T, 2); mask (M, T);
        ``owner[p]`` indexes the person row of part ``p`` (identity if None).
        Returns (P, T, H) embeddings and a cache for ``visual_backward``.
        """
        flows = np.asarray(flows, dtype=np.float64)
        P, T = flows.shape[:2]
        owner = np.arange(P) if owner is None else np.asarray(owner)
        mask = np.asarray(mask, dtype=np.float64)
        if pose.shape[1] != T or box.shape[1] != T or mask.shape[1] != T:
            raise DimensionError(
                f"visual tracks disagree on time axis (1): flow {T}, keypoints {pose.shape[1]}, "
                f"box {box.shape[1]}, mask {mask.shape[1]}")
        h_of, c_of = self.f_of.forward(self._norm("of", flows, mask[owner]))
        out = h_of.copy()
        cache = {"owner": owner, "M": pose.shape[0], "of": c_of}
        if self.alpha != 0.0:
            h_pose, cache["pose"] = self.f_pose.forward(self._norm("pose", pose, mask))
            out += self.alpha * h_pose[owner]
        if self.beta != 0.0:
            h_box, cache["box"] = self.f_box.forward(self._norm("box", box, mask))
            out += self.beta * h_box[owner]
        return out, cache

    def visual_backward(self, cache, dE):
        grads = {}
        g, _ = self.f_of.backward(cache["of"], dE)
        grads.update({f"f_of.{k}": v for k, v in g.items()})
        owner, M = cache["owner"], cache["M"]
        per_person = None
        if "pose" in cache or "box" in cache:
            per_person = np.zeros((M,) + dE.shape[1:])
            np.add.at(per_person, owner, dE)
        for name, w in (("pose", self.alpha), ("box", self.beta)):
            layer = getattr(self, f"f_{name}")
            if name in cache:
                g, _ = layer.backward(cache[name], w * per_person)
            else:
                g = {k: np.zeros_like(v) for k, v in layer.params().items()}
            grads.update({f"f_{name}.{k}": v for k, v in g.items()})
        return grads

    def inertial_forward(self, imu):
        """Embed (B, C, 3T) inertial inputs into (B, T, H)."""
        imu = np.asarray(imu, dtype=np.float64)
        if imu.ndim == 2:
            imu = imu[None]
        if imu.shape[2] % 3:
            raise DimensionError(f"inertial time axis (2) has {imu.shape[2]} samples, not 3T")
        mean, std = self.stats["imu"]
        x = (imu - mean[None, :, None]) / std[None, :, None]
        y, c_conv = self.imu_conv.forward(x)
        h, c_lstm = self.f_imu.forward(y.transpose(0, 2, 1))
        return h, {"conv": c_conv, "lstm": c_lstm}

    def inertial_backward(self, cache, dE):
        grads = {}
        g, dy = self.f_imu.backward(cache["lstm"], dE)
        grads.update({f"f_imu.{k}": v for k, v in g.items()})
        g, _ = self.imu_conv.backward(cache["conv"], dy.transpose(0, 2, 1))
        grads.update({f"imu_conv.{k}": v for k, v in g.items()})
        return grads

    # -- persistence ---------------------------------------------------------------

    def state_arrays(self):
        arrays = dict(self.params())
        for key, (m, s) in self.stats.items():
            arrays[f"stats.{key}_mean"] = m
            arrays[f"stats.{key}_std"] = s
        arrays["alpha"] = np.array(self.alpha)
        arrays["beta"] = np.array(self.beta)
        arrays["kappa"] = np.array(self.kappa)
        return arrays

    def save(self, path):
        save_arrays(path, self.state_arrays())

    @classmethod
    def load(cls, path):
        arrays = load_arrays(path)
        conv_w = arrays["imu_conv.W"]
        model = cls(hidden_dim=arrays["f_of.Wh"].shape[0], imu_channels=conv_w.shape[1],
                    conv_channels=conv_w.shape[0], alpha=float(arrays["alpha"]),
                    beta=float(arrays["beta"]), kappa=float(arrays["kappa"]))
        model.set_params(arrays)
        for key in model.stats:
            model.stats[key] = (arrays[f"stats.{key}_mean"], arrays[f"stats.{key}_std"])
        return model


@dataclass
class EmbeddingSequence:
    values: np.ndarray        # (T, H)
    mask: np.ndarray          # (T,) bool


def encode_visual(model: EmbeddingModel, part: F.PartTrack, box: F.BoxTrack,
                  keypoints: F.KeypointTrack, mask=None, image_height=389):
    T = part.flow.shape[0]
    if box.sizes.shape[0] != T or keypoints.points.shape[0] != T:
        raise DimensionError(
            f"track lengths differ: flow {T}, box {box.sizes.shape[0]}, "
            f"keypoints {keypoints.points.shape[0]}")
    mask = np.ones(T, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    E, _ = model.visual_forward(part.flow[None], (keypoints.points / image_height)[None],
                                (box.sizes / image_height)[None], mask[None])
    return EmbeddingSequence(E[0], mask)


def encode_inertial(model: EmbeddingModel, imu: F.ImuWindow, representation="lpf",
                    cutoff_hz=5.0):
    x = inertial_matrix(imu, representation, cutoff_hz)
    E, _ = model.inertial_forward(x[None])
    return EmbeddingSequence(E[0], np.ones(E.shape[1], dtype=bool))


# ---------------------------------------------------------------------------
# Distances and losses
# ---------------------------------------------------------------------------

def pair_distance(e_vis: EmbeddingSequence, e_imu: EmbeddingSequence):
    if e_vis.values.shape != e_imu.values.shape:
        raise DimensionError(f"embedding shapes differ: {e_vis.values.shape} vs {e_imu.values.shape}")
    mask = e_vis.mask & e_imu.mask
    if not mask.any():
        raise DistanceError("embeddings share no unmasked timestep")
    diff = (e_vis.values - e_imu.values)[mask]
    return float(np.sqrt(np.sum(diff * diff)))


def block_distances(E_vis, E_imu, mask):
    """Row-wise masked L2 distance between (n, T, H) stacks; mask (n, T)."""
    diff = (E_vis - E_imu) * mask[..., None]
    return np.sqrt(np.einsum("nth,nth->n", diff, diff)), diff


def timestep_distances(E_vis, E_imu, mask):
    """Mean over valid timesteps of per-timestep L2 distances."""
    d = np.linalg.norm(E_vis - E_imu, axis=-1)
    n = mask.sum(axis=-1)
    return (d * mask).sum(axis=-1) / np.maximum(n, 1)


def triplet_hinge(d_pos, d_neg, kappa):
    return np.maximum(d_pos - d_neg + kappa, 0.0)


def triplet_loss(model: EmbeddingModel, anchor: EmbeddingSequence, positive: EmbeddingSequence,
                 negative: EmbeddingSequence):
    d_pos = pair_distance(positive, anchor)
    d_neg = pair_distance(negative, anchor)
    return float(triplet_hinge(d_pos, d_neg, model.kappa))


def triplet_objective(E_imu, E_pos, E_neg, mask_pos, mask_neg, kappa, pair_weight=0.0):
    """Mean hinge loss over a batch and its gradients w.r.t. the three stacks."""
    d_pos, diff_pos = block_distances(E_pos, E_imu, mask_pos)
    d_neg, diff_neg = block_distances(E_neg, E_imu, mask_neg)
    hinge = triplet_hinge(d_pos, d_neg, kappa)
    n = len(hinge)
    loss = hinge.mean() + pair_weight * d_pos.mean()
    active = (hinge > 0).astype(np.float64)
    w_pos = (active + pair_weight) / (n * np.where(d_pos > 0, d_pos, np.inf))
    w_neg = -active / (n * np.where(d_neg > 0, d_neg, np.inf))
    g_pos = diff_pos * w_pos[:, None, None]
    g_neg = diff_neg * w_neg[:, None, None]
    return float(loss), g_pos, g_neg, -(g_pos + g_neg), hinge


# ---------------------------------------------------------------------------
# Prepared groups (network-ready arrays for one window)
# ---------------------------------------------------------------------------

@dataclass
class PreparedGroup:
    group: F.WindowGroup
    person_ids: list          # row order of pose/box/mask
    flows: np.ndarray         # (P, T, 2)
    owner: np.ndarray         # (P,)
    pose: np.ndarray          # (M, T, 4)
    box: np.ndarray           # (M, T, 2)
    mask: np.ndarray          # (M, T) bool
    targets: list             # person ids usable as queries
    imu: np.ndarray           # (len(targets), C, 3T)

    @property
    def n_candidates(self):
        return len(self.person_ids)


def prepare_group(group: F.WindowGroup, representation="lpf", image_height=389, cutoff_hz=5.0):
    pids, flows, owner, pose, box, mask = [], [], [], [], [], []
    for row, pid in enumerate(sorted(group.persons)):
        pw = group.persons[pid]
        if not pw.mask.any() or not pw.parts:
            continue
        f, kp, bx = F.visual_arrays(pw, image_height)
        pids.append(pid)
        flows.append(f)
        owner += [len(pids) - 1] * len(f)
        pose.append(kp)
        box.append(bx)
        mask.append(pw.mask)
    targets = [pid for pid in group.targets() if pid in pids]
    imu = [inertial_matrix(group.imus[pid], representation, cutoff_hz) for pid in targets]
    T = group.persons[pids[0]].length if pids else 0
    C = REPRESENTATIONS[representation][1]
    return PreparedGroup(
        group, pids,
        np.concatenate(flows) if flows else np.zeros((0, T, 2)),
        np.asarray(owner, dtype=np.int64),
        np.stack(pose) if pose else np.zeros((0, T, 4)),
        np.stack(box) if box else np.zeros((0, T, 2)),
        np.stack(mask) if mask else np.zeros((0, T), dtype=bool),
        targets,
        np.stack(imu) if imu else np.zeros((0, C, 3 * T)),
    )


def _concat_groups(prepared):
    flows, owner, pose, box, mask, imu = [], [], [], [], [], []
    offset = 0
    for pg in prepared:
        flows.append(pg.flows)
        owner.append(pg.owner + offset)
        pose.append(pg.pose)
        box.append(pg.box)
        mask.append(pg.mask)
        imu.append(pg.imu)
        offset += pg.n_candidates
    return (np.concatenate(flows), np.concatenate(owner), np.concatenate(pose),
            np.concatenate(box), np.concatenate(mask), np.concatenate(imu))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 10
    seed: int = 0
    groups_per_batch: int = 8
    pair_weight: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass
class TrainReport:
    loss_curve: list = field(default_factory=list)
    val_curve: list = field(default_factory=list)
    best_epoch: int = -1
    skipped_single_person: int = 0
    triplets_per_epoch: int = 0


def build_triplets(prepared, rng):
    """One triplet per positive part track of every target.

    Returns (imu_row, pos_part, neg_part) index arrays into the concatenation
    of ``prepared``; negatives are drawn uniformly from the part tracks of
    the other persons in the same window.
    """
    imu_rows, pos, neg = [], [], []
    part_off = imu_off = 0
    for pg in prepared:
        for t_row, pid in enumerate(pg.targets):
            person = pg.person_ids.index(pid)
            own = np.flatnonzero(pg.owner == person)
            others = np.flatnonzero(pg.owner != person)
            for p in own:
                imu_rows.append(imu_off + t_row)
                pos.append(part_off + p)
                neg.append(part_off + others[rng.integers(len(others))])
        part_off += len(pg.owner)
        imu_off += len(pg.targets)
    return np.array(imu_rows, dtype=np.int64), np.array(pos, dtype=np.int64), np.array(neg, dtype=np.int64)


def _forward_objective(model, prepared, triplets, pair_weight):
    flows, owner, pose, box, mask, imu = _concat_groups(prepared)
    rows, pos, neg = triplets
    E_vis, vcache = model.visual_forward(flows, pose, box, mask, owner)
    E_imu, icache = model.inertial_forward(imu)
    part_mask = mask[owner].astype(np.float64)
    out = triplet_objective(E_imu[rows], E_vis[pos], E_vis[neg], part_mask[pos], part_mask[neg],
                            model.kappa, pair_weight)
    return out, E_vis, E_imu, vcache, icache


def objective(model, prepared, triplets, pair_weight=0.0):
    """Loss only (no backward pass)."""
    return _forward_objective(model, prepared, triplets, pair_weight)[0][0]


def objective_and_grads(model, prepared, triplets, pair_weight=0.0):
    out, E_vis, E_imu, vcache, icache = _forward_objective(model, prepared, triplets,
                                                           pair_weight)
    loss, g_pos, g_neg, g_imu, _ = out
    rows, pos, neg = triplets
    dE_vis = np.zeros_like(E_vis)
    np.add.at(dE_vis, pos, g_pos)
    np.add.at(dE_vis, neg, g_neg)
    dE_imu = np.zeros_like(E_imu)
    np.add.at(dE_imu, rows, g_imu)
    grads = model.visual_backward(vcache, dE_vis)
    grads.update(model.inertial_backward(icache, dE_imu))
    return loss, grads


def train(model: EmbeddingModel, prepared, config: TrainConfig, val_prepared=None,
          progress=None):
    """Adam on the triplet objective; keeps the best-validation epoch if given."""
    state = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    report = TrainReport()
    usable = [pg for pg in prepared if pg.n_candidates >= 2 and pg.targets]
    report.skipped_single_person = sum(
        1 for pg in prepared if pg.n_candidates < 2 and pg.targets)
    params = model.params()
    best, best_rate = None, -1.0
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(usable))
        losses, weights = [], []
        n_trip = 0
        for b in range(0, len(order), config.groups_per_batch):
            batch = [usable[i] for i in order[b: b + config.groups_per_batch]]
            triplets = build_triplets(batch, rng)
            if len(triplets[0]) == 0:
                continue
            loss, grads = objective_and_grads(model, batch, triplets, config.pair_weight)
            if config.lr != 0.0:
                adam_step(state, params, grads)
            losses.append(loss)
            weights.append(len(triplets[0]))
            n_trip += len(triplets[0])
        mean_loss = float(np.average(losses, weights=weights)) if losses else float("nan")
        report.loss_curve.append(mean_loss)
        report.triplets_per_epoch = n_trip
        msg = f"epoch {epoch + 1}/{config.epochs} loss {mean_loss:.4f}"
        if val_prepared:
            rate = classification_rate(model, val_prepared)
            report.val_curve.append(rate)
            msg += f" val {rate:.3f}"
            if rate > best_rate:
                best_rate, best = rate, model.copy_params()
                report.best_epoch = epoch
        log.info(msg)
        if progress:
            progress(msg)
    if best is not None:
        model.set_params(best)
    else:
        report.best_epoch = config.epochs - 1
    return model, report


def mean_triplet_loss(model, prepared, seed=0):
    """Mean hinge over a fixed triplet draw (for before/after comparisons)."""
    usable = [pg for pg in prepared if pg.n_candidates >= 2 and pg.targets]
    rng = np.random.default_rng(seed)
    trip = build_triplets(usable, rng)
    loss, _ = objective_and_grads(model, usable, trip)
    return loss


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------

def candidate_distances(model, pg: PreparedGroup, distance="block"):
    """(targets x candidates) matrix of part-averaged distances."""
    E_vis, _ = model.visual_forward(pg.flows, pg.pose, pg.box, pg.mask, pg.owner)
    E_imu, _ = model.inertial_forward(pg.imu)
    part_mask = pg.mask[pg.owner].astype(np.float64)
    n_t, P = len(pg.targets), len(pg.owner)
    D = np.zeros((n_t, pg.n_candidates))
    for t in range(n_t):
        rep = np.broadcast_to(E_imu[t], E_vis.shape)
        if distance == "block":
            d, _ = block_distances(E_vis, rep, part_mask)
        elif distance == "timestep":
            d = timestep_distances(E_vis, rep, part_mask)
        else:
            raise ValueError(f"unknown distance mode {distance!r}")
        sums = np.bincount(pg.owner, weights=d, minlength=pg.n_candidates)
        counts = np.bincount(pg.owner, minlength=pg.n_candidates)
        D[t] = sums / counts
    return D


def argmin_person(distances, person_ids):
    """Index of the smallest distance; ties go to the smallest person id."""
    distances = np.asarray(distances, dtype=np.float64)
    best = distances.min()
    tied = [pid for pid, d in zip(person_ids, distances) if d == best]
    return min(tied)


def predict_group(model, pg: PreparedGroup, distance="block"):
    """Predicted person id for every target of a prepared window."""
    if not pg.targets:
        return {}
    D = candidate_distances(model, pg, distance)
    return {pid: argmin_person(D[t], pg.person_ids) for t, pid in enumerate(pg.targets)}


def classification_rate(model, prepared, distance="block"):
    correct = total = 0
    for pg in prepared:
        for pid, pred in predict_group(model, pg, distance).items():
            correct += pred == pid
            total += 1
    return correct / total if total else 0.0


@dataclass
class MatchResult:
    person_id: int
    distances: dict           # person_id -> mean distance
    excluded: list            # person ids without part tracks


def match(model, candidates, query: F.ImuWindow, representation="lpf", image_height=389,
          cutoff_hz=5.0, distance="block"):
    """Pick the candidate whose part-averaged distance to the query is smallest."""
    if not candidates:
        raise ValueError("match needs at least one candidate")
    e_imu = encode_inertial(model, query, representation, cutoff_hz)
    dists, excluded = {}, []
    for pw in candidates:
        if not pw.parts:
            excluded.append(pw.person_id)
            continue
        per_part = []
        for part in pw.parts:
            e_vis = encode_visual(model, part, pw.box, pw.keypoints, pw.mask, image_height)
            if distance == "block":
                per_part.append(pair_distance(e_vis, e_imu))
            else:
                per_part.append(float(timestep_distances(
                    e_vis.values[None], e_imu.values[None], e_vis.mask[None].astype(float))[0]))
        dists[pw.person_id] = float(np.mean(per_part))
    if not dists:
        raise ValueError("no candidate has part tracks")
    ids = sorted(dists)
    pred = argmin_person([dists[i] for i in ids], ids)
    return MatchResult(pred, dists, excluded)
