"""Synthetic pedestrian scenes: trajectories, projected body-part tracks and
hand-held IMU streams.

Kinematics are integrated on a 300 Hz grid so that the 30 Hz video clock
and the 100 Hz IMU clock both land on grid points (every 10th and every
3rd sample respectively).

World frame: X right, Y up, Z forward along the camera axis; ground at
Y = 0. Heading ``psi`` is the yaw of the body; its forward vector is
(sin psi, 0, cos psi).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .features import (ImuStream, PersonTracks, VIDEO_FPS, NS_PER_S, build_windows,
                       write_imu, write_tracks)

SIM_RATE = 300
FRAME_STRIDE = SIM_RATE // 30
IMU_STRIDE = SIM_RATE // 100
DT = 1.0 / SIM_RATE
BEHAVIORS = ("stand", "walk", "turn")
PART_NAMES = ("head", "torso", "left_hand", "right_hand", "legs")
BASE_EPOCH_NS = 1_600_000_000 * NS_PER_S


class GenerationError(RuntimeError):
    pass


@dataclass
class CameraModel:
    focal: float = 600.0
    width: int = 691
    height: int = 389
    mount_height: float = 1.0

    @property
    def cx(self):
        return (self.width - 1) / 2.0

    @property
    def cy(self):
        return (self.height - 1) / 2.0

    def project(self, pts):
        """Project (..., 3) world points; returns (..., 2) pixels and a
        validity mask (in front of the camera)."""
        pts = np.asarray(pts, dtype=np.float64)
        Z = pts[..., 2]
        valid = Z > 0.1
        Zs = np.where(valid, Z, 1.0)
        u = self.cx + self.focal * pts[..., 0] / Zs
        v = self.cy - self.focal * (pts[..., 1] - self.mount_height) / Zs
        return np.stack([u, v], axis=-1), valid


@dataclass
class SimConfig:
    stand_prob: float = 0.25
    turn_prob: float = 0.2
    stand_duration: tuple = (4.0, 10.0)
    walk_duration: tuple = (2.0, 6.0)
    turn_duration: tuple = (0.8, 1.6)
    walk_speed: tuple = (0.9, 1.5)
    gait_freq: tuple = (0.8, 1.0)         # arm-swing cycles per second
    arm_swing: float = 0.1                # m, fore-aft amplitude of the phone hand
    body_bob: float = 0.01                # m, vertical torso bob at twice the gait rate
    jitter_amp: float = 0.02              # rad, hand orientation jitter while moving
    jitter_freq: tuple = (4.0, 12.0)
    wander_amp: float = 0.3               # rad, slow phone yaw relative to the body while moving
    wander_freq: tuple = (0.1, 0.5)
    accel_noise: float = 0.05             # m/s^2
    gyro_noise: float = 0.01              # rad/s
    accel_bias: float = 0.0               # m/s^2, per-axis std of a constant bias
    flow_noise: float = 0.7               # px/frame
    keypoint_noise: float = 2.0           # px, pose-detector jitter on shoulders
    box_noise: float = 2.0                # px, detector jitter on box extents
    occlusion_rate: float = 0.05          # gaps per second per person
    occlusion_len: tuple = (3, 12)        # frames
    speed_tau: float = 0.4
    yaw_tau: float = 0.25
    depth_range: tuple = (5.0, 12.0)
    min_separation: float = 0.5
    noise: bool = True


@dataclass
class AgentTrajectory:
    agent_id: int
    position: np.ndarray      # (K, 3) torso ground point on the 300 Hz grid
    heading: np.ndarray       # (K,) wrapped to (-pi, pi]
    phase: np.ndarray         # (K,) gait phase
    swing: np.ndarray         # (K,) 0..1 motion scale
    schedule: list            # [(behavior, frames)]
    height: float = 1.75
    phone_side: float = 1.0   # +1 right hand, -1 left hand
    tilt: np.ndarray = field(default_factory=lambda: np.eye(3))
    jitter: np.ndarray = None  # (K,) yaw jitter in rad

    @property
    def frame_positions(self):
        return self.position[::FRAME_STRIDE]


@dataclass
class SceneRecording:
    recording_id: str
    seed: int
    camera: CameraModel
    agents: list
    n_frames: int
    video_start_ns: int
    tracks: dict              # person_id -> PersonTracks
    imu: dict                 # person_id -> ImuStream


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a) + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def rot_y(psi):
    c, s = np.cos(psi), np.sin(psi)
    R = np.zeros(np.shape(psi) + (3, 3))
    R[..., 0, 0] = c
    R[..., 0, 2] = s
    R[..., 1, 1] = 1.0
    R[..., 2, 0] = -s
    R[..., 2, 2] = c
    return R


def _in_region(x, z, cfg, camera):
    lo, hi = cfg.depth_range
    half = 0.8 * z * (camera.cx / camera.focal) - 0.4
    return lo <= z <= hi and abs(x) <= half


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

def _draw_segment(rng, cfg, stand_prob=None):
    p_stand = cfg.stand_prob if stand_prob is None else stand_prob
    u = rng.random()
    if u < p_stand:
        kind, span = "stand", cfg.stand_duration
    elif u < p_stand + cfg.turn_prob:
        kind, span = "turn", cfg.turn_duration
    else:
        kind, span = "walk", cfg.walk_duration
    return kind, int(round(rng.uniform(*span) * SIM_RATE))


def simulate_agents(n_agents, n_samples, rng, cfg, camera, behaviors=None):
    """Integrate all agents jointly so they can avoid each other.

    ``behaviors`` optionally forces a fixed behavior for every agent.
    """
    lo, hi = cfg.depth_range
    starts = []
    for _ in range(200 * n_agents):
        if len(starts) == n_agents:
            break
        z = rng.uniform(lo + 0.5, hi - 0.5)
        half = 0.8 * z * (camera.cx / camera.focal) - 0.4
        x = rng.uniform(-half, half)
        if all(math.hypot(x - a, z - b) >= 2 * cfg.min_separation + 0.5 for a, b in starts):
            starts.append((x, z))
    if len(starts) < n_agents:
        raise GenerationError(f"could not place {n_agents} agents without overlap")

    st = []
    for i in range(n_agents):
        st.append(dict(
            x=starts[i][0], z=starts[i][1], psi=rng.uniform(-np.pi, np.pi), v=0.0, yaw=0.0,
            phase=rng.uniform(0, 2 * np.pi), v_pref=rng.uniform(*cfg.walk_speed),
            f_gait=rng.uniform(*cfg.gait_freq), kind=None, left=0, turn_rate=0.0,
            schedule=[],
        ))
    pos = np.zeros((n_agents, n_samples, 3))
    head = np.zeros((n_agents, n_samples))
    phase = np.zeros((n_agents, n_samples))
    swing = np.zeros((n_agents, n_samples))
    a_v = DT / cfg.speed_tau
    a_w = DT / cfg.yaw_tau
    for k in range(n_samples):
        for i, s in enumerate(st):
            if s["left"] <= 0:
                if behaviors is not None:
                    kind, n = behaviors[i], n_samples
                else:
                    kind, n = _draw_segment(rng, cfg)
                s["kind"], s["left"] = kind, n
                if kind == "turn":
                    ang = rng.uniform(np.pi / 3, np.pi) * rng.choice([-1.0, 1.0])
                    s["turn_rate"] = ang / (n * DT)
                s["schedule"].append([kind, n])
            if s["kind"] == "walk" and k % FRAME_STRIDE == 0:
                # look 1 m ahead; steer away from region edges and other agents
                fx, fz = math.sin(s["psi"]), math.cos(s["psi"])
                nx, nz = s["x"] + fx, s["z"] + fz
                blocked = not _in_region(nx, nz, cfg, camera) or any(
                    math.hypot(nx - o["x"], nz - o["z"]) < 2 * cfg.min_separation + 0.3
                    for j, o in enumerate(st) if j != i)
                if blocked:
                    n = int(round(rng.uniform(*cfg.turn_duration) * SIM_RATE))
                    cx, cz = 0.0, 0.5 * (lo + hi)
                    desired = math.atan2(cx - s["x"], cz - s["z"]) + rng.uniform(-0.6, 0.6)
                    ang = float(wrap_angle(desired - s["psi"]))
                    if abs(ang) < np.pi / 4:
                        ang = math.copysign(np.pi / 2, ang if ang else 1.0)
                    s["kind"], s["left"], s["turn_rate"] = "turn", n, ang / (n * DT)
                    s["schedule"].append(["turn", n])
            kind = s["kind"]
            v_target = s["v_pref"] if kind == "walk" else (0.3 * s["v_pref"] if kind == "turn" else 0.0)
            if kind == "turn" and k % FRAME_STRIDE == 0:
                ax = s["x"] + 0.6 * math.sin(s["psi"])
                az = s["z"] + 0.6 * math.cos(s["psi"])
                s["crowded"] = not _in_region(ax, az, cfg, camera) or any(
                    math.hypot(ax - o["x"], az - o["z"]) < 2 * cfg.min_separation
                    for j, o in enumerate(st) if j != i)
            if kind == "turn" and s.get("crowded"):
                v_target = 0.0
            w_target = s["turn_rate"] if kind == "turn" else 0.0
            s["v"] += (v_target - s["v"]) * a_v
            s["yaw"] += (w_target - s["yaw"]) * a_w
            s["psi"] += s["yaw"] * DT
            s["x"] += s["v"] * math.sin(s["psi"]) * DT
            s["z"] += s["v"] * math.cos(s["psi"]) * DT
            scale = min(s["v"] / s["v_pref"], 1.0)
            s["phase"] += 2 * np.pi * s["f_gait"] * scale * DT
            pos[i, k] = (s["x"], 0.0, s["z"])
            head[i, k] = s["psi"]
            phase[i, k] = s["phase"]
            swing[i, k] = scale
            s["left"] -= 1
    agents = []
    for i, s in enumerate(st):
        sched = [(kind, int(math.ceil(n / FRAME_STRIDE))) for kind, n in s["schedule"]]
        agents.append(dict(position=pos[i], heading=wrap_angle(head[i]), phase=phase[i],
                           swing=swing[i], schedule=sched))
    return agents


def _jitter(rng, n_samples, cfg, swing):
    if not cfg.noise:
        return np.zeros(n_samples)
    t = np.arange(n_samples) * DT
    j = np.zeros(n_samples)
    for amp, band in ((cfg.jitter_amp, cfg.jitter_freq), (cfg.wander_amp, cfg.wander_freq)):
        for _ in range(3):
            f = rng.uniform(*band)
            j += amp / 3 * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    return j * swing


def _random_tilt(rng):
    # phone held roughly screen-up in front of the body, with some tilt
    pitch = rng.uniform(-0.6, 0.6)
    roll = rng.uniform(-0.3, 0.3)
    cp, sp, cr, sr = np.cos(pitch), np.sin(pitch), np.cos(roll), np.sin(roll)
    Rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    Rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return Rx @ Rz


# ---------------------------------------------------------------------------
# Body model
# ---------------------------------------------------------------------------

def body_points(traj: AgentTrajectory, arm_swing=0.1, body_bob=0.01, idx=slice(None)):
    """World positions of the five parts, the phone and the shoulders.

    Returns a dict of (K, 3) arrays.
    """
    p = traj.position[idx]
    psi = traj.heading[idx]
    ph = traj.phase[idx]
    sw = traj.swing[idx]
    fwd = np.stack([np.sin(psi), np.zeros_like(psi), np.cos(psi)], axis=-1)
    right = np.stack([np.cos(psi), np.zeros_like(psi), -np.sin(psi)], axis=-1)
    up = np.array([0.0, 1.0, 0.0])
    h = traj.height
    bob = (body_bob * sw * np.sin(2 * ph))[:, None] * up
    swing = arm_swing * sw * np.sin(ph)
    side = traj.phone_side

    def at(f, r, y):
        return p + np.asarray(f)[..., None] * fwd + np.asarray(r)[..., None] * right + y * up + bob

    phone = at(0.25 + swing, 0.2 * side, 0.6 * h)
    other = at(0.05 - swing, -0.25 * side, 0.5 * h)
    hands = {"right_hand": phone, "left_hand": other} if side > 0 else \
        {"left_hand": phone, "right_hand": other}
    legs = at(0.15 * sw * np.sin(ph + np.pi / 2), 0.0, 0.3 * h)
    return {
        "head": at(0.0, 0.0, 0.93 * h),
        "torso": at(0.0, 0.0, 0.6 * h),
        "legs": legs,
        **hands,
        "phone": phone,
        "l_shoulder": at(0.0, -0.2, 0.82 * h),
        "r_shoulder": at(0.0, 0.2, 0.82 * h),
        "center": at(0.0, 0.0, 0.5 * h) - bob,
    }


def project_agent(camera: CameraModel, traj: AgentTrajectory, flow_noise=0.0, rng=None,
                  arm_swing=0.1, body_bob=0.01, person_id=None, keypoint_noise=0.0,
                  box_noise=0.0):
    """Project one agent into per-frame box, keypoint and part-flow rows.

    ``traj`` is sampled on the 300 Hz grid with one extra leading frame of
    pre-roll, so frame ``f`` of the output sits at grid index
    ``(f + 1) * FRAME_STRIDE`` and its flow is the displacement since the
    previous frame. Frames behind the camera or with the box center outside
    the image are omitted.
    """
    pid = traj.agent_id if person_id is None else person_id
    idx = slice(None, None, FRAME_STRIDE)
    pts = body_points(traj, arm_swing, body_bob, idx)
    n = pts["center"].shape[0] - 1
    uv = {k: camera.project(v) for k, v in pts.items()}
    center, ok = uv["center"]
    feet, ok_f = camera.project(pts["center"] - np.array([0, 0.5 * traj.height, 0]))
    top, ok_t = camera.project(pts["center"] + np.array([0, 0.5 * traj.height, 0]))
    depth = pts["center"][:, 2]
    box_h = feet[:, 1] - top[:, 1]
    box_w = camera.focal * 0.5 / np.where(depth > 0.1, depth, 1.0)
    visible = ok & ok_f & ok_t
    for name in PART_NAMES + ("l_shoulder", "r_shoulder"):
        visible &= uv[name][1]
    visible &= (center[:, 0] >= 0) & (center[:, 0] <= camera.width - 1)
    visible &= (center[:, 1] >= 0) & (center[:, 1] <= camera.height - 1)
    vis = visible[1:] & visible[:-1]
    frames = np.flatnonzero(vis)
    box = np.stack([box_h, box_w, center[:, 0], center[:, 1]], axis=1)[1:][frames]
    kp = np.concatenate([uv["l_shoulder"][0] - center, uv["r_shoulder"][0] - center], axis=1)
    kp = kp[1:][frames]
    if keypoint_noise > 0:
        kp = kp + rng.normal(0.0, keypoint_noise, size=kp.shape)
    if box_noise > 0:
        box[:, :2] += rng.normal(0.0, box_noise, size=(len(box), 2))
    parts = {}
    for part_id, name in enumerate(PART_NAMES):
        xy = uv[name][0]
        flow = (xy[1:] - xy[:-1])[frames]
        if flow_noise > 0:
            flow = flow + rng.normal(0.0, flow_noise, size=flow.shape)
        parts[part_id] = flow
    return PersonTracks(pid, frames.astype(np.int64), box, kp, parts)


def phone_kinematics(traj: AgentTrajectory, arm_swing=0.1, body_bob=0.01):
    """Noise-free local-frame acceleration and angular velocity at 300 Hz.

    Acceleration is the central second difference of the phone position
    rotated into the phone frame; the first and last samples are dropped.
    """
    phone = body_points(traj, arm_swing, body_bob)["phone"]
    acc_w = (phone[2:] - 2 * phone[1:-1] + phone[:-2]) / DT ** 2
    jit = traj.jitter if traj.jitter is not None else np.zeros(len(traj.heading))
    yaw = np.unwrap(traj.heading) + jit
    R = rot_y(yaw[1:-1]) @ traj.tilt
    acc = np.einsum("kji,kj->ki", R, acc_w)
    yaw_rate = (yaw[2:] - yaw[:-2]) / (2 * DT)
    gyro = (traj.tilt.T @ np.array([0.0, 1.0, 0.0]))[None, :] * yaw_rate[:, None]
    return acc, gyro


def synthesize_imu(traj: AgentTrajectory, rng, cfg: SimConfig, start_ns, person_id=None):
    """100 Hz gravity-free IMU stream for one agent.

    Sample ``j`` corresponds to grid index ``1 + IMU_STRIDE * j``; its
    timestamp is ``start_ns`` plus the nominal offset and up to 0.5 ms of
    clock jitter.
    """
    acc, gyro = phone_kinematics(traj, cfg.arm_swing, cfg.body_bob)
    acc, gyro = acc[::IMU_STRIDE], gyro[::IMU_STRIDE]
    if cfg.noise:
        bias = rng.normal(0.0, cfg.accel_bias, size=3) if cfg.accel_bias > 0 else 0.0
        acc = acc + bias + rng.normal(0.0, cfg.accel_noise, size=acc.shape)
        gyro = gyro + rng.normal(0.0, cfg.gyro_noise, size=gyro.shape)
    n = acc.shape[0]
    nominal = start_ns + np.round((1 + IMU_STRIDE * np.arange(n)) * DT * NS_PER_S).astype(np.int64)
    jitter = rng.integers(-500_000, 500_001, size=n) if cfg.noise else 0
    ts = nominal + jitter
    pid = traj.agent_id if person_id is None else person_id
    return ImuStream(pid, ts.astype(np.int64), np.concatenate([acc, gyro], axis=1))


def _occlude(tracks: PersonTracks, rng, cfg, n_frames):
    if not cfg.noise or cfg.occlusion_rate <= 0:
        return tracks
    n_gaps = rng.poisson(cfg.occlusion_rate * n_frames / VIDEO_FPS)
    drop = np.zeros(n_frames, dtype=bool)
    for _ in range(n_gaps):
        length = int(rng.integers(cfg.occlusion_len[0], cfg.occlusion_len[1] + 1))
        start = int(rng.integers(1, max(2, n_frames - length - 1)))
        drop[start: start + length] = True
    keep = ~drop[tracks.frames]
    return PersonTracks(tracks.person_id, tracks.frames[keep], tracks.box[keep],
                        tracks.keypoints[keep], {k: v[keep] for k, v in tracks.parts.items()})


def generate_scene(n_agents, length_frames, seed, cfg=None, camera=None, recording_id=None,
                   behaviors=None, min_length=150):
    """Seeded multi-person recording with projected tracks and IMU streams."""
    cfg = cfg or SimConfig()
    camera = camera or CameraModel()
    if not 1 <= n_agents <= 6:
        raise GenerationError(f"n_agents must be in 1..6, got {n_agents}")
    if length_frames < min_length:
        raise GenerationError(f"length {length_frames} shorter than window {min_length}")
    rng = np.random.default_rng(seed)
    # 1 s of IMU lead-in, one pre-roll video frame, 1 s of lead-out
    lead = SIM_RATE
    n_samples = lead + (length_frames + 1) * FRAME_STRIDE + SIM_RATE
    raw = simulate_agents(n_agents, n_samples, rng, cfg, camera, behaviors)
    video_start_ns = BASE_EPOCH_NS + int(seed % 1_000_000) * NS_PER_S
    agents, tracks, imu = [], {}, {}
    for i, a in enumerate(raw):
        traj = AgentTrajectory(i, a["position"], a["heading"], a["phase"], a["swing"],
                               a["schedule"], height=rng.uniform(1.6, 1.9),
                               phone_side=float(rng.choice([-1.0, 1.0])),
                               tilt=_random_tilt(rng))
        traj.jitter = _jitter(rng, n_samples, cfg, traj.swing)
        agents.append(traj)
        # video grid: pre-roll frame sits at index lead - FRAME_STRIDE
        vid = AgentTrajectory(i, traj.position[lead - FRAME_STRIDE:], traj.heading[lead - FRAME_STRIDE:],
                              traj.phase[lead - FRAME_STRIDE:], traj.swing[lead - FRAME_STRIDE:],
                              traj.schedule, traj.height, traj.phone_side, traj.tilt)
        vid.position = vid.position[: (length_frames + 1) * FRAME_STRIDE]
        vid.heading = vid.heading[: (length_frames + 1) * FRAME_STRIDE]
        vid.phase = vid.phase[: (length_frames + 1) * FRAME_STRIDE]
        vid.swing = vid.swing[: (length_frames + 1) * FRAME_STRIDE]
        noisy = cfg.noise
        tr = project_agent(camera, vid, cfg.flow_noise if noisy else 0.0, rng,
                           cfg.arm_swing, cfg.body_bob,
                           keypoint_noise=cfg.keypoint_noise if noisy else 0.0,
                           box_noise=cfg.box_noise if noisy else 0.0)
        tracks[i] = _occlude(tr, rng, cfg, length_frames)
        # grid index lead - FRAME_STRIDE + FRAME_STRIDE * (f + 1) is video frame f
        imu_start = video_start_ns - int(round(lead * DT * NS_PER_S))
        imu[i] = synthesize_imu(traj, rng, cfg, imu_start)
    rid = recording_id or f"rec{seed}"
    return SceneRecording(rid, seed, camera, agents, length_frames, video_start_ns, tracks, imu)


def segment_windows(rec: SceneRecording, window=150, step=20, motion_threshold=0.02,
                    lpf_cutoff_hz=5.0, report=None):
    return build_windows(rec.recording_id, rec.tracks, rec.imu, rec.video_start_ns,
                         rec.n_frames, window, step, motion_threshold, lpf_cutoff_hz,
                         n_people=len(rec.agents), report=report)


def export_recording(rec: SceneRecording, directory):
    """Write ``<id>_tracks.csv`` and ``<id>_imu.csv``; returns the two paths."""
    from pathlib import Path
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tpath = d / f"{rec.recording_id}_tracks.csv"
    ipath = d / f"{rec.recording_id}_imu.csv"
    write_tracks(tpath, [rec.tracks[k] for k in sorted(rec.tracks)])
    write_imu(ipath, [rec.imu[k] for k in sorted(rec.imu)])
    return tpath, ipath
