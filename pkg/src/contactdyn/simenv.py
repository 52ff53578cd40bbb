"""Planar push environment with penalty contact, its perturbed real twin,
scripted data collection and history-window assembly.

Everything is vectorised over a leading batch axis so a whole dataset can be
stepped at once; per-trajectory randomness is pre-drawn from generators
seeded ``seed + index``, which keeps each trajectory independent of how the
batch is split.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import Pose, apply_increments, box_cloud, encode_increments
from .rng import substream
from .tactile import TactileConfig, calibrate_offset, detect_contact

DOMAINS = ("sim", "real-twin")


class SimulationError(RuntimeError):
    pass


@dataclass
class EnvConfig:
    domain: str = "sim"
    dt: float = 0.02
    substeps: int = 10
    half_extents: tuple[float, float] = (0.05, 0.03)
    extent_jitter: float = 0.25
    height: float = 0.06
    mass: float = 0.2
    mass_jitter: float = 0.2
    mu: float = 0.5  # finger-object Coulomb coefficient
    table_mu: float = 0.3
    k_n: float = 5000.0
    contact_damping: float = 20.0
    tangential_damping: float = 20.0
    finger_radius: float = 0.01
    n_fingers: int = 2
    action_noise: float = 0.01
    gravity: float = 9.81
    workspace: float = 0.5
    n_points: int = 256
    perturb: bool = True
    perturb_every: float = 25.0
    perturb_pos: float = 0.002
    perturb_rot: float = float(np.deg2rad(1.0))
    # real-twin gap knobs; ignored in the sim domain
    gap_mu: float = 1.4
    gap_stiffness: float = 0.5
    # None -> domain default
    obs_noise_pos: float | None = None
    obs_noise_rot: float | None = None
    latency: int | None = None
    label_mode: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        real = self.domain == "real-twin"
        if self.obs_noise_pos is None:
            self.obs_noise_pos = 0.001 if real else 0.0
        if self.obs_noise_rot is None:
            self.obs_noise_rot = float(np.deg2rad(0.5)) if real else 0.0
        if self.latency is None:
            self.latency = 1 if real else 0
        if self.label_mode is None:
            self.label_mode = "force" if real else "geometric"
        self.half_extents = tuple(float(v) for v in self.half_extents)
        if self.dt <= 0 or self.substeps < 1:
            raise ValueError("dt must be positive and substeps >= 1")
        if self.mu < 0 or self.table_mu < 0 or self.k_n <= 0:
            raise ValueError("friction must be >= 0 and stiffness > 0")
        if not real and (self.obs_noise_pos or self.obs_noise_rot or self.latency or self.label_mode != "geometric"):
            raise ValueError("sim domain requires zero observation noise, zero latency and geometric labels")
        if real and self.label_mode != "force":
            raise ValueError("real-twin domain requires force-threshold labels")

    @property
    def dq(self) -> int:
        return 2 * self.n_fingers

    @property
    def is_real(self) -> bool:
        return self.domain == "real-twin"

    @property
    def mu_eff(self) -> float:
        return self.mu * (self.gap_mu if self.is_real else 1.0)

    @property
    def table_mu_eff(self) -> float:
        return self.table_mu * (self.gap_mu if self.is_real else 1.0)

    @property
    def k_n_eff(self) -> float:
        return self.k_n * (self.gap_stiffness if self.is_real else 1.0)

    def with_domain(self, domain: str) -> "EnvConfig":
        """Same physical parameters, other domain (domain defaults re-resolved)."""
        return dataclasses.replace(
            self, domain=domain, obs_noise_pos=None, obs_noise_rot=None, latency=None, label_mode=None
        )


@dataclass
class EnvState:
    """Planar object state plus finger positions; arrays may carry batch axes."""

    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    omega: np.ndarray
    fingers: np.ndarray  # (..., F, 2)
    half_extents: np.ndarray  # (..., 2)
    mass: np.ndarray
    pending: np.ndarray  # (..., latency, dq) actions not yet applied

    @property
    def pose(self) -> Pose:
        return Pose.planar(self.x, self.y, self.theta)

    @property
    def q(self) -> np.ndarray:
        return self.fingers.reshape(self.fingers.shape[:-2] + (-1,))

    def copy(self) -> "EnvState":
        return EnvState(**{f.name: np.array(getattr(self, f.name)) for f in dataclasses.fields(self)})


def initial_state(x, y, theta, fingers, half_extents, mass, cfg: EnvConfig) -> EnvState:
    x = np.asarray(x, dtype=np.float64)
    z = np.zeros_like(x)
    fingers = np.asarray(fingers, dtype=np.float64)
    return EnvState(
        x=x.copy(),
        y=np.array(y, dtype=np.float64),
        theta=np.array(theta, dtype=np.float64),
        vx=z.copy(),
        vy=z.copy(),
        omega=z.copy(),
        fingers=fingers.copy(),
        half_extents=np.array(half_extents, dtype=np.float64),
        mass=np.array(mass, dtype=np.float64),
        pending=np.zeros(x.shape + (cfg.latency, cfg.dq)),
    )


def finger_penetration(state: EnvState, radius: float):
    """Penetration depth (..., F), outward box normal (..., F, 2) and the
    lever arm from the object centre to the contact point (..., F, 2)."""
    c, s = np.cos(state.theta)[..., None], np.sin(state.theta)[..., None]
    rx = state.fingers[..., 0] - state.x[..., None]
    ry = state.fingers[..., 1] - state.y[..., None]
    lx = c * rx + s * ry
    ly = -s * rx + c * ry
    hx = state.half_extents[..., 0:1]
    hy = state.half_extents[..., 1:2]
    cx = np.clip(lx, -hx, hx)
    cy = np.clip(ly, -hy, hy)
    dx, dy = lx - cx, ly - cy
    dist = np.sqrt(dx * dx + dy * dy)
    outside = dist > 0.0
    safe = np.where(outside, dist, 1.0)
    # inside: push out through the nearest face
    gx, gy = hx - np.abs(lx), hy - np.abs(ly)
    use_x = gx < gy
    sx = np.where(lx >= 0.0, 1.0, -1.0)
    sy = np.where(ly >= 0.0, 1.0, -1.0)
    nlx = np.where(outside, dx / safe, np.where(use_x, sx, 0.0))
    nly = np.where(outside, dy / safe, np.where(use_x, 0.0, sy))
    pen = np.where(outside, radius - dist, radius + np.minimum(gx, gy))
    nx = c * nlx - s * nly
    ny = s * nlx + c * nly
    normal = np.stack([nx, ny], axis=-1)
    lever = state.fingers - radius * normal - np.stack([state.x, state.y], axis=-1)[..., None, :]
    return pen, normal, lever


def _contact_forces(state: EnvState, finger_vel: np.ndarray, cfg: EnvConfig):
    pen, n, r = finger_penetration(state, cfg.finger_radius)
    active = pen > 0.0
    vo_x = state.vx[..., None] - state.omega[..., None] * r[..., 1]
    vo_y = state.vy[..., None] + state.omega[..., None] * r[..., 0]
    rel_x = finger_vel[..., 0] - vo_x
    rel_y = finger_vel[..., 1] - vo_y
    vn = rel_x * n[..., 0] + rel_y * n[..., 1]
    fn = np.where(active, np.maximum(cfg.k_n_eff * pen - cfg.contact_damping * vn, 0.0), 0.0)
    tx, ty = -n[..., 1], n[..., 0]
    vt = rel_x * tx + rel_y * ty
    cap = cfg.mu_eff * fn
    ft = np.clip(cfg.tangential_damping * vt, -cap, cap)
    fx = -fn * n[..., 0] + ft * tx
    fy = -fn * n[..., 1] + ft * ty
    torque = r[..., 0] * fy - r[..., 1] * fx
    return fx, fy, torque, pen


def step_env(state: EnvState, action: np.ndarray, cfg: EnvConfig, noise: np.ndarray | None = None):
    """Advance one control step of length ``cfg.dt``.

    ``action`` is the commanded finger velocity (..., dq); ``noise`` is a
    standard-normal draw of the same shape scaled by ``cfg.action_noise``.
    Returns the new state and per-finger forces on the object (..., F, 3),
    averaged over the substeps.
    """
    action = np.asarray(action, dtype=np.float64)
    if action.shape[-1] != cfg.dq:
        raise ValueError(f"action must have {cfg.dq} entries, got {action.shape[-1]}")
    if not (np.all(np.isfinite(state.x)) and np.all(np.isfinite(state.vx)) and np.all(np.isfinite(state.fingers))):
        raise SimulationError("non-finite state")
    st = state.copy()
    if cfg.latency:
        applied = st.pending[..., 0, :].copy()
        st.pending = np.concatenate([st.pending[..., 1:, :], action[..., None, :]], axis=-2)
    else:
        applied = action
    if noise is not None:
        applied = applied + cfg.action_noise * noise
    fvel = applied.reshape(applied.shape[:-1] + (cfg.n_fingers, 2))

    h = cfg.dt / cfg.substeps
    inertia = st.mass * (st.half_extents[..., 0] ** 2 + st.half_extents[..., 1] ** 2) / 3.0
    r_torsion = (st.half_extents[..., 0] + st.half_extents[..., 1]) / 3.0
    lin_dec = cfg.table_mu_eff * cfg.gravity * h
    ang_dec = cfg.table_mu_eff * st.mass * cfg.gravity * r_torsion * h / inertia
    guard = np.min(st.half_extents, axis=-1)[..., None]
    force_acc = np.zeros(st.fingers.shape[:-1] + (3,))
    for _ in range(cfg.substeps):
        fx, fy, torque, pen = _contact_forces(st, fvel, cfg)
        if np.any(pen > guard):
            raise SimulationError("finger penetration exceeds half the object extent")
        force_acc[..., 0] += fx
        force_acc[..., 1] += fy
        vx = st.vx + h * fx.sum(axis=-1) / st.mass
        vy = st.vy + h * fy.sum(axis=-1) / st.mass
        om = st.omega + h * torque.sum(axis=-1) / inertia
        # table friction removes speed without reversing it (static hold)
        speed = np.sqrt(vx * vx + vy * vy)
        keep = np.where(speed > lin_dec, (speed - lin_dec) / np.where(speed > 0, speed, 1.0), 0.0)
        st.vx, st.vy = vx * keep, vy * keep
        st.omega = np.sign(om) * np.maximum(np.abs(om) - ang_dec, 0.0)
        st.x = st.x + h * st.vx
        st.y = st.y + h * st.vy
        st.theta = st.theta + h * st.omega
        st.fingers = st.fingers + h * fvel
    forces = force_acc / cfg.substeps
    if not np.all(np.isfinite(forces)):
        raise SimulationError("non-finite contact force")
    return st, forces


def geometric_contact(state: EnvState, cfg: EnvConfig) -> np.ndarray:
    pen, _, _ = finger_penetration(state, cfg.finger_radius)
    return (pen > 0.0).any(axis=-1).astype(np.int64)


def label_contact(state: EnvState, forces: np.ndarray, cfg: EnvConfig, tactile: TactileConfig | None = None, offset=None):
    """Hand-level contact label under the domain's labelling mode.

    ``forces`` are the sensed (raw) readings; ``offset`` is the calibration
    offset for force mode (zero if omitted).
    """
    if cfg.label_mode == "geometric":
        return geometric_contact(state, cfg)
    tactile = tactile or TactileConfig()
    if offset is None:
        offset = np.zeros(forces.shape[-2:])
    return detect_contact(forces, offset, tactile)


# ---------------------------------------------------------------- data collection


@dataclass
class Trajectory:
    s: Pose  # (T+1,)
    q: np.ndarray  # (T+1, dq)
    a: np.ndarray  # (T+1, dq) commanded finger velocities
    c: np.ndarray  # (T+1,) int
    forces: np.ndarray  # (T+1, F, 3)
    cloud: np.ndarray  # (N, 3)
    domain: str
    seed: int
    half_extents: np.ndarray = field(default_factory=lambda: np.zeros(2))

    @property
    def T(self) -> int:
        return len(self.c) - 1

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        arrays = ("q", "a", "c", "forces", "cloud", "half_extents")
        return (
            self.domain == other.domain
            and self.seed == other.seed
            and np.array_equal(self.s.p, other.s.p)
            and np.array_equal(self.s.R, other.s.R)
            and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in arrays)
        )


@dataclass
class PolicyParams:
    """Reach-push-release parameters, one entry per trajectory."""

    start: np.ndarray  # (B, F, 2) initial finger positions
    direction: np.ndarray  # (B,) push heading, rad
    speed: np.ndarray  # (B,)
    curvature: np.ndarray  # (B,) heading rate during the push, rad/s
    differential: np.ndarray  # (B, F) relative speed offsets per finger
    wait: np.ndarray  # (B,) steps
    push: np.ndarray  # (B,) steps
    release_speed: np.ndarray  # (B,)


def scripted_policy(rng: np.random.Generator, x0, y0, hext, cfg: EnvConfig) -> dict:
    """Draw one trajectory's reach-push-release parameters.

    The lateral offset is sometimes wider than the box, which yields misses;
    heading drift and differential finger speeds produce rotation and slip.
    """
    phi = rng.uniform(-np.pi, np.pi)
    d = np.array([np.cos(phi), np.sin(phi)])
    perp = np.array([-d[1], d[0]])
    reach = rng.uniform(0.09, 0.13)
    offset = rng.uniform(-0.07, 0.07)
    spacing = rng.uniform(0.02, 0.05)
    centre = np.array([x0, y0]) - reach * d + offset * perp
    start = np.stack([centre + (i - (cfg.n_fingers - 1) / 2) * spacing * perp for i in range(cfg.n_fingers)])
    speed = rng.uniform(0.1, 0.3)
    travel = reach + rng.uniform(-0.02, 0.12) - 0.03
    push = max(int(np.ceil(max(travel, 0.0) / (speed * cfg.dt))), 1)
    return dict(
        start=start,
        direction=phi,
        speed=speed,
        curvature=rng.uniform(-1.0, 1.0),
        differential=rng.uniform(-0.15, 0.15, size=cfg.n_fingers),
        wait=int(rng.integers(0, 6)),
        push=push,
        release_speed=rng.uniform(0.3, 0.6) * speed,
    )


def policy_action(params: PolicyParams, t: int, dt: float) -> np.ndarray:
    """Commanded finger velocities (B, dq) at step ``t``."""
    B, F, _ = params.start.shape
    k = t - params.wait
    pushing = (k >= 0) & (k < params.push)
    releasing = k >= params.push
    heading = params.direction + params.curvature * np.clip(k, 0, params.push) * dt
    d = np.stack([np.cos(heading), np.sin(heading)], axis=-1)  # (B, 2)
    v_push = (params.speed[:, None] * (1.0 + params.differential))[..., None] * d[:, None, :]
    d0 = np.stack([np.cos(params.direction), np.sin(params.direction)], axis=-1)
    v_rel = -params.release_speed[:, None, None] * np.broadcast_to(d0[:, None, :], (B, F, 2))
    vel = np.where(pushing[:, None, None], v_push, 0.0) + np.where(releasing[:, None, None], v_rel, 0.0)
    return vel.reshape(B, 2 * F)


PolicyFactory = Callable[[np.random.Generator, float, float, np.ndarray, EnvConfig], dict]


def _stack_policies(dicts: list[dict]) -> PolicyParams:
    return PolicyParams(**{k: np.array([d[k] for d in dicts]) for k in dicts[0]})


def generate_dataset(
    cfg: EnvConfig,
    n_traj: int,
    T: int,
    seed: int | None = None,
    policy: PolicyFactory = scripted_policy,
    K: int = 9,
    H: int = 8,
    tactile: TactileConfig | None = None,
    chunk: int = 256,
) -> list[Trajectory]:
    """Roll out ``n_traj`` scripted episodes; trajectory ``i`` is seeded
    ``seed + i``. Real-twin episodes start with a stationary calibration
    window (not recorded) from which the tactile offset is estimated."""
    if n_traj < 0:
        raise ValueError("n_traj must be non-negative")
    if T < K + H + 1:
        raise ValueError(f"T={T} too short for K={K}, H={H}")
    seed = cfg.seed if seed is None else seed
    tactile = tactile or TactileConfig()
    out: list[Trajectory] = []
    for lo in range(0, n_traj, chunk):
        out.extend(_generate_chunk(cfg, list(range(seed + lo, seed + min(lo + chunk, n_traj))), T, policy, tactile))
    return out


def _generate_chunk(cfg: EnvConfig, seeds: list[int], T: int, policy: PolicyFactory, tactile: TactileConfig):
    B, F, dq = len(seeds), cfg.n_fingers, cfg.dq
    init = []
    pol = []
    draws = []
    for s in seeds:
        r_init = substream(s, "env-init")
        hext = np.array(cfg.half_extents) * (1.0 + cfg.extent_jitter * r_init.uniform(-1.0, 1.0, size=2))
        mass = cfg.mass * (1.0 + cfg.mass_jitter * r_init.uniform(-1.0, 1.0))
        lim = 0.2 * cfg.workspace
        x0, y0 = r_init.uniform(-lim, lim, size=2)
        th0 = r_init.uniform(-np.pi, np.pi)
        cloud = box_cloud(hext, cfg.height, cfg.n_points, substream(s, "cloud"))
        init.append((x0, y0, th0, hext, mass, cloud))
        pol.append(policy(substream(s, "policy"), x0, y0, hext, cfg))
        r_noise = substream(s, "actuation")
        r_pert = substream(s, "perturb")
        r_obs = substream(s, "observation")
        r_tac = substream(s, "tactile")
        events = r_pert.random(T) < (1.0 / cfg.perturb_every if cfg.perturb else 0.0)
        pdir = r_pert.uniform(-np.pi, np.pi, size=(T, F + 1))
        psign = np.where(r_pert.random(T) < 0.5, -1.0, 1.0)
        n_cal = int(round(tactile.window_s / cfg.dt))
        bias = np.zeros((F, 3))
        bias[:, :2] = tactile.bias_std * r_tac.standard_normal((F, 2))
        sensor = np.zeros((n_cal + T + 1, F, 3))
        sensor[..., :2] = tactile.noise_std * r_tac.standard_normal((n_cal + T + 1, F, 2))
        draws.append(
            dict(
                noise=r_noise.standard_normal((T, dq)),
                events=events,
                pdir=pdir,
                psign=psign,
                obs=r_obs.standard_normal((T + 1, 3)),
                bias=bias,
                sensor=sensor,
                n_cal=n_cal,
            )
        )
    params = _stack_policies(pol)
    state = initial_state(
        [i[0] for i in init], [i[1] for i in init], [i[2] for i in init], params.start,
        np.stack([i[3] for i in init]), [i[4] for i in init], cfg,
    )
    noise = np.stack([d["noise"] for d in draws])
    events = np.stack([d["events"] for d in draws])
    pdir = np.stack([d["pdir"] for d in draws])
    psign = np.stack([d["psign"] for d in draws])

    xs = np.zeros((B, T + 1, 3))
    qs = np.zeros((B, T + 1, dq))
    acts = np.zeros((B, T + 1, dq))
    forces = np.zeros((B, T + 1, F, 3))
    geo = np.zeros((B, T + 1), dtype=np.int64)

    def record(t, st):
        xs[:, t] = np.stack([st.x, st.y, st.theta], axis=-1)
        qs[:, t] = st.q
        geo[:, t] = geometric_contact(st, cfg)

    record(0, state)
    for t in range(T):
        a = policy_action(params, t, cfg.dt)
        acts[:, t] = a
        ev = events[:, t]
        if ev.any():
            state = _perturb(state, ev, pdir[:, t], psign[:, t], cfg)
        state, f = step_env(state, a, cfg, noise=noise[:, t])
        forces[:, t + 1] = f
        record(t + 1, state)
    acts[:, T] = policy_action(params, T, cfg.dt)

    trajs = []
    for b, s in enumerate(seeds):
        d = draws[b]
        obs = xs[b].copy()
        if cfg.is_real:
            obs[:, :2] += cfg.obs_noise_pos * d["obs"][:, :2]
            obs[:, 2] += cfg.obs_noise_rot * d["obs"][:, 2]
            raw = forces[b] + d["bias"] + d["sensor"][d["n_cal"] :]
            offset = calibrate_offset(d["bias"] + d["sensor"][: d["n_cal"]], tactile, cfg.dt)
            sensed = raw - offset
            c = detect_contact(sensed, np.zeros((F, 3)), tactile)
        else:
            sensed = forces[b]
            c = geo[b]
        trajs.append(
            Trajectory(
                s=Pose.planar(obs[:, 0], obs[:, 1], obs[:, 2]),
                q=qs[b],
                a=acts[b],
                c=np.asarray(c, dtype=np.int64),
                forces=sensed,
                cloud=init[b][5],
                domain=cfg.domain,
                seed=s,
                half_extents=init[b][3],
            )
        )
    return trajs


def _perturb(state: EnvState, mask, pdir, psign, cfg: EnvConfig) -> EnvState:
    st = state.copy()
    m = mask.astype(np.float64)
    st.x = st.x + m * cfg.perturb_pos * np.cos(pdir[:, 0])
    st.y = st.y + m * cfg.perturb_pos * np.sin(pdir[:, 0])
    st.theta = st.theta + m * psign * cfg.perturb_rot
    fd = np.stack([np.cos(pdir[:, 1:]), np.sin(pdir[:, 1:])], axis=-1)
    st.fingers = st.fingers + (m[:, None, None] * cfg.perturb_pos) * fd
    return st


# ---------------------------------------------------------------- windows


@dataclass
class HistoryWindow:
    """A batch of history windows with their prediction targets.

    Point clouds live in a shared table ``clouds`` indexed by ``cloud_idx``.
    """

    pose_p: np.ndarray  # (B, K+1, 3)
    pose_R: np.ndarray  # (B, K+1, 3, 3)
    q: np.ndarray  # (B, K+1, dq)
    a: np.ndarray  # (B, K+1, dq)
    c: np.ndarray  # (B, K+1)
    clouds: np.ndarray  # (M, N, 3)
    cloud_idx: np.ndarray  # (B,)
    target_c: np.ndarray  # (B, H)
    target_x0: np.ndarray  # (B, H, 6)
    future_p: np.ndarray  # (B, H, 3)
    future_R: np.ndarray  # (B, H, 3, 3)
    traj_idx: np.ndarray  # (B,)
    t: np.ndarray  # (B,)

    def __len__(self) -> int:
        return self.pose_p.shape[0]

    @property
    def K(self) -> int:
        return self.pose_p.shape[1] - 1

    @property
    def H(self) -> int:
        return self.target_c.shape[1]

    @property
    def cloud(self) -> np.ndarray:
        return self.clouds[self.cloud_idx]

    @property
    def anchor(self) -> Pose:
        return Pose(self.pose_p[:, -1], self.pose_R[:, -1])

    @property
    def future(self) -> Pose:
        return Pose(self.future_p, self.future_R)

    def take(self, idx) -> "HistoryWindow":
        kw = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        return HistoryWindow(**{k: (v if k == "clouds" else v[idx]) for k, v in kw.items()})

    @classmethod
    def concat(cls, windows: list["HistoryWindow"]) -> "HistoryWindow":
        offsets = np.cumsum([0] + [len(w.clouds) for w in windows[:-1]])
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name == "clouds":
                kw[f.name] = np.concatenate([w.clouds for w in windows])
            elif f.name == "cloud_idx":
                kw[f.name] = np.concatenate([w.cloud_idx + o for w, o in zip(windows, offsets)])
            else:
                kw[f.name] = np.concatenate([getattr(w, f.name) for w in windows])
        return cls(**kw)


def window_count(T: int, K: int, H: int, stride: int) -> int:
    return (T - K - H) // stride + 1


def build_history_windows(traj: Trajectory, K: int = 9, H: int = 8, stride: int = 4, traj_idx: int = 0) -> HistoryWindow:
    """Windows anchored at t = K, K + stride, ... with t + H <= T."""
    T = traj.T
    if T < K + H + 1:
        raise ValueError(f"trajectory of length {T} too short for K={K}, H={H}")
    ts = K + stride * np.arange(window_count(T, K, H, stride))
    hist = ts[:, None] + np.arange(-K, 1)[None, :]
    fut = ts[:, None] + np.arange(0, H + 1)[None, :]
    seq = Pose(traj.s.p[fut], traj.s.R[fut])
    x0 = encode_increments(seq)
    return HistoryWindow(
        pose_p=traj.s.p[hist],
        pose_R=traj.s.R[hist],
        q=traj.q[hist],
        a=traj.a[hist],
        c=traj.c[hist].astype(np.float64),
        clouds=traj.cloud[None],
        cloud_idx=np.zeros(len(ts), dtype=np.int64),
        target_c=traj.c[fut[:, 1:]].astype(np.float64),
        target_x0=x0,
        future_p=traj.s.p[fut[:, 1:]],
        future_R=traj.s.R[fut[:, 1:]],
        traj_idx=np.full(len(ts), traj_idx, dtype=np.int64),
        t=ts,
    )


def windows_from_dataset(trajs: list[Trajectory], K: int = 9, H: int = 8, stride: int = 4) -> HistoryWindow:
    return HistoryWindow.concat([build_history_windows(tr, K, H, stride, i) for i, tr in enumerate(trajs)])


def reconstruct_targets(window: HistoryWindow) -> Pose:
    """Re-apply the stored increment targets to each window's anchor."""
    return apply_increments(window.anchor, window.target_x0)


def contact_fraction(trajs: list[Trajectory]) -> float:
    c = np.concatenate([tr.c for tr in trajs])
    return float(c.mean()) if c.size else 0.0


def label_agreement(sim: list[Trajectory], real: list[Trajectory]) -> dict:
    """Step-wise comparison of paired (same-seed) sim and real-twin labels."""
    if [t.seed for t in sim] != [t.seed for t in real]:
        raise ValueError("datasets are not paired by seed")
    cs = np.concatenate([t.c for t in sim])
    cr = np.concatenate([t.c for t in real])
    agree = cs == cr
    # contact-adjacent: any label of either domain is 1 within one step
    either = np.concatenate([np.convolve((t1.c | t2.c).astype(float), np.ones(3), "same") > 0 for t1, t2 in zip(sim, real)])
    return {
        "agreement": float(agree.mean()),
        "disagreement": float(1.0 - agree.mean()),
        "disagreement_contact_adjacent": float((~agree[either]).mean()) if either.any() else 0.0,
        "n_steps": int(agree.size),
    }
