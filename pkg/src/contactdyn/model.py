"""Two-stage contact-aware dynamics model and the regression baselines.

Stage I maps the fused history latent to future contact probabilities and a
contact feature; Stage II is a FiLM-conditioned 1-D U-Net that predicts the
noise of a DDPM over normalised pose-increment sequences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .geometry import Pose, apply_increments, encode_increments, log_map
from .numcore import Tensor
from .rng import substream
from .simenv import HistoryWindow

KINDS = ("diffusion-contact", "diffusion", "direct-unet", "direct-mlp")
KIND_LABELS = {
    "direct-mlp": "MLP",
    "direct-unet": "UNet",
    "diffusion": "Diffusion-UNet",
    "diffusion-contact": "Diffusion-UNet w/ Contact",
}


@dataclass
class ModelConfig:
    kind: str = "diffusion-contact"
    K: int = 9
    H: int = 8
    dq: int = 4
    latent_dim: int = 512
    contact_dim: int = 64
    point_dim: int = 128
    point_hidden: int = 64
    temporal_dim: int = 256
    contact_hist_dim: int = 32
    fusion_hidden: int = 256
    diffusion_steps: int = 100
    schedule: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # rescale the linear endpoints by 1000 / diffusion_steps (reference: 1000 steps)
    scale_betas: bool = True
    unet_widths: tuple[int, int] = (32, 64)
    cond_dim: int = 128
    time_dim: int = 64
    contact_head_layers: int = 1
    contact_head_hidden: int = 128
    conditioning: str = "predicted"  # or "teacher-forced"
    stop_grad_contact: bool = False
    temporal_encoder: str = "mlp"  # or "per-step"
    pos_scale: float = 0.05
    vel_scale: float = 0.2
    inc_scale: tuple[float, ...] = (0.002, 0.002, 0.002, 0.015, 0.015, 0.015)
    clip_sample: float | None = None  # optional bound on normalised x0 estimates while sampling

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        dims = (self.latent_dim, self.contact_dim, self.point_dim, self.point_hidden, self.temporal_dim,
                self.contact_hist_dim, self.fusion_hidden, self.cond_dim, self.time_dim, self.K, self.H)
        if min(dims) <= 0 or min(self.unet_widths) <= 0:
            raise ValueError("model dimensions must be positive")
        if self.diffusion_steps < 2:
            raise ValueError("diffusion_steps must be >= 2")
        if self.schedule not in ("linear", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.conditioning not in ("predicted", "teacher-forced"):
            raise ValueError(f"unknown conditioning mode {self.conditioning!r}")
        if self.temporal_encoder not in ("mlp", "per-step"):
            raise ValueError(f"unknown temporal encoder {self.temporal_encoder!r}")
        self.unet_widths = tuple(int(w) for w in self.unet_widths)
        self.inc_scale = tuple(float(v) for v in self.inc_scale)
        if len(self.inc_scale) != 6 or min(self.inc_scale) <= 0:
            raise ValueError("inc_scale needs six positive entries")
        if self.clip_sample is not None and self.clip_sample <= 0:
            raise ValueError("clip_sample must be positive or None")

    @property
    def uses_contact(self) -> bool:
        return self.kind == "diffusion-contact"

    @property
    def is_diffusion(self) -> bool:
        return self.kind in ("diffusion", "diffusion-contact")

    @property
    def step_features(self) -> int:
        return 6 + 2 * self.dq

    @property
    def cond_in(self) -> int:
        return self.latent_dim + (self.contact_dim if self.uses_contact else 0)


def desk_model(**kw) -> ModelConfig:
    """Reduced widths for CPU benchmarks; sampling clips x0 estimates at 6
    (about the 99.9th percentile of normalised rotation increments)."""
    base = dict(latent_dim=128, temporal_dim=128, fusion_hidden=128, point_dim=64, point_hidden=64, cond_dim=64,
                clip_sample=6.0)
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------- schedule


@dataclass
class NoiseSchedule:
    betas: np.ndarray  # index 1..T at positions 0..T-1
    alphas: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)  # alpha_bar[0] = 1, alpha_bar[t] for t = 1..T

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ValueError("betas must lie strictly in (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(self.alphas)])

    @property
    def T(self) -> int:
        return len(self.betas)

    def beta(self, t):
        return self.betas[np.asarray(t) - 1]

    def alpha(self, t):
        return self.alphas[np.asarray(t) - 1]

    def posterior_variance(self, t):
        """beta_tilde_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t."""
        t = np.asarray(t)
        return (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]) * self.beta(t)


def make_schedule(cfg: ModelConfig) -> NoiseSchedule:
    T = cfg.diffusion_steps
    if cfg.schedule == "linear":
        k = 1000.0 / T if cfg.scale_betas else 1.0
        return NoiseSchedule(np.linspace(cfg.beta_start * k, min(cfg.beta_end * k, 0.999), T))
    s = 0.008
    f = np.cos((np.arange(T + 1) / T + s) / (1 + s) * np.pi / 2) ** 2
    abar = f / f[0]
    return NoiseSchedule(np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, 0.999))


def forward_diffuse(x0: np.ndarray, t, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; ``t`` scalar or per-sample."""
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > schedule.T):
        raise ValueError(f"diffusion step out of range 1..{schedule.T}")
    ab = schedule.alpha_bar[t]
    ab = ab.reshape(ab.shape + (1,) * (np.ndim(x0) - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def timestep_embedding(t, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


# ---------------------------------------------------------------- params


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    K1, F = cfg.K + 1, cfg.step_features
    shapes: dict[str, tuple[int, ...]] = {}

    def lin(name, i, o):
        shapes[name + ".W"] = (i, o)
        shapes[name + ".b"] = (o,)

    if cfg.temporal_encoder == "mlp":
        lin("temporal.l1", K1 * F + 9, cfg.temporal_dim)
    else:
        lin("temporal.l1", F + 9, cfg.temporal_dim)
    lin("temporal.l2", cfg.temporal_dim, cfg.temporal_dim)
    fused = cfg.temporal_dim + cfg.point_dim
    if cfg.uses_contact:
        lin("contact_hist", K1, cfg.contact_hist_dim)
        fused += cfg.contact_hist_dim
    lin("point.l1", 3, cfg.point_hidden)
    lin("point.l2", cfg.point_hidden, cfg.point_dim)
    lin("point.proj", cfg.point_dim, cfg.point_dim)
    lin("fusion.l1", fused, cfg.fusion_hidden)
    lin("fusion.l2", cfg.fusion_hidden, cfg.latent_dim)

    if cfg.uses_contact:
        width = cfg.latent_dim
        for i in range(cfg.contact_head_layers - 1):
            lin(f"contact_head.h{i}", width, cfg.contact_head_hidden)
            width = cfg.contact_head_hidden
        lin("contact_head.out", width, cfg.H)
        lin("contact_proj.l1", cfg.H, cfg.contact_dim)
        lin("contact_proj.l2", cfg.contact_dim, cfg.contact_dim)

    if cfg.kind == "direct-mlp":
        lin("head.l1", cfg.latent_dim, cfg.fusion_hidden)
        lin("head.l2", cfg.fusion_hidden, cfg.H * 6)
        return shapes

    c1, c2 = cfg.unet_widths
    lin("cond.h", cfg.cond_in, cfg.cond_dim)
    if cfg.is_diffusion:
        lin("cond.t", cfg.time_dim, cfg.cond_dim)
    for name, cin, cout in (("unet.down1", 6, c1), ("unet.down2", c1, c2), ("unet.mid", c2, c2), ("unet.up1", c1 + c2, c1)):
        shapes[name + ".conv.W"] = (3, cin, cout)
        shapes[name + ".conv.b"] = (cout,)
        lin(name + ".gamma", cfg.cond_dim, cout)
        lin(name + ".beta", cfg.cond_dim, cout)
    shapes["unet.out.W"] = (3, c1 + 6, 6)
    shapes["unet.out.b"] = (6,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = substream(seed, "init")
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[:-1]))
        std = 1.0 / np.sqrt(fan_in)
        if ".gamma." in name or ".beta." in name:
            std *= 0.1
        if name.startswith("unet.out"):
            std *= 0.1
        params[name] = std * rng.standard_normal(shape)
    return params


def zero_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    return {k: np.zeros(s) for k, s in param_shapes(cfg).items()}


def count_params(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


# ---------------------------------------------------------------- features


def window_features(window: HistoryWindow, cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Numeric inputs for the encoders.

    Pose history is expressed relative to the anchor pose s_t (translation
    offsets and log(R_{t-k} R_t^T)); finger positions are centred on the
    anchor translation. The anchor orientation is appended once so contact
    geometry stays observable.
    """
    if window.K != cfg.K:
        raise nc.ShapeError(f"window has K={window.K}, model expects K={cfg.K}")
    if window.q.shape[-1] != cfg.dq:
        raise nc.ShapeError(f"window has d_q={window.q.shape[-1]}, model expects {cfg.dq}")
    B = len(window)
    p_t = window.pose_p[:, -1]
    R_t = window.pose_R[:, -1]
    rel_p = (window.pose_p - p_t[:, None]) / cfg.pos_scale
    rel_R = window.pose_R @ np.swapaxes(R_t, -1, -2)[:, None]
    rel_w = log_map(rel_R)
    nf = cfg.dq // 2
    q_rel = (window.q.reshape(B, cfg.K + 1, nf, 2) - p_t[:, None, None, :2]).reshape(B, cfg.K + 1, cfg.dq)
    steps = np.concatenate([rel_p, rel_w, q_rel / cfg.pos_scale, window.a / cfg.vel_scale], axis=-1)
    orient = R_t.reshape(B, 9)
    if cfg.temporal_encoder == "mlp":
        hist = np.concatenate([steps.reshape(B, -1), orient], axis=-1)
    else:
        hist = np.concatenate([steps, np.repeat(orient[:, None], cfg.K + 1, axis=1)], axis=-1)
    feats = {"hist": hist, "contacts": window.c.astype(np.float64), "cloud": window.cloud}
    if cfg.kind == "direct-unet":
        hp = Pose(window.pose_p, window.pose_R)
        inc = encode_increments(hp)[:, -cfg.H :]
        if inc.shape[1] < cfg.H:
            inc = np.concatenate([np.zeros((B, cfg.H - inc.shape[1], 6)), inc], axis=1)
        feats["recent"] = inc / np.asarray(cfg.inc_scale)
    for k, v in feats.items():
        if not np.all(np.isfinite(v)):
            raise nc.NonFiniteError(f"non-finite window feature {k!r}")
    return feats


# ---------------------------------------------------------------- stages


def _lin(P, name, x):
    return nc.affine(x, P[name + ".W"], P[name + ".b"])


def encode_and_fuse(feats: dict[str, np.ndarray], P: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    if cfg.temporal_encoder == "mlp":
        th = _lin(P, "temporal.l2", nc.silu(_lin(P, "temporal.l1", feats["hist"])))
    else:
        per = nc.silu(_lin(P, "temporal.l1", feats["hist"]))
        th = _lin(P, "temporal.l2", nc.mean(per, axis=1))
    pts = nc.silu(_lin(P, "point.l1", feats["cloud"]))
    pts = _lin(P, "point.l2", pts)
    f_geo = _lin(P, "point.proj", nc.max_reduce(pts, axis=1))
    parts = [th]
    if cfg.uses_contact:
        parts.append(nc.silu(_lin(P, "contact_hist", feats["contacts"])))
    parts.append(f_geo)
    fused = nc.concat(parts, axis=-1)
    return _lin(P, "fusion.l2", nc.silu(_lin(P, "fusion.l1", fused)))


@dataclass
class ContactForecast:
    probs: Tensor  # (B, H)
    feature: Tensor  # (B, d_c)


def predict_contacts(z: Tensor, P: dict[str, Tensor], cfg: ModelConfig, teacher: np.ndarray | None = None) -> ContactForecast:
    """c_hat = sigmoid(W_c z + b_c); f_c = projector(c_hat).

    ``teacher`` replaces c_hat as the projector input (teacher forcing).
    """
    x = z
    for i in range(cfg.contact_head_layers - 1):
        x = nc.silu(_lin(P, f"contact_head.h{i}", x))
    probs = nc.sigmoid(_lin(P, "contact_head.out", x))
    src = probs
    if teacher is not None:
        src = Tensor(teacher)
    elif cfg.stop_grad_contact:
        src = Tensor(probs.data)
    feat = _lin(P, "contact_proj.l2", nc.silu(_lin(P, "contact_proj.l1", src)))
    return ContactForecast(probs, feat)


def condition_vector(z: Tensor, forecast: ContactForecast | None) -> Tensor:
    return z if forecast is None else nc.concat([z, forecast.feature], axis=-1)


def _film_block(P, name, x, cond, stride=1):
    y = nc.conv1d(x, P[name + ".conv.W"], P[name + ".conv.b"], stride=stride)
    y = nc.layer_norm(y)
    B, C = y.shape[0], y.shape[2]
    gamma = nc.reshape(nc.add(_lin(P, name + ".gamma", cond), 1.0), (B, 1, C))
    beta = nc.reshape(_lin(P, name + ".beta", cond), (B, 1, C))
    return nc.silu(nc.add(nc.mul(y, gamma), beta))


def unet(x, cond: Tensor, P: dict[str, Tensor]) -> Tensor:
    L = x.shape[1]
    e1 = _film_block(P, "unet.down1", x, cond)
    e2 = _film_block(P, "unet.down2", e1, cond, stride=2)
    m = _film_block(P, "unet.mid", e2, cond)
    up = nc.gather(m, np.arange(L) // 2, axis=1)
    d = _film_block(P, "unet.up1", nc.concat([up, e1], axis=-1), cond)
    # long skip: the normalised blocks drop the input's scale, the head sees it raw
    return nc.conv1d(nc.concat([d, x], axis=-1), P["unet.out.W"], P["unet.out.b"])


def film_condition(h: Tensor, t, P: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    ch = _lin(P, "cond.h", h)
    if cfg.is_diffusion:
        temb = timestep_embedding(np.broadcast_to(np.asarray(t), (h.shape[0],)), cfg.time_dim)
        ch = nc.add(ch, _lin(P, "cond.t", temb))
    return nc.silu(ch)


def noise_predict(x_t: np.ndarray, t, h: Tensor, P: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """eps_hat for x_t (B, H, 6) at step(s) t given condition h."""
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.ndim != 3 or x_t.shape[1:] != (cfg.H, 6):
        raise nc.ShapeError(f"x_t must be (B, {cfg.H}, 6), got {x_t.shape}")
    if h.shape != (x_t.shape[0], cfg.cond_in):
        raise nc.ShapeError(f"condition must be ({x_t.shape[0]}, {cfg.cond_in}), got {h.shape}")
    return unet(Tensor(x_t), film_condition(h, t, P, cfg), P)


def direct_predict(feats, h: Tensor, P: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Normalised x0 regression for the non-diffusion baselines."""
    if cfg.kind == "direct-mlp":
        out = _lin(P, "head.l2", nc.silu(_lin(P, "head.l1", h)))
        return nc.reshape(out, (h.shape[0], cfg.H, 6))
    return unet(Tensor(feats["recent"]), film_condition(h, None, P, cfg), P)


def as_tensors(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


def _clip(x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    return x if cfg.clip_sample is None else np.clip(x, -cfg.clip_sample, cfg.clip_sample)


def sample_increments(h: Tensor, P: dict[str, Tensor], cfg: ModelConfig, seed: int, schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Ancestral DDPM sampling; returns x0_hat in physical units (B, H, 6).

    x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sqrt(beta_tilde_t) z,
    with z = 0 at t = 1. With ``cfg.clip_sample`` set, the step instead goes
    through the clipped x0 estimate and the posterior mean (identical when
    nothing is clipped).
    """
    schedule = schedule or make_schedule(cfg)
    rng = substream(seed, "sampler")
    B = h.shape[0]
    h = Tensor(h.data)
    x = rng.standard_normal((B, cfg.H, 6))
    ab_all = schedule.alpha_bar
    for t in range(schedule.T, 0, -1):
        eps = noise_predict(x, t, h, P, cfg).data
        ab, ab_prev = ab_all[t], ab_all[t - 1]
        if cfg.clip_sample is None:
            mean = (x - schedule.beta(t) / np.sqrt(1.0 - ab) * eps) / np.sqrt(schedule.alpha(t))
        else:
            x0 = _clip((x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab), cfg)
            c0 = np.sqrt(ab_prev) * schedule.beta(t) / (1.0 - ab)
            ct = np.sqrt(schedule.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab)
            mean = c0 * x0 + ct * x
        if t > 1:
            x = mean + np.sqrt(schedule.posterior_variance(t)) * rng.standard_normal(x.shape)
        else:
            x = mean
        if not np.all(np.isfinite(x)):
            raise nc.NonFiniteError(f"sampler diverged at step {t}")
    return x * np.asarray(cfg.inc_scale)


MAX_ROTATION_STEP = np.pi - 1e-6


def bound_rotation(incs: np.ndarray) -> np.ndarray:
    """Shrink any rotation increment with norm >= pi onto the principal
    branch so the composed poses stay well defined for arbitrary weights."""
    w = incs[..., 3:]
    n = np.linalg.norm(w, axis=-1, keepdims=True)
    if np.all(n < MAX_ROTATION_STEP):
        return incs
    out = incs.copy()
    out[..., 3:] = np.where(n >= MAX_ROTATION_STEP, w * (MAX_ROTATION_STEP / np.maximum(n, 1e-300)), w)
    return out


class DynamicsModel:
    """Parameters + config with the inference entry points."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params
        self.schedule = make_schedule(cfg) if cfg.is_diffusion else None

    def predict(self, window: HistoryWindow, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """(contact probabilities (B, H), increments (B, H, 6) in m / rad).

        Models without a contact head report probability 0.5 everywhere.
        """
        cfg = self.cfg
        P = as_tensors(self.params)
        feats = window_features(window, cfg)
        z = encode_and_fuse(feats, P, cfg)
        forecast = predict_contacts(z, P, cfg) if cfg.uses_contact else None
        h = condition_vector(z, forecast)
        if cfg.is_diffusion:
            incs = sample_increments(h, P, cfg, seed, self.schedule)
        else:
            incs = _clip(direct_predict(feats, h, P, cfg).data, cfg) * np.asarray(cfg.inc_scale)
        incs = bound_rotation(incs)
        probs = forecast.probs.data if forecast is not None else np.full((len(window), cfg.H), 0.5)
        return probs, incs

    def predict_rollout_chunk(self, window: HistoryWindow, seed: int = 0) -> tuple[np.ndarray, Pose]:
        probs, incs = self.predict(window, seed)
        return probs, apply_increments(window.anchor, incs)


def predict_rollout_chunk(window: HistoryWindow, params: dict[str, np.ndarray], cfg: ModelConfig, seed: int = 0):
    return DynamicsModel(cfg, params).predict_rollout_chunk(window, seed)
