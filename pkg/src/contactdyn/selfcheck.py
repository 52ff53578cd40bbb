"""Quick property suite behind ``contactdyn selfcheck``.

Each check returns a ``CheckResult``; the suite is small enough to run in
well under a minute on one core.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .geometry import (
    Pose,
    add_s,
    apply_increments,
    encode_increments,
    exp_map,
    log_map,
)
from .model import KINDS, ModelConfig, forward_diffuse, init_params, make_schedule
from .rng import substream
from .simenv import EnvConfig, HistoryWindow, generate_dataset, windows_from_dataset
from .tactile import TactileConfig, detect_contact
from .training import joint_loss


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def tiny_model_config(kind: str = "diffusion-contact", **kw) -> ModelConfig:
    base = dict(
        kind=kind, K=3, H=4, latent_dim=6, contact_dim=4, point_dim=5, point_hidden=4, temporal_dim=6,
        contact_hist_dim=3, fusion_hidden=6, diffusion_steps=10, unet_widths=(3, 4), cond_dim=5, time_dim=4,
        contact_head_hidden=5,
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_batch(seed: int, n_traj: int = 2, K: int = 3, H: int = 4, n_points: int = 6, domain: str = "sim") -> HistoryWindow:
    env = EnvConfig(domain=domain, n_points=n_points)
    trajs = generate_dataset(env, n_traj, K + H + 4, seed=seed, K=K, H=H)
    return windows_from_dataset(trajs, K, H, stride=3)


def sampled_gradcheck(f, grads: dict[str, np.ndarray], params: dict[str, np.ndarray], rng, per_tensor: int = 4, step: float = 1e-5) -> float:
    """Worst per-tensor relative error between ``grads`` and central
    differences of ``f`` at up to ``per_tensor`` random entries of each
    tensor (all entries when the tensor is smaller)."""
    scale = max(np.sqrt(sum(float(np.sum(g**2)) for g in grads.values())), 1e-12)
    worst = 0.0
    for k in sorted(params):
        flat = params[k].reshape(-1)
        idx = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + step
            up = f(params)
            flat[i] = old - step
            down = f(params)
            flat[i] = old
            num[j] = (up - down) / (2.0 * step)
        ana = grads[k].reshape(-1)[idx]
        # entries with negligible gradient are compared against the global scale
        denom = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-3 * scale)
        worst = max(worst, float(np.linalg.norm(ana - num) / denom))
    return worst


def joint_loss_gradcheck(cfg: ModelConfig, batch: HistoryWindow, seed: int, lam: float = 1.0, per_tensor: int = 4) -> float:
    """Sampled gradient check of the joint loss with the diffusion draws held fixed."""
    params = init_params(cfg, seed)
    # non-trivial biases and FiLM weights so every path carries gradient
    r = substream(seed, "gradcheck-perturb")
    params = {k: v + 0.1 * r.standard_normal(v.shape) for k, v in params.items()}

    def run(p, with_grad):
        return joint_loss(
            batch, p, cfg, lam=lam, rng_t=substream(seed, "diffusion-t"), rng_eps=substream(seed, "diffusion-noise"),
            with_grad=with_grad,
        )

    grads = run(params, True)[3]
    return sampled_gradcheck(lambda p: run(p, False)[0], grads, params, substream(seed, "gradcheck-coords"), per_tensor)


def _timed(name, tol, fn) -> CheckResult:
    t0 = time.time()
    value = float(fn())
    return CheckResult(name, bool(value <= tol), value, tol, time.time() - t0)


def check_gradients(n_configs: int = 4, seed: int = 0) -> CheckResult:
    def run():
        worst = 0.0
        for i in range(n_configs):
            cfg = tiny_model_config(KINDS[i % len(KINDS)])
            worst = max(worst, joint_loss_gradcheck(cfg, tiny_batch(seed + i, K=cfg.K, H=cfg.H), seed + i))
        return worst

    return _timed("gradient-check", 1e-4, run)


def random_rotation_vectors(rng, n: int, max_angle: float) -> np.ndarray:
    axis = rng.standard_normal((n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    return axis * rng.uniform(0.0, max_angle, size=(n, 1))


def random_pose_sequence(rng, n_steps: int, max_step: float = 0.5) -> Pose:
    w = random_rotation_vectors(rng, n_steps, np.pi)
    R = exp_map(w)
    p = rng.uniform(-1, 1, (n_steps, 3))
    # keep consecutive relative rotations away from pi
    for k in range(1, n_steps):
        R[k] = exp_map(random_rotation_vectors(rng, 1, max_step * np.pi)[0]) @ R[k - 1]
    return Pose(p, R)


def check_exp_log(n: int = 10_000, seed: int = 0) -> CheckResult:
    def run():
        w = random_rotation_vectors(substream(seed, "exp-log"), n, np.pi - 1e-3)
        return np.max(np.abs(log_map(exp_map(w)) - w))

    return _timed("exp-log-round-trip", 1e-9, run)


def check_increments(n_seq: int = 200, seed: int = 0) -> CheckResult:
    def run():
        rng = substream(seed, "increments")
        worst = 0.0
        for _ in range(n_seq):
            poses = random_pose_sequence(rng, 12)
            back = apply_increments(poses[0], encode_increments(poses))
            worst = max(worst, np.max(np.abs(back.p - poses.p[1:])), np.max(np.abs(back.R - poses.R[1:])))
        return worst

    return _timed("increment-round-trip", 1e-9, run)


def brute_add_s(pred: Pose, gt: Pose, cloud: np.ndarray) -> np.ndarray:
    a = np.einsum("...ij,nj->...ni", pred.R, cloud) + pred.p[..., None, :]
    b = np.einsum("...ij,nj->...ni", gt.R, cloud) + gt.p[..., None, :]
    d = np.linalg.norm(b[..., :, None, :] - a[..., None, :, :], axis=-1)
    return d.min(axis=-1).mean(axis=-1)


def check_add_s(n: int = 50, seed: int = 0) -> CheckResult:
    def run():
        rng = substream(seed, "add-s")
        worst = 0.0
        for _ in range(n):
            m = int(rng.integers(1, 65))
            cloud = rng.uniform(-0.05, 0.05, (m, 3))
            pred, gt = random_pose_sequence(rng, 3), random_pose_sequence(rng, 3)
            worst = max(worst, np.max(np.abs(add_s(pred, gt, cloud) - brute_add_s(pred, gt, cloud))))
        return worst

    return _timed("add-s-vs-brute-force", 1e-12, run)


def forward_statistics(cfg: ModelConfig, n: int, seed: int) -> float:
    """Worst violation ratio of the forward-noising moments (<= 1 passes):
    mean error in units of 4 standard errors, variance error in units of 5%."""
    sched = make_schedule(cfg)
    rng = substream(seed, "forward-stats")
    x0 = rng.uniform(-2, 2, 6)
    worst = 0.0
    for t in (1, sched.T // 2, sched.T):
        eps = rng.standard_normal((n, 6))
        xt = forward_diffuse(np.broadcast_to(x0, (n, 6)), t, eps, sched)
        ab = sched.alpha_bar[t]
        var = 1.0 - ab
        se = np.sqrt(var / n)
        worst = max(worst, np.max(np.abs(xt.mean(0) - np.sqrt(ab) * x0)) / (4 * se))
        worst = max(worst, np.max(np.abs(xt.var(0) / var - 1.0)) / 0.05)
    if not np.all(np.diff(sched.alpha_bar) < 0):
        return np.inf
    return worst


def check_diffusion(seed: int = 0) -> CheckResult:
    return _timed("forward-diffusion-moments", 1.0, lambda: forward_statistics(ModelConfig(), 20_000, seed))


def check_tactile() -> CheckResult:
    def run():
        cfg = TactileConfig()
        off = np.zeros((1, 3))
        below = detect_contact(np.array([[[0.1, 0.1, 0.05]]]), off, cfg)
        above = detect_contact(np.array([[[0.2, 0.1, 0.05]]]), off, cfg)
        return float(int(below[0]) != 0) + float(int(above[0]) != 1)

    return _timed("tactile-threshold-fixtures", 0.0, run)


def run_selfcheck(seed: int = 0) -> list[CheckResult]:
    return [
        check_gradients(seed=seed),
        check_exp_log(seed=seed),
        check_increments(seed=seed),
        check_add_s(seed=seed),
        check_diffusion(seed=seed),
        check_tactile(),
    ]
