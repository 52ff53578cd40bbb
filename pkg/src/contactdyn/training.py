"""Joint contact/diffusion loss and the two-phase training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numcore as nc
from .model import (
    ModelConfig,
    NoiseSchedule,
    condition_vector,
    direct_predict,
    encode_and_fuse,
    forward_diffuse,
    make_schedule,
    noise_predict,
    predict_contacts,
    window_features,
)
from .rng import substream
from .simenv import HistoryWindow

BCE_EPS = 1e-7
PHASE_LR = {"pretrain": 1e-3, "finetune": 1e-4}


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    phase: str = "pretrain"
    lr: float | None = None
    lam: float = 1.0
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    val_fraction: float = 0.1
    pretrain_lr: float = PHASE_LR["pretrain"]

    def __post_init__(self):
        if self.phase not in PHASE_LR:
            raise ValueError(f"phase must be one of {sorted(PHASE_LR)}")
        if self.lr is None:
            self.lr = PHASE_LR[self.phase]
        if self.lr <= 0 or self.lam < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("need lr > 0, lam >= 0, batch_size >= 1, epochs >= 0")
        if self.phase == "finetune" and not self.lr < self.pretrain_lr:
            raise ValueError("finetune learning rate must be below the pretrain rate")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")


@dataclass
class LossReport:
    epoch: int
    L: float
    L_cnt: float
    L_diff: float
    lam: float
    val: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "L": self.L, "L_cnt": self.L_cnt, "L_diff": self.L_diff, "lam": self.lam, "val": self.val}


def bce(probs: nc.Tensor, target: np.ndarray) -> nc.Tensor:
    p = nc.clip(probs, BCE_EPS, 1.0 - BCE_EPS)
    pos = nc.mul(target, nc.log(p))
    neg = nc.mul(1.0 - target, nc.log(nc.sub(1.0, p)))
    return nc.scale(nc.mean(nc.add(pos, neg)), -1.0)


def loss_graph(batch: HistoryWindow, cfg: ModelConfig, lam: float, rng_t, rng_eps, schedule: NoiseSchedule | None) -> nc.Graph:
    """Build the traced loss for one batch; randomness is drawn up front."""
    feats = window_features(batch, cfg)
    B = len(batch)
    x0 = batch.target_x0 / np.asarray(cfg.inc_scale)
    if cfg.is_diffusion:
        t = rng_t.integers(1, schedule.T + 1, size=B)
        eps = rng_eps.standard_normal(x0.shape)
        x_t = forward_diffuse(x0, t, eps, schedule)
    teacher = batch.target_c if cfg.conditioning == "teacher-forced" else None

    def fn(inputs, P):
        z = encode_and_fuse(feats, P, cfg)
        out = {}
        if cfg.uses_contact:
            forecast = predict_contacts(z, P, cfg, teacher=teacher)
            out["L_cnt"] = bce(forecast.probs, batch.target_c)
        else:
            forecast = None
            out["L_cnt"] = nc.Tensor(0.0)
        h = condition_vector(z, forecast)
        if cfg.is_diffusion:
            pred, target = noise_predict(x_t, t, h, P, cfg), eps
        else:
            pred, target = direct_predict(feats, h, P, cfg), x0
        out["L_diff"] = nc.mean(nc.square(nc.sub(pred, target)))
        out["L"] = nc.add(out["L_cnt"], nc.scale(out["L_diff"], lam))
        return out

    return fn


def joint_loss(
    batch: HistoryWindow,
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    seed: int = 0,
    lam: float = 1.0,
    rng_t=None,
    rng_eps=None,
    schedule: NoiseSchedule | None = None,
    with_grad: bool = True,
):
    """L = L_cnt + lam * L_diff for one batch, plus parameter gradients.

    L_cnt is the clamped BCE averaged over batch and horizon; L_diff the
    per-element squared error of the predicted noise (or of x0 for the
    regression baselines).
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    schedule = schedule or (make_schedule(cfg) if cfg.is_diffusion else None)
    rng_t = rng_t if rng_t is not None else substream(seed, "diffusion-t")
    rng_eps = rng_eps if rng_eps is not None else substream(seed, "diffusion-noise")
    fn = loss_graph(batch, cfg, lam, rng_t, rng_eps, schedule)
    graph = nc.Graph(fn, params)
    out = nc.forward_eval(graph, {})
    L = out["L"].item()
    if not math.isfinite(L):
        raise DivergenceError("non-finite loss")
    grads = nc.backward_gradients(graph, out["L"]) if with_grad else None
    return L, out["L_cnt"].item(), out["L_diff"].item(), grads


def split_by_trajectory(windows: HistoryWindow, fraction: float, seed: int):
    """Hold out whole trajectories so overlapping windows never leak."""
    trajs = np.unique(windows.traj_idx)
    n_val = int(round(fraction * len(trajs)))
    if n_val == 0:
        return windows, None
    val_ids = substream(seed, "val-split").choice(trajs, size=n_val, replace=False)
    is_val = np.isin(windows.traj_idx, val_ids)
    return windows.take(np.flatnonzero(~is_val)), windows.take(np.flatnonzero(is_val))


def evaluate_loss(windows: HistoryWindow, params, cfg: ModelConfig, lam: float, seed: int, batch_size: int = 256) -> dict:
    schedule = make_schedule(cfg) if cfg.is_diffusion else None
    rng_t, rng_eps = substream(seed, "val-t"), substream(seed, "val-noise")
    tot = np.zeros(2)
    for lo in range(0, len(windows), batch_size):
        b = windows.take(np.arange(lo, min(lo + batch_size, len(windows))))
        _, lc, ld, _ = joint_loss(b, params, cfg, lam=lam, rng_t=rng_t, rng_eps=rng_eps, schedule=schedule, with_grad=False)
        tot += len(b) * np.array([lc, ld])
    lc, ld = tot / len(windows)
    return {"L": lc + lam * ld, "L_cnt": lc, "L_diff": ld}


def train_phase(
    tcfg: TrainConfig,
    mcfg: ModelConfig,
    params_in: dict[str, np.ndarray],
    windows: HistoryWindow,
    on_epoch: Callable[[LossReport, dict[str, np.ndarray]], None] | None = None,
):
    """Run ``tcfg.epochs`` epochs of minibatch Adam on ``windows``.

    Never reinitialises: the returned parameters start from a copy of
    ``params_in``. Epoch losses are window-weighted means, and the reported
    ``L`` is recomputed from the averaged components so the decomposition
    holds exactly.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params_in.items()}
    train, held_out = split_by_trajectory(windows, tcfg.val_fraction, tcfg.seed)
    if len(train) == 0:
        raise ValueError("no training windows")
    opt = nc.OptimizerState(lr=tcfg.lr)
    schedule = make_schedule(mcfg) if mcfg.is_diffusion else None
    r_order = substream(tcfg.seed, "data-order")
    r_t = substream(tcfg.seed, "diffusion-t")
    r_eps = substream(tcfg.seed, "diffusion-noise")
    reports: list[LossReport] = []
    for epoch in range(1, tcfg.epochs + 1):
        order = r_order.permutation(len(train))
        tot = np.zeros(2)
        for step, lo in enumerate(range(0, len(order), tcfg.batch_size)):
            batch = train.take(order[lo : lo + tcfg.batch_size])
            try:
                L, lc, ld, grads = joint_loss(batch, params, mcfg, lam=tcfg.lam, rng_t=r_t, rng_eps=r_eps, schedule=schedule)
            except (nc.NonFiniteError, DivergenceError) as exc:
                raise DivergenceError(f"divergence at epoch {epoch}, step {step}: {exc}") from exc
            nc.optimizer_step(opt, params, grads)
            tot += len(batch) * np.array([lc, ld])
        lc, ld = tot / len(train)
        val = evaluate_loss(held_out, params, mcfg, tcfg.lam, tcfg.seed) if held_out is not None else {}
        rep = LossReport(epoch=epoch, L=lc + tcfg.lam * ld, L_cnt=lc, L_diff=ld, lam=tcfg.lam, val=val)
        reports.append(rep)
        if on_epoch is not None:
            on_epoch(rep, params)
    return params, reports
