"""Receding-horizon rollouts, metrics and the baseline comparison table."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, add_s, apply_increments, auc_from_errors, encode_increments
from .model import KIND_LABELS, DynamicsModel, ModelConfig, desk_model, init_params
from .rng import substream
from .simenv import HistoryWindow, Trajectory, windows_from_dataset
from .training import TrainConfig, train_phase

MSE_CONVENTION = "increment space: unweighted mean over (dx, dy, dz, wx, wy, wz); metres and radians"
REGIMES = ("sim", "real", "finetune")
REGIME_LABELS = {"sim": "Sim data", "real": "Real data", "finetune": "Real-Finetune"}


@dataclass
class RolloutConfig:
    T_roll: int = 40
    h_apply: int | None = None  # None -> H // 2
    contact_feedback: str = "self"  # or "oracle"
    seed: int = 0
    samples: int = 1  # draws averaged into each chunk's point forecast

    def resolve(self, H: int) -> "RolloutConfig":
        h = self.h_apply if self.h_apply is not None else max(H // 2, 1)
        if not 1 <= h <= H:
            raise ValueError(f"h_apply must be in 1..{H}, got {h}")
        if self.contact_feedback not in ("self", "oracle"):
            raise ValueError(f"unknown contact feedback {self.contact_feedback!r}")
        if self.T_roll < 1:
            raise ValueError("T_roll must be >= 1")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        return dataclasses.replace(self, h_apply=h)


@dataclass
class RolloutResult:
    pred: Pose  # (B, n, ...) predicted poses for steps K+1 .. K+n
    gt: Pose
    anchor: Pose  # (B,) s_K
    contacts: np.ndarray  # (B, n) committed contact labels
    clouds: np.ndarray  # (B, N, 3)


class SampleMean:
    """Point forecast from the mean of ``samples`` draws of a stochastic model.

    Draws share one batched call, so they use the seed's consecutive
    sampler noise. Contact probabilities are averaged the same way.
    """

    def __init__(self, model, samples: int):
        self.model, self.samples = model, samples

    def predict(self, window: HistoryWindow, seed: int = 0):
        if self.samples == 1:
            return self.model.predict(window, seed)
        n = len(window)
        probs, incs = self.model.predict(window.take(np.tile(np.arange(n), self.samples)), seed)
        probs = probs.reshape(self.samples, n, -1).mean(axis=0)
        return probs, incs.reshape(self.samples, n, *incs.shape[1:]).mean(axis=0)


def _window_at(trajs: list[Trajectory], buf_p, buf_R, buf_c, t: int, K: int, H: int) -> HistoryWindow:
    B = len(trajs)
    hist = np.arange(t - K, t + 1)
    clouds = np.stack([tr.cloud for tr in trajs])
    return HistoryWindow(
        pose_p=buf_p[:, hist],
        pose_R=buf_R[:, hist],
        q=np.stack([tr.q[hist] for tr in trajs]),
        a=np.stack([tr.a[hist] for tr in trajs]),
        c=buf_c[:, hist].astype(np.float64),
        clouds=clouds,
        cloud_idx=np.arange(B),
        target_c=np.zeros((B, H)),
        target_x0=np.zeros((B, H, 6)),
        future_p=np.zeros((B, H, 3)),
        future_R=np.broadcast_to(np.eye(3), (B, H, 3, 3)).copy(),
        traj_idx=np.arange(B),
        t=np.full(B, t),
    )


def rollout_batch(model, trajs: list[Trajectory], K: int, H: int, cfg: RolloutConfig) -> RolloutResult:
    """Chain H-step predictions, committing ``h_apply`` poses per chunk.

    Actions and finger positions always come from the logged trajectory;
    contact history past step K is either the model's own thresholded
    forecast (``self``) or the logged labels (``oracle``). ``model`` is any
    object with ``predict(window, seed) -> (probs, increments)``.
    """
    cfg = cfg.resolve(H)
    model = SampleMean(model, cfg.samples)
    T = min(tr.T for tr in trajs)
    if T < K + 1:
        raise ValueError(f"trajectories of length {T} cannot supply a {K + 1}-step history")
    end = min(K + cfg.T_roll, T)
    buf_p = np.stack([tr.s.p for tr in trajs])[:, : T + 1].copy()
    buf_R = np.stack([tr.s.R for tr in trajs])[:, : T + 1].copy()
    gt_c = np.stack([tr.c[: T + 1] for tr in trajs])
    buf_c = gt_c.copy()
    gt_p, gt_R = buf_p.copy(), buf_R.copy()
    t, chunk = K, 0
    while t < end:
        window = _window_at(trajs, buf_p, buf_R, buf_c, t, K, H)
        seed = int(substream(cfg.seed, "rollout", chunk).integers(2**31))
        probs, incs = model.predict(window, seed)
        poses = apply_increments(window.anchor, incs)
        n = min(cfg.h_apply, end - t)
        buf_p[:, t + 1 : t + 1 + n] = poses.p[:, :n]
        buf_R[:, t + 1 : t + 1 + n] = poses.R[:, :n]
        if cfg.contact_feedback == "self":
            buf_c[:, t + 1 : t + 1 + n] = (probs[:, :n] > 0.5).astype(buf_c.dtype)
        t += n
        chunk += 1
    sl = slice(K + 1, end + 1)
    return RolloutResult(
        pred=Pose(buf_p[:, sl], buf_R[:, sl]),
        gt=Pose(gt_p[:, sl], gt_R[:, sl]),
        anchor=Pose(gt_p[:, K], gt_R[:, K]),
        contacts=buf_c[:, sl],
        clouds=np.stack([tr.cloud for tr in trajs]),
    )


def rollout_long_horizon(model, traj: Trajectory, K: int, H: int, cfg: RolloutConfig) -> tuple[Pose, np.ndarray]:
    res = rollout_batch(model, [traj], K, H, cfg)
    return res.pred[0], res.contacts[0]


@dataclass
class MetricsReport:
    mse: float
    add_s_auc: float
    success: float
    per_trajectory: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    mse_convention: str = MSE_CONVENTION

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def cell(self) -> str:
        return format_cell(self.mse, self.add_s_auc)


def format_cell(mse: float, auc: float) -> str:
    return f"{mse:.2g} MSE / {auc:.2f} ADD-S"


def compute_metrics(
    pred: Pose,
    gt: Pose,
    anchor: Pose,
    clouds: np.ndarray,
    d_max: float,
    success_threshold: float,
    config: dict | None = None,
) -> MetricsReport:
    """Metrics over a batch of aligned pose sequences (B, n).

    MSE compares the increment sequences obtained by prepending the shared
    anchor; ADD-S AUC pools every frame; success checks the final predicted
    translation against the ground-truth endpoint.
    """
    if pred.p.shape != gt.p.shape:
        raise ValueError(f"prediction shape {pred.p.shape} != ground truth {gt.p.shape}")
    if d_max <= 0 or success_threshold <= 0:
        raise ValueError("thresholds must be positive")

    def with_anchor(seq: Pose) -> Pose:
        return Pose(np.concatenate([anchor.p[:, None], seq.p], axis=1), np.concatenate([anchor.R[:, None], seq.R], axis=1))

    ip = encode_increments(with_anchor(pred))
    ig = encode_increments(with_anchor(gt))
    sq = (ip - ig) ** 2
    errors = np.stack([add_s(pred[b], gt[b], clouds[b]) for b in range(pred.p.shape[0])])
    end_err = np.linalg.norm(pred.p[:, -1] - gt.p[:, -1], axis=-1)
    ok = end_err < success_threshold
    per = [
        {
            "mse": float(sq[b].mean()),
            "add_s_auc": auc_from_errors(errors[b], d_max),
            "endpoint_error": float(end_err[b]),
            "success": bool(ok[b]),
        }
        for b in range(len(ok))
    ]
    return MetricsReport(
        mse=float(sq.mean()),
        add_s_auc=auc_from_errors(errors.ravel(), d_max),
        success=float(100.0 * ok.mean()),
        per_trajectory=per,
        config=dict(config or {}, d_max=d_max, success_threshold=success_threshold),
    )


def open_loop_metrics(model, windows: HistoryWindow, d_max: float, success_threshold: float, seed: int = 0,
                      batch_size: int = 512, samples: int = 1) -> MetricsReport:
    """H-step predictions from ground-truth histories, scored per window."""
    model = SampleMean(model, samples)
    batch_size = max(1, batch_size // samples)
    preds_p, preds_R = [], []
    for i, lo in enumerate(range(0, len(windows), batch_size)):
        w = windows.take(np.arange(lo, min(lo + batch_size, len(windows))))
        _, incs = model.predict(w, int(substream(seed, "open-loop", i).integers(2**31)))
        poses = apply_increments(w.anchor, incs)
        preds_p.append(poses.p)
        preds_R.append(poses.R)
    pred = Pose(np.concatenate(preds_p), np.concatenate(preds_R))
    return compute_metrics(pred, windows.future, windows.anchor, windows.cloud, d_max, success_threshold,
                           {"mode": "open-loop", "samples": samples})


def rollout_metrics(model, trajs: list[Trajectory], K: int, H: int, rcfg: RolloutConfig, d_max: float, success_threshold: float) -> MetricsReport:
    res = rollout_batch(model, trajs, K, H, rcfg)
    r = rcfg.resolve(H)
    return compute_metrics(
        res.pred, res.gt, res.anchor, res.clouds, d_max, success_threshold,
        {"mode": "rollout", "T_roll": r.T_roll, "h_apply": r.h_apply, "contact_feedback": r.contact_feedback,
         "samples": r.samples},
    )


# ---------------------------------------------------------------- baselines


@dataclass
class SuiteConfig:
    model: ModelConfig = field(default_factory=desk_model)
    sim_epochs: int = 20
    real_epochs: int = 40
    batch_size: int = 128
    lam: float = 1.0
    pretrain_lr: float = 1e-3
    finetune_lr: float = 1e-4
    stride: int = 4
    rollout: RolloutConfig = field(default_factory=lambda: RolloutConfig(samples=4))
    d_max: float = 0.05
    success_threshold: float = 0.025
    val_fraction: float = 0.0


def _train(kind_cfg: ModelConfig, windows: HistoryWindow, params, phase: str, epochs: int, lr: float, scfg: SuiteConfig, seed: int):
    tcfg = TrainConfig(
        phase=phase, lr=lr, lam=scfg.lam, batch_size=scfg.batch_size, epochs=epochs, seed=seed,
        val_fraction=scfg.val_fraction, pretrain_lr=scfg.pretrain_lr,
    )
    return train_phase(tcfg, kind_cfg, params, windows)


def baseline_suite(
    sim: list[Trajectory],
    real_train: list[Trajectory],
    real_test: list[Trajectory],
    kinds: list[str],
    scfg: SuiteConfig,
    seed: int = 0,
    log=None,
) -> dict:
    """Train every kind under the three regimes and score on the real test split.

    Regimes: ``sim`` (sim only), ``real`` (real-twin only, from scratch) and
    ``finetune`` (the sim model fine-tuned on real-twin data at a lower rate).
    A failing cell records its diagnostic instead of a number.
    """
    K, H = scfg.model.K, scfg.model.H
    w_sim = windows_from_dataset(sim, K, H, scfg.stride)
    w_real = windows_from_dataset(real_train, K, H, scfg.stride)
    w_test = windows_from_dataset(real_test, K, H, scfg.stride)
    table: dict = {"seed": seed, "kinds": list(kinds), "regimes": list(REGIMES), "cells": {}}
    for kind in kinds:
        mcfg = dataclasses.replace(scfg.model, kind=kind)
        init = init_params(mcfg, seed)
        cells = table["cells"].setdefault(kind, {})
        sim_params = None
        for regime in REGIMES:
            t0 = time.time()
            try:
                if regime == "sim":
                    params, rep = _train(mcfg, w_sim, init, "pretrain", scfg.sim_epochs, scfg.pretrain_lr, scfg, seed)
                    sim_params = params
                elif regime == "real":
                    params, rep = _train(mcfg, w_real, init, "pretrain", scfg.real_epochs, scfg.pretrain_lr, scfg, seed)
                else:
                    if sim_params is None:
                        raise RuntimeError("sim-pretrained parameters unavailable")
                    params, rep = _train(mcfg, w_real, sim_params, "finetune", scfg.real_epochs, scfg.finetune_lr, scfg, seed)
                model = DynamicsModel(mcfg, params)
                roll = rollout_metrics(model, real_test, K, H, scfg.rollout, scfg.d_max, scfg.success_threshold)
                ol = open_loop_metrics(model, w_test, scfg.d_max, scfg.success_threshold, seed=seed, samples=scfg.rollout.samples)
                cells[regime] = {
                    "mse": roll.mse,
                    "add_s_auc": roll.add_s_auc,
                    "success": roll.success,
                    "open_loop_mse": ol.mse,
                    "open_loop_add_s_auc": ol.add_s_auc,
                    "final_loss": rep[-1].L if rep else None,
                    "seconds": time.time() - t0,
                }
            except Exception as exc:  # recorded, never silently zeroed
                cells[regime] = {"error": f"{type(exc).__name__}: {exc}", "seconds": time.time() - t0}
            if log is not None:
                log(kind, regime, cells[regime])
    return table


def table_rows(table: dict) -> list[list]:
    """Comparison rows: method, then
    (MSE, ADD-S) for each regime."""
    header = ["Method"] + [f"{REGIME_LABELS[r]} {m}" for r in table["regimes"] for m in ("MSE", "ADD-S")]
    rows = [header]
    for kind in table["kinds"]:
        row = [KIND_LABELS[kind]]
        for r in table["regimes"]:
            cell = table["cells"][kind].get(r, {})
            row += [cell.get("mse"), cell.get("add_s_auc")]
        rows.append(row)
    return rows


def median_table(tables: list[dict]) -> dict:
    """Cell-wise median over seeds (error cells are skipped)."""
    out = {"seeds": [t["seed"] for t in tables], "kinds": tables[0]["kinds"], "regimes": tables[0]["regimes"], "cells": {}}
    for kind in out["kinds"]:
        for r in out["regimes"]:
            vals = [t["cells"][kind][r] for t in tables if "error" not in t["cells"][kind][r]]
            cell = {}
            if vals:
                for key in ("mse", "add_s_auc", "success", "open_loop_mse", "open_loop_add_s_auc"):
                    cell[key] = float(np.median([v[key] for v in vals]))
            cell["n_seeds"] = len(vals)
            out["cells"].setdefault(kind, {})[r] = cell
    return out
