"""Fingertip force calibration and threshold contact detection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TactileConfig:
    window_s: float = 3.0
    threshold: float = 0.3  # newtons, compared against |Fx| + |Fy| + |Fz|
    noise_std: float = 0.05
    bias_std: float = 0.2  # per-finger static offset drawn once per episode
    rule: str = "l1"  # "l1" | "normal"

    def __post_init__(self):
        if self.window_s <= 0 or self.threshold <= 0:
            raise ValueError("tactile window and threshold must be positive")
        if self.rule not in ("l1", "normal"):
            raise ValueError(f"unknown contact rule {self.rule!r}")


def calibrate_offset(readings: np.ndarray, cfg: TactileConfig, dt: float) -> np.ndarray:
    """Per-finger offset = mean of the first ``window_s`` seconds of readings.

    ``readings`` is (T, F, 3). Returns (F, 3).
    """
    readings = np.asarray(readings, dtype=np.float64)
    n = int(round(cfg.window_s / dt))
    if readings.shape[0] < n:
        raise ValueError(f"calibration needs {n} stationary samples, got {readings.shape[0]}")
    return readings[:n].mean(axis=0)


def finger_contacts(forces: np.ndarray, offset: np.ndarray, cfg: TactileConfig, normals: np.ndarray | None = None) -> np.ndarray:
    """Per-finger binary contact from raw readings (..., F, 3)."""
    f = np.asarray(forces, dtype=np.float64) - offset
    if cfg.rule == "l1":
        return np.abs(f).sum(axis=-1) > cfg.threshold
    if normals is None:
        raise ValueError("normal-force rule needs contact normals")
    return np.abs((f * normals).sum(axis=-1)) > cfg.threshold


def detect_contact(forces: np.ndarray, offset: np.ndarray, cfg: TactileConfig, normals: np.ndarray | None = None):
    """Hand-level label: 1 if any finger's calibrated force passes the rule."""
    return finger_contacts(forces, offset, cfg, normals).any(axis=-1).astype(np.int64)
