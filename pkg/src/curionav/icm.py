"""Intrinsic Curiosity Module over laser scans.

The encoder (three FC/ELU layers) is shared by the inverse model, which
predicts the action between two consecutive scans, and the forward model,
which predicts the next feature vector from the current one and the action.
The forward model's prediction error is the curiosity reward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class IcmConfig:
    laser_dims: int = 72
    action_count: int = 3
    feature_dims: int = 16
    inverse_fc: tuple = (128, 64, 16)
    inverse_head: int = 32
    forward_fc: tuple = (64, 32)
    lambda_f: float = 0.2

    def __post_init__(self):
        if self.inverse_fc[-1] != self.feature_dims:
            raise ValueError("last encoder layer must produce feature_dims units")
        if not 0.0 <= self.lambda_f <= 1.0:
            raise ValueError("lambda_f must lie in [0, 1]")


@dataclass
class IcmStepRecord:
    phi_t: Tensor
    phi_t1: Tensor
    phi_t1_hat: Tensor
    action_probs_hat: Tensor
    intrinsic_reward: np.ndarray | float


def _dense(rng, p, name, n_out, n_in):
    bound = 1.0 / math.sqrt(n_in)
    p[f"{name}.w"] = rng.uniform(-bound, bound, size=(n_out, n_in))
    p[f"{name}.b"] = np.zeros(n_out)


def init_icm_params(cfg: IcmConfig, rng: np.random.Generator, prefix: str = "icm.") -> dict[str, np.ndarray]:
    p: dict[str, np.ndarray] = {}
    width = cfg.laser_dims
    for i, units in enumerate(cfg.inverse_fc):
        _dense(rng, p, f"{prefix}enc{i}", units, width)
        width = units
    _dense(rng, p, f"{prefix}inv0", cfg.inverse_head, 2 * cfg.feature_dims)
    _dense(rng, p, f"{prefix}inv_out", cfg.action_count, cfg.inverse_head)
    width = cfg.feature_dims + cfg.action_count
    for i, units in enumerate(cfg.forward_fc):
        _dense(rng, p, f"{prefix}fwd{i}", units, width)
        width = units
    _dense(rng, p, f"{prefix}fwd_out", cfg.feature_dims, width)
    return p


def intrinsic_reward(phi_t1_hat, phi_t1):
    """0.5 * ||phi_hat - phi||^2 over the trailing axis (per row for batches)."""
    a = np.asarray(getattr(phi_t1_hat, "data", phi_t1_hat), dtype=np.float64)
    b = np.asarray(getattr(phi_t1, "data", phi_t1), dtype=np.float64)
    d = a - b
    return 0.5 * np.sum(d * d, axis=-1)


def icm_loss(record: IcmStepRecord, true_action, lambda_f: float) -> Tensor:
    """(1 - λf)·cross-entropy(â, a) + λf·½‖φ̂' − φ'‖², summed over any batch axis."""
    inverse = ad.cross_entropy(record.action_probs_hat, true_action)
    forward = ad.mse_half(record.phi_t1_hat, record.phi_t1)
    return ad.add(ad.mul(inverse, 1.0 - lambda_f), ad.mul(forward, lambda_f))


class CuriosityModule:
    def __init__(self, cfg: IcmConfig, params, prefix: str = "icm."):
        self.cfg = cfg
        self.prefix = prefix
        self.params = {k: ad.as_tensor(v) for k, v in params.items() if k.startswith(prefix)}
        for name, arr in init_icm_params(cfg, np.random.default_rng(0), prefix).items():
            if name not in self.params:
                raise ad.ShapeError(f"missing parameter {name!r}")
            if self.params[name].shape != arr.shape:
                raise ad.ShapeError(f"parameter {name!r} has shape {self.params[name].shape}, expected {arr.shape}")

    def _layer(self, x, name):
        return ad.linear(x, self.params[f"{self.prefix}{name}.w"], self.params[f"{self.prefix}{name}.b"])

    def encode(self, scan) -> Tensor:
        x = ad.as_tensor(scan)
        if x.shape[-1] != self.cfg.laser_dims:
            raise ad.ShapeError(f"scan has {x.shape[-1]} entries, expected {self.cfg.laser_dims}")
        for i in range(len(self.cfg.inverse_fc)):
            x = ad.elu(self._layer(x, f"enc{i}"))
        return x

    def inverse_predict(self, phi_t, phi_t1) -> Tensor:
        phi_t, phi_t1 = ad.as_tensor(phi_t), ad.as_tensor(phi_t1)
        if phi_t.shape[-1] != self.cfg.feature_dims or phi_t1.shape[-1] != self.cfg.feature_dims:
            raise ad.ShapeError("inverse model expects two feature vectors of length feature_dims")
        h = ad.elu(self._layer(ad.concat([phi_t, phi_t1]), "inv0"))
        return ad.softmax(self._layer(h, "inv_out"))

    def forward_predict(self, phi_t, action) -> Tensor:
        phi_t, action = ad.as_tensor(phi_t), ad.as_tensor(action)
        if phi_t.shape[-1] != self.cfg.feature_dims or action.shape[-1] != self.cfg.action_count:
            raise ad.ShapeError("forward model expects features and a one-hot action")
        x = ad.concat([phi_t, action])
        for i in range(len(self.cfg.forward_fc)):
            x = ad.elu(self._layer(x, f"fwd{i}"))
        return self._layer(x, "fwd_out")

    def step(self, scan_t, scan_t1, action) -> IcmStepRecord:
        """Encode both scans, run both models; rows of a batch are independent transitions."""
        phi_t = self.encode(scan_t)
        phi_t1 = self.encode(scan_t1)
        probs = self.inverse_predict(phi_t, phi_t1)
        phi_hat = self.forward_predict(phi_t, action)
        return IcmStepRecord(phi_t, phi_t1, phi_hat, probs, intrinsic_reward(phi_hat, phi_t1))
