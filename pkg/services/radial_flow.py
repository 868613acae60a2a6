"""Single radial normalizing flow z = u + beta h(r) (u - z0) with closed-form log-determinant."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import expit

from services.matvae_errors import FlowDomainError

EPS_ALPHA = 1e-6
EPS_R = 1e-8
BETA_H_CLAMP = 30.0


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def inverse_softplus(y: float) -> float:
    return float(y + math.log(-math.expm1(-y)))


@dataclass
class FlowCache:
    d: np.ndarray
    n: np.ndarray
    r: np.ndarray
    h: np.ndarray
    s: np.ndarray
    unclipped: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    alpha: float
    beta: float


class RadialFlow:
    """Radial flow in D dimensions; alpha > 0 and beta > -alpha hold by construction."""

    def __init__(self, dim: int = 2, z0: Optional[np.ndarray] = None, log_alpha_raw: float = 0.0) -> None:
        self.dim = dim
        alpha = float(softplus(log_alpha_raw)) + EPS_ALPHA
        self.params: Dict[str, np.ndarray] = {
            "z0": np.zeros(dim) if z0 is None else np.asarray(z0, dtype=np.float64).copy(),
            "log_alpha_raw": np.array(float(log_alpha_raw)),
            # softplus(beta_raw) = alpha makes beta = 0, the identity map
            "beta_raw": np.array(inverse_softplus(alpha)),
        }
        self.grads: Dict[str, np.ndarray] = {name: np.zeros_like(value) for name, value in self.params.items()}
        self._cache: Optional[FlowCache] = None

    @property
    def alpha(self) -> float:
        return float(softplus(self.params["log_alpha_raw"])) + EPS_ALPHA

    @property
    def beta(self) -> float:
        return -self.alpha + float(softplus(self.params["beta_raw"]))

    def named_parameters(self, prefix: str = "flow."):
        for name, value in self.params.items():
            yield prefix + name, value

    def named_gradients(self, prefix: str = "flow."):
        for name, value in self.grads.items():
            yield prefix + name, value

    def zero_grad(self) -> None:
        for value in self.grads.values():
            value.fill(0.0)

    def forward(self, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        u = np.atleast_2d(np.asarray(u, dtype=np.float64))
        alpha, beta = self.alpha, self.beta
        d = u - self.params["z0"]
        n = np.linalg.norm(d, axis=1)
        r = n + EPS_R
        h = 1.0 / (alpha + r)
        raw = beta * h
        s = np.clip(raw, -BETA_H_CLAMP, BETA_H_CLAMP)
        a1 = 1.0 + s
        a2 = 1.0 + s - s * h * r
        if np.any(a1 <= 0.0) or np.any(a2 <= 0.0):
            raise FlowDomainError(
                f"Radial flow log-determinant argument is not positive (alpha={alpha:.6g}, beta={beta:.6g})."
            )
        z = u + s[:, None] * d
        log_det = (self.dim - 1) * np.log(a1) + np.log(a2)
        self._cache = FlowCache(d, n, r, h, s, np.abs(raw) <= BETA_H_CLAMP, a1, a2, alpha, beta)
        return z, log_det

    def backward(self, gz: np.ndarray, g_log_det: np.ndarray, param_grads: bool = True) -> np.ndarray:
        """Returns dL/du given dL/dz and dL/dlog_det from the last forward."""
        c = self._cache
        gz = np.asarray(gz, dtype=np.float64)
        g_log_det = np.asarray(g_log_det, dtype=np.float64)
        hr = c.h * c.r
        gs = np.sum(gz * c.d, axis=1) + g_log_det * ((self.dim - 1) / c.a1 + (1.0 - hr) / c.a2)
        gs = gs * c.unclipped
        gh = gs * c.beta - g_log_det * c.s * c.r / c.a2
        gr = -gh * c.h**2 - g_log_det * c.s * c.h / c.a2
        g_beta = np.sum(gs * c.h)
        g_alpha = np.sum(-gh * c.h**2)

        unit = np.divide(c.d, c.n[:, None], out=np.zeros_like(c.d), where=c.n[:, None] > 0)
        gd = c.s[:, None] * gz + gr[:, None] * unit
        if param_grads:
            a_raw = float(self.params["log_alpha_raw"])
            b_raw = float(self.params["beta_raw"])
            self.grads["z0"] += -gd.sum(axis=0)
            self.grads["log_alpha_raw"] += expit(a_raw) * (g_alpha - g_beta)
            self.grads["beta_raw"] += expit(b_raw) * g_beta
        return gz + gd

    def state(self) -> Dict[str, object]:
        return {
            "z0": self.params["z0"].tolist(),
            "log_alpha_raw": float(self.params["log_alpha_raw"]),
            "beta_raw": float(self.params["beta_raw"]),
        }

    @classmethod
    def from_state(cls, state: Dict[str, object]) -> "RadialFlow":
        z0 = np.asarray(state["z0"], dtype=np.float64)
        flow = cls(dim=len(z0), z0=z0, log_alpha_raw=float(state["log_alpha_raw"]))
        flow.params["beta_raw"][...] = float(state["beta_raw"])
        return flow
