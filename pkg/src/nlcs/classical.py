"""Augmented Lagrangian reconstruction with sparse and non-local priors.

Solves ``min ||D u||_1 + alpha * sum_i (u_i - sum_j W_ij u_j)^2  s.t.  Phi u = b``
by splitting ``omega = D u`` and ``x = u`` and alternating shrinkage, a
gradient step on ``u`` and an NLM-weighted ``x`` step, with multiplier
updates after each inner loop.  ``D`` is the orthonormal 2-D DCT-II.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.fft import dctn, idctn


class SolverDivergence(RuntimeError):
    """Raised when the augmented Lagrangian blows up."""

    def __init__(self, message: str, objective: list[float]):
        super().__init__(message)
        self.objective = objective


@dataclass
class SolverConfig:
    alpha: float = 0.05
    beta: float = 1.0
    theta: float = 1.0
    mu: float = 1.0
    step: float = 0.25
    h: float = 0.05
    search_radius: int = 5
    patch_radius: int = 1
    inner_iters: int = 10
    outer_iters: int = 100
    tol: float = 1e-5
    # "inv_beta" shrinks by 1/beta, "beta" by beta
    threshold: str = "inv_beta"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        for name in ("beta", "theta", "mu", "step", "h", "tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.search_radius < 1 or self.patch_radius < 1:
            raise ValueError("search_radius and patch_radius must be >= 1")
        if self.inner_iters < 1 or self.outer_iters < 1:
            raise ValueError("iteration caps must be >= 1")
        if self.threshold not in ("inv_beta", "beta"):
            raise ValueError(f"unknown threshold rule {self.threshold!r}")

    @property
    def tau(self) -> float:
        return 1.0 / self.beta if self.threshold == "inv_beta" else self.beta


class TransformD:
    """Orthonormal 2-D DCT-II on ``B x B`` blocks."""

    def __init__(self, block: int):
        self.block = block

    def forward(self, u: np.ndarray) -> np.ndarray:
        return dctn(u, type=2, norm="ortho")

    def adjoint(self, w: np.ndarray) -> np.ndarray:
        return idctn(w, type=2, norm="ortho")

    def matrix(self) -> np.ndarray:
        n = self.block * self.block
        eye = np.eye(n).reshape(n, self.block, self.block)
        return np.stack([self.forward(e).ravel() for e in eye], axis=1)


@dataclass
class SolverState:
    omega: np.ndarray
    u: np.ndarray
    x: np.ndarray
    v: np.ndarray
    gamma: np.ndarray
    lam: np.ndarray

    @classmethod
    def initial(cls, phi: np.ndarray, b: np.ndarray) -> "SolverState":
        n = phi.shape[1]
        blk = math.isqrt(n)
        u0 = (phi.T @ b).reshape(blk, blk)
        z = np.zeros_like(u0)
        return cls(omega=z.copy(), u=u0, x=z.copy(), v=z.copy(),
                   gamma=z.copy(), lam=np.zeros_like(b, dtype=np.float64))

    def copy(self) -> "SolverState":
        return SolverState(*(np.array(getattr(self, f)) for f in
                             ("omega", "u", "x", "v", "gamma", "lam")))


@dataclass
class ReconReport:
    u: np.ndarray
    objective: list[float] = field(default_factory=list)
    residuals: list[dict[str, float]] = field(default_factory=list)
    outer_iterations: int = 0
    inner_iterations: int = 0
    state: SolverState | None = None


def nlm_weights(u: np.ndarray, h: float, search_radius: int = 5,
                patch_radius: int = 1) -> sp.csr_matrix:
    """Row-stochastic non-local means weights on a square image.

    ``W[i, j]`` is proportional to ``exp(-||P_i - P_j||^2 / h)`` for ``j``
    inside the ``(2R+1)^2`` search window around ``i`` (clipped at the
    border), where ``P_k`` is the edge-replicated patch of radius
    ``patch_radius`` centred on pixel ``k``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    u = np.asarray(u, dtype=np.float64)
    rows_n, cols_n = u.shape
    pr, sr = patch_radius, search_radius
    up = np.pad(u, pr, mode="edge")
    idx = np.arange(rows_n * cols_n).reshape(rows_n, cols_n)
    rows, cols, vals = [], [], []
    for dy in range(-sr, sr + 1):
        for dx in range(-sr, sr + 1):
            y0, y1 = max(0, -dy), min(rows_n, rows_n - dy)
            x0, x1 = max(0, -dx), min(cols_n, cols_n - dx)
            if y0 >= y1 or x0 >= x1:
                continue
            dist = np.zeros((y1 - y0, x1 - x0))
            for a in range(2 * pr + 1):
                for c in range(2 * pr + 1):
                    p = up[y0 + a:y1 + a, x0 + c:x1 + c]
                    q = up[y0 + dy + a:y1 + dy + a, x0 + dx + c:x1 + dx + c]
                    dist += (p - q) ** 2
            rows.append(idx[y0:y1, x0:x1].ravel())
            cols.append(idx[y0 + dy:y1 + dy, x0 + dx:x1 + dx].ravel())
            vals.append(np.exp(-dist / h).ravel())
    rows, cols, vals = (np.concatenate(a) for a in (rows, cols, vals))
    w = sp.csr_matrix((vals, (rows, cols)), shape=(u.size, u.size))
    norm = np.asarray(w.sum(axis=1)).ravel()
    return sp.csr_matrix(sp.diags(1.0 / norm) @ w)


def soft_threshold(y, tau: float):
    return np.sign(y) * np.maximum(np.abs(y) - tau, 0.0)


def update_omega(state: SolverState, D: TransformD, cfg: SolverConfig) -> np.ndarray:
    return soft_threshold(D.forward(state.u) - state.v / cfg.beta, cfg.tau)


def u_direction(state: SolverState, omega: np.ndarray, D: TransformD,
                phi: np.ndarray, b: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    """Gradient of the smooth part of the augmented Lagrangian in ``u``."""
    u = state.u
    data = phi.T @ (cfg.mu * (phi @ u.ravel() - b) - state.lam)
    return (D.adjoint(cfg.beta * D.forward(u) - state.v - cfg.beta * omega)
            - state.gamma + cfg.theta * (u - state.x) + data.reshape(u.shape))


def update_u(state: SolverState, omega: np.ndarray, D: TransformD,
             phi: np.ndarray, b: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    return state.u - cfg.step * u_direction(state, omega, D, phi, b, cfg)


def update_x(u: np.ndarray, gamma: np.ndarray, W, cfg: SolverConfig) -> np.ndarray:
    r = u - gamma / cfg.beta
    if cfg.alpha == 0 or W is None:
        return r
    wr = (W @ r.ravel()).reshape(r.shape)
    return (cfg.theta * r + 2 * cfg.alpha * wr) / (cfg.theta + 2 * cfg.alpha)


def update_multipliers(state: SolverState, D: TransformD, phi: np.ndarray,
                       b: np.ndarray, cfg: SolverConfig):
    v = state.v - cfg.beta * (D.forward(state.u) - state.omega)
    gamma = state.gamma - cfg.theta * (state.u - state.x)
    lam = state.lam - cfg.mu * (phi @ state.u.ravel() - b)
    return v, gamma, lam


def augmented_lagrangian(state: SolverState, D: TransformD, phi: np.ndarray,
                         b: np.ndarray, W, cfg: SolverConfig) -> float:
    x = state.x
    if W is not None and cfg.alpha:
        nl = x - (W @ x.ravel()).reshape(x.shape)
        nonlocal_term = cfg.alpha * float(np.sum(nl * nl))
    else:
        nonlocal_term = 0.0
    du = D.forward(state.u) - state.omega
    ux = state.u - x
    pb = phi @ state.u.ravel() - b
    return (float(np.abs(state.omega).sum()) + nonlocal_term
            - float(np.sum(state.v * du)) + 0.5 * cfg.beta * float(np.sum(du * du))
            - float(np.sum(state.gamma * ux)) + 0.5 * cfg.theta * float(np.sum(ux * ux))
            - float(np.dot(state.lam, pb)) + 0.5 * cfg.mu * float(np.dot(pb, pb)))


def _residuals(state, D, phi, b) -> dict[str, float]:
    return {
        "measurement": float(np.linalg.norm(phi @ state.u.ravel() - b)),
        "transform": float(np.linalg.norm(D.forward(state.u) - state.omega)),
        "split": float(np.linalg.norm(state.u - state.x)),
    }


def _rel_change(new, old) -> float:
    return float(np.linalg.norm(new - old) / max(np.linalg.norm(old), 1e-12))


def solve(b: np.ndarray, phi: np.ndarray, cfg: SolverConfig | None = None) -> ReconReport:
    """Run the nested augmented Lagrangian loop on one block.

    The inner loop applies the omega, u and x updates with ``W`` frozen;
    the outer loop refreshes ``W`` from the current ``u`` and updates the
    multipliers.  The inner loop stops once the relative change of ``u``
    drops below ``cfg.tol``; the outer loop additionally requires the
    relative measurement residual to be below ``cfg.tol``.  Both loops are
    capped by their iteration limits.
    """
    cfg = cfg or SolverConfig()
    cfg.validate()
    phi = np.asarray(phi, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64).ravel()
    if phi.shape[0] != b.size:
        raise ValueError(f"measurements of length {b.size} do not match Phi {phi.shape}")
    state = SolverState.initial(phi, b)
    D = TransformD(state.u.shape[0])
    report = ReconReport(u=state.u)

    def nlm(u):
        if cfg.alpha == 0:
            return None
        return nlm_weights(u, cfg.h, cfg.search_radius, cfg.patch_radius)

    W = nlm(state.u)
    start = augmented_lagrangian(state, D, phi, b, W, cfg)
    report.objective.append(start)
    report.residuals.append(_residuals(state, D, phi, b))
    for outer in range(cfg.outer_iters):
        u_outer = state.u
        for _ in range(cfg.inner_iters):
            u_prev = state.u
            state.omega = update_omega(state, D, cfg)
            u_new = update_u(state, state.omega, D, phi, b, cfg)
            state.x = update_x(u_new, state.gamma, W, cfg)
            state.u = u_new
            report.inner_iterations += 1
            if _rel_change(state.u, u_prev) < cfg.tol:
                break
        state.v, state.gamma, state.lam = update_multipliers(state, D, phi, b, cfg)
        report.outer_iterations = outer + 1
        obj = augmented_lagrangian(state, D, phi, b, W, cfg)
        report.objective.append(obj)
        report.residuals.append(_residuals(state, D, phi, b))
        if not np.isfinite(obj) or abs(obj) > 10 * max(abs(start), 1e-12):
            raise SolverDivergence(
                f"objective grew from {start:.4g} to {obj:.4g} at outer iteration "
                f"{outer + 1}; reduce step (now {cfg.step})", report.objective)
        infeasible = report.residuals[-1]["measurement"] / max(np.linalg.norm(b), 1e-12)
        if max(_rel_change(state.u, u_outer), infeasible) < cfg.tol:
            break
        W = nlm(state.u)
    report.u = state.u
    report.state = state
    return report


def with_overrides(cfg: SolverConfig, **kw) -> SolverConfig:
    return replace(cfg, **kw)
