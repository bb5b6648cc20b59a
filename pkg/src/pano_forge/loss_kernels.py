"""Motion-masked denoising loss and its closed-form optimal mask.

Plain dense-array kernels for checking the training signal outside any
network:

* ``masked_loss``: ``sum_ijc (r_ijc * M_ij) ** 2`` for residual ``r``
  (target noise minus predicted noise) and spatial mask ``M`` in [0, 1].
* ``auxiliary_loss``: ``-lam * sum_ij M_ij``, which keeps the mask from
  collapsing to zero.

Per pixel the sum is ``M**2 * rho - lam * M`` with ``rho = sum_c r**2``,
minimized over [0, 1] by ``clamp(lam / (2 rho), 0, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvariantViolation


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise InvariantViolation(f"lambda must be finite and >= 0, got {self.lam}")


def clamp_mask(raw) -> np.ndarray:
    """Clamp raw decoder output into a valid [0, 1] mask."""
    a = np.asarray(raw, dtype=float)
    if not np.all(np.isfinite(a)):
        raise InvariantViolation("mask input contains non-finite values")
    return np.clip(a, 0.0, 1.0)


def _check(residual, mask):
    r = np.asarray(residual, dtype=float)
    m = np.asarray(mask, dtype=float)
    if r.ndim == 2:
        r = r[..., None]
    if r.ndim != 3 or m.shape != r.shape[:2]:
        raise InvariantViolation(f"mask {m.shape} does not match residual spatial dims {r.shape[:2]}")
    if not np.all(np.isfinite(r)):
        raise InvariantViolation("residual contains non-finite values")
    if not np.all(np.isfinite(m)) or m.min(initial=0.0) < 0 or m.max(initial=0.0) > 1:
        raise InvariantViolation("mask values must lie in [0, 1]")
    return r, m


def _rho(r):
    return np.einsum("ijc,ijc->ij", r, r)


def standard_loss(residual) -> float:
    """Unmasked objective ``sum r**2``."""
    r = np.asarray(residual, dtype=float)
    return float(np.sum(r * r))


def masked_loss(residual, mask) -> float:
    r, m = _check(residual, mask)
    rm = r * m[..., None]
    return float(np.sum(rm * rm))


def auxiliary_loss(mask, cfg: LossConfig = LossConfig()) -> float:
    m = np.asarray(mask, dtype=float)
    return float(-cfg.lam * np.sum(m))


def total_loss_and_grads(residual, mask, cfg: LossConfig = LossConfig()):
    """Returns ``(loss, d loss / d mask, d loss / d residual)``.

    The residual gradient has the residual's shape (a 2-D residual is
    treated as single-channel and its gradient returned 2-D).
    """
    squeeze = np.ndim(residual) == 2
    r, m = _check(residual, mask)
    m2 = (m * m)[..., None]
    rho = _rho(r)
    loss = float(np.sum(rho * m * m) - cfg.lam * np.sum(m))
    g_mask = 2.0 * m * rho - cfg.lam
    g_res = 2.0 * r * m2
    if squeeze:
        g_res = g_res[..., 0]
    return loss, g_mask, g_res


def optimal_mask(residual, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Per-pixel minimizer of the total loss over M in [0, 1].

    Pixels with zero residual energy get 1, the limit of ``lam / (2 rho)``.
    """
    r = np.asarray(residual, dtype=float)
    if r.ndim == 2:
        r = r[..., None]
    if not np.all(np.isfinite(r)):
        raise InvariantViolation("residual contains non-finite values")
    rho = _rho(r)
    out = np.ones_like(rho)
    pos = rho > 0
    out[pos] = np.clip(cfg.lam / (2.0 * rho[pos]), 0.0, 1.0)
    return out


def projected_descent(residual, cfg: LossConfig = LossConfig(), init=0.5, steps=500, lr=None):
    """Projected gradient descent on the mask; returns ``(mask, steps_taken)``.

    The default step is ``0.5 / max(rho)``. Stops early once an update
    changes no pixel by more than 1e-12.
    """
    r = np.asarray(residual, dtype=float)
    if r.ndim == 2:
        r = r[..., None]
    rho = _rho(r)
    if lr is None:
        top = rho.max(initial=0.0)
        lr = 0.5 / top if top > 0 else 1.0
    m = np.full(rho.shape, float(init))
    for k in range(int(steps)):
        new = np.clip(m - lr * (2.0 * m * rho - cfg.lam), 0.0, 1.0)
        done = np.max(np.abs(new - m), initial=0.0) <= 1e-12
        m = new
        if done:
            return m, k + 1
    return m, int(steps)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _fd_check(rng, cfg, sign):
    h, w, c = 4, 4, 2
    r = rng.normal(size=(h, w, c))
    m = rng.uniform(0.05, 0.95, size=(h, w))
    _, gm, gr = total_loss_and_grads(r, m, cfg)
    gm, gr = sign * gm, sign * gr
    eps = 1e-5
    worst = 0.0
    for idx in np.ndindex(h, w):
        mp, mn = m.copy(), m.copy()
        mp[idx] += eps
        mn[idx] -= eps
        fd = (total_loss_and_grads(r, mp, cfg)[0] - total_loss_and_grads(r, mn, cfg)[0]) / (2 * eps)
        worst = max(worst, abs(fd - gm[idx]) / max(abs(fd), 1e-8))
    for idx in np.ndindex(h, w, c):
        rp, rn = r.copy(), r.copy()
        rp[idx] += eps
        rn[idx] -= eps
        fd = (total_loss_and_grads(rp, m, cfg)[0] - total_loss_and_grads(rn, m, cfg)[0]) / (2 * eps)
        worst = max(worst, abs(fd - gr[idx]) / max(abs(fd), 1e-8))
    return worst


def run_checks(seed=0, instances=100, lam=1.0, flip_gradient_sign=False):
    """Self-verification suite for the kernels.

    ``flip_gradient_sign`` negates the analytic gradients before they are
    compared, to confirm the suite detects a sign error.
    """
    rng = np.random.default_rng(seed)
    cfg = LossConfig(lam)
    sign = -1.0 if flip_gradient_sign else 1.0
    out = []

    worst = max(_fd_check(rng, cfg, sign) for _ in range(instances))
    out.append(CheckResult("gradients_vs_finite_differences", bool(worst < 1e-5),
                           f"max relative error {worst:.3g}"))

    grid = np.linspace(0.0, 1.0, 100001)
    worst = 0.0
    for rho in np.concatenate([[1.0, 0.01, 0.25], rng.uniform(0.01, 5.0, 20)]):
        r = np.full((1, 1, 1), np.sqrt(rho))
        m_star = optimal_mask(r, cfg)[0, 0]
        m_grid = grid[np.argmin(grid * grid * rho - cfg.lam * grid)]
        worst = max(worst, abs(m_star - m_grid))
    out.append(CheckResult("optimal_mask_vs_grid", bool(worst <= 2e-5), f"max deviation {worst:.3g}"))

    r = rng.normal(size=(8, 8, 3))
    m0 = optimal_mask(r, LossConfig(0.0))
    out.append(CheckResult("zero_lambda_filters_everything", bool(np.all(m0 == 0.0)),
                           f"max mask {m0.max():.3g}"))

    ones = np.ones(r.shape[:2])
    diff = abs(masked_loss(r, ones) - standard_loss(r))
    out.append(CheckResult("identity_mask_reduces_to_standard", diff == 0.0, f"difference {diff:.3g}"))

    r = rng.normal(size=(6, 6, 2))
    m, steps = projected_descent(r, cfg)
    dev = float(np.max(np.abs(m - optimal_mask(r, cfg))))
    out.append(CheckResult("projected_descent_converges", bool(dev <= 1e-4),
                           f"max deviation {dev:.3g} after {steps} steps"))
    return out
