"""Finite-difference certification of the analytic prompt gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bdro import composite_terms
from .core import BdroConfig, PromptBank, Role, derive_rng
from .encoder import FrozenEncoder
from .objective import Banks, banks_loss_and_grad, separation_loss

FD_STEP = 1e-5
# gradients smaller than this (in norm) are compared absolutely
NORM_FLOOR = 1e-6
GROUPS = ("local", "global", "ood")


@dataclass
class GradCheckReport:
    trials: int
    tol: float
    worst: dict = field(default_factory=dict)
    failures: int = 0

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def lines(self) -> list:
        out = [f"{name:<20s} worst relative error {err:.3e}" for name, err in sorted(self.worst.items())]
        verdict = "PASS" if self.passed else "FAIL"
        out.append(f"{verdict}: {self.trials - self.failures}/{self.trials} trials within tol {self.tol:g}")
        return out


def relative_error(g, g_fd) -> float:
    g, g_fd = np.ravel(g), np.ravel(g_fd)
    if g.size == 0:
        return 0.0
    denom = max(np.linalg.norm(g), np.linalg.norm(g_fd), NORM_FLOOR)
    return float(np.linalg.norm(g - g_fd) / denom)


def central_difference(fun, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = fun(x)
        x[idx] = orig - h
        down = fun(x)
        x[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def random_instance(rng):
    C = int(rng.integers(2, 6))
    U = int(rng.integers(0, 5))
    d = int(rng.integers(4, 9))
    d_ctx = int(rng.integers(2, 6))
    B = int(rng.integers(1, 7))
    enc = FrozenEncoder(rng.standard_normal((d, 2 * d_ctx)) / np.sqrt(d_ctx))
    names = rng.standard_normal((C, d_ctx))
    banks = Banks(PromptBank(Role.LOCAL, 0.5 * rng.standard_normal((C, d_ctx)), names),
                  PromptBank(Role.GLOBAL_ID, 0.5 * rng.standard_normal((C, d_ctx)), names),
                  PromptBank(Role.OOD, 0.5 * rng.standard_normal((U, d_ctx)),
                             rng.standard_normal((U, d_ctx))))
    X = rng.standard_normal((B, d))
    y = rng.integers(0, C, size=B)
    tau = float(rng.uniform(0.1, 1.0))
    rho = float(rng.choice([0.0, 1.0, rng.uniform(0, 1)]))
    return X, y, banks, enc, tau, rho


def _replace(banks: Banks, group: str, ctx) -> Banks:
    i = GROUPS.index(group)
    parts = list(banks)
    parts[i] = parts[i].with_contexts(ctx)
    return Banks(*parts)


def check_separation(X, y, banks, enc, tau, rho) -> dict:
    """Batched closed-form gradient vs differences of the per-sample scalar loss."""
    _, grads = banks_loss_and_grad(X, y, banks, enc, tau, rho)
    errs = {}
    for group, g in zip(GROUPS, grads):
        def fun(ctx, group=group):
            b = _replace(banks, group, ctx)
            return np.mean([separation_loss(x, int(c), b, enc, tau, rho) for x, c in zip(X, y)])
        errs[group] = relative_error(g, central_difference(fun, banks[GROUPS.index(group)].contexts))
    return errs


def check_composite(X, y, banks, enc, tau, rho, cfg: BdroConfig, rng) -> dict:
    """Gradient of the smoothed robust loss with the perturbations held fixed."""
    g_eps = 0.1 * rng.standard_normal(banks.glob.contexts.shape)
    o_eps = 0.1 * rng.standard_normal(banks.ood.contexts.shape)
    _, _, grads = composite_terms(X, y, banks, enc, tau, rho, cfg, g_eps, o_eps)
    errs = {}
    for group, g in zip(GROUPS, grads):
        def fun(ctx, group=group):
            b = _replace(banks, group, ctx)
            return composite_terms(X, y, b, enc, tau, rho, cfg, g_eps, o_eps, need_grad=False)[1]
        errs[group] = relative_error(g, central_difference(fun, banks[GROUPS.index(group)].contexts))
    return errs


def run_gradcheck(trials: int = 100, tol: float = 1e-4, seed: int = 0) -> GradCheckReport:
    report = GradCheckReport(trials, tol)
    for t in range(trials):
        rng = derive_rng(seed, f"gradcheck/{t}")
        X, y, banks, enc, tau, rho = random_instance(rng)
        cfg = BdroConfig(tau1=float(rng.uniform(0.1, 2)), tau2=float(rng.uniform(0.1, 2)),
                         mu=float(rng.uniform(0.2, 2)))
        errs = {f"separation/{k}": v for k, v in check_separation(X, y, banks, enc, tau, rho).items()}
        errs.update({f"bdro/{k}": v for k, v in
                     check_composite(X, y, banks, enc, tau, rho, cfg, rng).items()})
        for k, v in errs.items():
            report.worst[k] = max(report.worst.get(k, 0.0), v)
        if max(errs.values()) > tol:
            report.failures += 1
    return report
